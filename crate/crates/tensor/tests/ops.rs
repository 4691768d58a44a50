use lesion_tensor::ops::{self, AttentionProjections};
use lesion_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1e3f32..1e3, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn channel_concat_split_is_bitwise(
        (a, b) in (1usize..3, 1usize..4, 1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(n, c1, c2, h, w)| {
            (tensor_strategy(vec![n, c1, h, w]), tensor_strategy(vec![n, c2, h, w]))
        })
    ) {
        let tape = Tape::no_grad();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let joined = ops::concat(&[va, vb], 1).unwrap();
        let parts = ops::split(joined, 1, &[a.dim(1), b.dim(1)]).unwrap();
        prop_assert_eq!(bits(&parts[0].value()), bits(&a));
        prop_assert_eq!(bits(&parts[1].value()), bits(&b));
    }

    #[test]
    fn width_concat_split_is_bitwise(
        (a, b) in (1usize..3, 1usize..4, 1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(n, c, h, w1, w2)| {
            (tensor_strategy(vec![n, c, h, w1]), tensor_strategy(vec![n, c, h, w2]))
        })
    ) {
        let tape = Tape::no_grad();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let joined = ops::concat(&[va, vb], 3).unwrap();
        prop_assert_eq!(joined.shape()[3], a.dim(3) + b.dim(3));
        let parts = ops::split(joined, 3, &[a.dim(3), b.dim(3)]).unwrap();
        prop_assert_eq!(bits(&parts[0].value()), bits(&a));
        prop_assert_eq!(bits(&parts[1].value()), bits(&b));
    }

    #[test]
    fn softmax_rows_sum_to_one(x in tensor_strategy(vec![3, 7])) {
        let tape = Tape::no_grad();
        let y = ops::softmax_last(tape.constant(x.map(|v| v * 1e-2))).unwrap().value();
        for row in y.data().chunks(7) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

struct Proj {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
}

impl Proj {
    fn random(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Tensor::randn(&[d, d], rng),
            bq: Tensor::randn(&[d], rng),
            wk: Tensor::randn(&[d, d], rng),
            wv: Tensor::randn(&[d, d], rng),
            bv: Tensor::randn(&[d], rng),
            wo: Tensor::randn(&[d, d], rng),
            bo: Tensor::randn(&[d], rng),
        }
    }

    fn bind<'t>(&self, tape: &'t Tape) -> AttentionProjections<'t> {
        AttentionProjections {
            wq: tape.constant(self.wq.clone()),
            bq: tape.constant(self.bq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
            bv: tape.constant(self.bv.clone()),
            wo: tape.constant(self.wo.clone()),
            bo: tape.constant(self.bo.clone()),
        }
    }
}

/// Reference affine map over rows, written out by hand.
fn affine(x: &[f32], w: &Tensor, b: &Tensor) -> Vec<f32> {
    let d = b.numel();
    let din = x.len();
    (0..d)
        .map(|o| b.data()[o] + (0..din).map(|i| w.data()[o * din + i] * x[i]).sum::<f32>())
        .collect()
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = Proj::random(4, &mut rng);
    let x = Tensor::randn(&[1, 1, 4], &mut rng);
    let tape = Tape::no_grad();
    let (out, weights) = ops::attention_self(tape.constant(x.clone()), &p.bind(&tape), 2).unwrap();
    assert!(weights.value().data().iter().all(|&w| w == 1.0));
    let want = affine(&affine(x.data(), &p.wv, &p.bv), &p.wo, &p.bo);
    for (a, b) in out.value().data().iter().zip(want) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn constant_logits_give_uniform_weights_and_mean_of_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = Proj::random(4, &mut rng);
    // zero queries make every logit 0
    p.wq = Tensor::zeros(&[4, 4]);
    p.bq = Tensor::zeros(&[4]);
    let l = 5;
    let x = Tensor::randn(&[1, l, 4], &mut rng);
    let tape = Tape::no_grad();
    let (out, weights) = ops::attention_self(tape.constant(x.clone()), &p.bind(&tape), 1).unwrap();
    for &w in weights.value().data() {
        assert!((w - 0.2).abs() < 1e-6);
    }
    let values: Vec<Vec<f32>> = x.data().chunks(4).map(|row| affine(row, &p.wv, &p.bv)).collect();
    let mean: Vec<f32> = (0..4).map(|j| values.iter().map(|v| v[j]).sum::<f32>() / l as f32).collect();
    let want = affine(&mean, &p.wo, &p.bo);
    for row in out.value().data().chunks(4) {
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn attention_rows_sum_to_one_and_heads_must_divide() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = Proj::random(6, &mut rng);
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::randn(&[2, 7, 6], &mut rng));
    let (_, w) = ops::attention_self(x, &p.bind(&tape), 3).unwrap();
    for row in w.value().data().chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    let err = ops::attention_self(x, &p.bind(&tape), 4).unwrap_err();
    assert!(err.to_string().contains("divisible"), "{err}");
}

#[test]
fn group_norm_normalizes_before_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::no_grad();
    for c in [4usize, 16] {
        let groups = ops::default_groups(c);
        let x = Tensor::randn(&[3, c, 5, 5], &mut rng).map(|v| 4.0 * v - 2.0);
        let y = ops::group_norm(
            tape.constant(x),
            groups,
            tape.constant(Tensor::ones(&[c])),
            tape.constant(Tensor::zeros(&[c])),
        )
        .unwrap()
        .value();
        for g in y.data().chunks(c / groups * 25) {
            let m = g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64;
            let v = g.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / g.len() as f64;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-3, "mean {m} var {v}");
        }
    }
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[2, 3, 8, 8], &mut rng);
    let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
    let run = || {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = ops::silu(ops::conv2d(xv, tape.constant(w.clone()), None, 2, 1).unwrap());
        let g = tape.backward(ops::sum_all(ops::square(y))).unwrap();
        (bits(&y.value()), bits(g.get(xv).unwrap()))
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_requires_scalar_root() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    assert!(tape.backward(x).is_err());
}
