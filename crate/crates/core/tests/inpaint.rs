use lesion_core::inpaint::{
    self, apply_mask, build_conditioning, cfg_combine, delta_range, dilate, drop_condition, gen_mask, gen_mask_with,
    latent_mask, reference_canvas, DiffusionModel, LossRegion, MaskConfig, MaskSpec, SampleConfig, SampleRngs,
};
use lesion_core::schedule::linear_schedule;
use lesion_core::seed;
use lesion_core::synthdata::{gen_from_seed, CorpusStyle, StyleId};
use lesion_core::train::{OptimConfig, Trainer};
use lesion_core::unet::{TrainMode, UNetConfig};
use lesion_core::vae::{Vae, VaeConfig};
use lesion_oracle::reference;
use lesion_tensor::Tensor;

fn tiny_vae() -> Vae {
    Vae::new(
        VaeConfig {
            width: 8,
            latent_channels: 4,
            factor: 4,
        },
        0,
    )
    .unwrap()
}

fn tiny_model(seed: u64) -> DiffusionModel {
    let cfg = UNetConfig {
        latent_channels: 4,
        base_width: 8,
        depth: 2,
        attention: true,
        time_embed_dim: 16,
    };
    DiffusionModel::new(cfg, seed).unwrap()
}

fn image(s: u64, size: usize) -> Tensor {
    gen_from_seed(&CorpusStyle::preset(StyleId::Kpi), s, size).unwrap().0
}

fn to_rows(m: &Tensor) -> Vec<Vec<bool>> {
    let (h, w) = (m.dim(0), m.dim(1));
    (0..h).map(|y| (0..w).map(|x| m.data()[y * w + x] >= 0.5).collect()).collect()
}

fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        if (y0..=y1).contains(&y) && (x0..=x1).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

fn bbox(m: &Tensor) -> (usize, usize, usize, usize) {
    let w = m.dim(1);
    let set: Vec<(usize, usize)> = (0..m.numel()).filter(|&i| m.data()[i] >= 0.5).map(|i| (i / w, i % w)).collect();
    let ys = set.iter().map(|p| p.0);
    let xs = set.iter().map(|p| p.1);
    (ys.clone().min().unwrap(), ys.max().unwrap(), xs.clone().min().unwrap(), xs.max().unwrap())
}

#[test]
fn margin_ranges() {
    assert_eq!(delta_range(1024), (50, 200));
    assert_eq!(delta_range(64), (3, 13));
    let mut rng = seed::rng(0, "test", 0);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..300 {
        let spec = gen_mask(&mut rng, 64, 64, &MaskConfig::default()).unwrap();
        assert!((3..=13).contains(&spec.delta_px));
        seen.insert(spec.delta_px);
    }
    // uniform over all eleven values
    assert_eq!(seen.len(), 11);
}

#[test]
fn rectangle_dilation_bounding_box() {
    let inner = rect(64, 64, 10, 20, 10, 20);
    let spec = MaskSpec::from_inner(inner.clone(), 5).unwrap();
    assert_eq!(bbox(&spec.mask), (5, 25, 5, 25));
    assert_eq!(to_rows(&spec.mask), reference::dilate(&to_rows(&inner), 5));
    // clipped at the border
    let corner = MaskSpec::from_inner(rect(64, 64, 0, 2, 0, 2), 5).unwrap();
    assert_eq!(bbox(&corner.mask), (0, 7, 0, 7));
}

#[test]
fn gen_mask_matches_brute_force_dilation() {
    let mut rng = seed::rng(1, "test", 0);
    for case in 0..20 {
        let size = [32, 48, 64][case % 3];
        let spec = gen_mask(&mut rng, size, size, &MaskConfig::default()).unwrap();
        let want = reference::dilate(&to_rows(&spec.inner), spec.delta_px);
        assert_eq!(to_rows(&spec.mask), want, "case {case}");
        assert!(spec.mask.data().iter().chain(spec.inner.data()).all(|&v| v == 0.0 || v == 1.0));
        assert!(spec.inner.data().iter().zip(spec.mask.data()).all(|(&i, &m)| i <= m));
    }
}

#[test]
fn larger_margin_is_a_superset() {
    for s in 0..10 {
        let draw = |d| gen_mask_with(&mut seed::rng(s, "mono", 0), 64, 64, &MaskConfig::default(), Some(d)).unwrap();
        let (a, b) = (draw(2), draw(9));
        assert_eq!(a.inner, b.inner);
        assert!(a.mask.data().iter().zip(b.mask.data()).all(|(&x, &y)| x <= y));
        assert!(b.mask.sum() > a.mask.sum());
    }
    assert!(dilate(&Tensor::zeros(&[3, 4, 4]), 1).is_err());
}

#[test]
fn mask_fraction_bounds_are_enforced() {
    let cfg = MaskConfig {
        min_frac: 0.05,
        max_frac: 0.1,
    };
    let mut rng = seed::rng(2, "test", 0);
    for _ in 0..50 {
        let f = gen_mask(&mut rng, 64, 64, &cfg).unwrap().inner.mean() as f32;
        assert!((0.05..=0.1).contains(&f), "{f}");
    }
    assert!(gen_mask(&mut rng, 8, 8, &cfg).is_err());
    let bad = MaskConfig {
        min_frac: 0.3,
        max_frac: 0.2,
    };
    assert!(gen_mask(&mut rng, 64, 64, &bad).is_err());
}

#[test]
fn apply_mask_examples() {
    let img = image(0, 32);
    assert_eq!(apply_mask(&img, &Tensor::zeros(&[32, 32])).unwrap(), img);
    assert!(apply_mask(&img, &Tensor::ones(&[32, 32])).unwrap().data().iter().all(|&v| v == 0.0));
    let gray = Tensor::full(&[3, 32, 32], 0.5);
    let quarter = rect(32, 32, 0, 15, 0, 15);
    assert_eq!(apply_mask(&gray, &quarter).unwrap().mean(), 0.375);
    assert!(apply_mask(&img, &Tensor::full(&[32, 32], 0.5)).is_err());
    assert!(apply_mask(&img, &Tensor::zeros(&[16, 32])).is_err());
}

#[test]
fn reference_canvas_contract() {
    let img = image(1, 32);
    assert!(reference_canvas(&img, &Tensor::zeros(&[32, 32])).unwrap().data().iter().all(|&v| v == 0.5));
    let inner = rect(32, 32, 4, 12, 8, 20);
    let r = reference_canvas(&img, &inner).unwrap();
    for i in 0..r.numel() {
        let want = if inner.data()[i % 1024] == 1.0 { img.data()[i] } else { 0.5 };
        assert_eq!(r.data()[i], want);
    }
}

#[test]
fn conditioning_shapes_split_and_alignment() {
    let vae = Vae::new(VaeConfig::default(), 0).unwrap();
    let (ib, il) = (image(2, 64), image(3, 64));
    let spec = gen_mask(&mut seed::rng(3, "test", 0), 64, 64, &MaskConfig::default()).unwrap();
    let im = apply_mask(&ib, &spec.mask).unwrap();
    let b = build_conditioning(&im, &il, &spec.mask, &vae).unwrap();
    assert_eq!(b.x_c.shape(), &[4, 16, 32]);
    assert_eq!(b.m_c.shape(), &[1, 16, 32]);
    assert!(!b.null_flag);
    let (xm, xl) = b.halves().unwrap();
    assert_eq!(xm, vae.encode(&im).unwrap());
    assert_eq!(xl, vae.encode(&il).unwrap());
    assert!(b.m_c.narrow(2, 16, 16).unwrap().data().iter().all(|&v| v == 0.0));

    // perturbing one input leaves the other half bitwise unchanged
    let il2 = il.map(|v| 1.0 - v);
    let b2 = build_conditioning(&im, &il2, &spec.mask, &vae).unwrap();
    let (xm2, xl2) = b2.halves().unwrap();
    assert_eq!(xm2, xm);
    assert_ne!(xl2, xl);
    let im2 = im.map(|v| v * 0.5);
    let (xm3, xl3) = build_conditioning(&im2, &il, &spec.mask, &vae).unwrap().halves().unwrap();
    assert_ne!(xm3, xm);
    assert_eq!(xl3, xl);

    assert!(build_conditioning(&im, &image(4, 32), &spec.mask, &vae).is_err());
}

#[test]
fn latent_mask_preserves_area() {
    let mut rng = seed::rng(4, "test", 0);
    let mut checked = 0;
    while checked < 50 {
        let spec = gen_mask(&mut rng, 64, 64, &MaskConfig::default()).unwrap();
        if spec.mask.sum() < 100.0 {
            continue;
        }
        let lm = latent_mask(&spec.mask, 16, 16).unwrap();
        assert_eq!(lm.shape(), &[1, 16, 16]);
        assert!(lm.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!((lm.mean() - spec.mask.mean()).abs() <= 0.1);
        checked += 1;
    }
}

#[test]
fn training_timesteps_are_uniform() {
    let vae = tiny_vae();
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let imgs: Vec<Tensor> = (0..50).map(|s| image(s, 32)).collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let mut sum = 0usize;
    for k in 0..20 {
        let mut rngs = SampleRngs::new(5, k);
        let batch = inpaint::make_train_batch(&refs, None, &mut rngs, &vae, &sched, &MaskConfig::default()).unwrap();
        for s in &batch {
            assert!((1..=1000).contains(&s.t));
            assert_eq!(s.z_target.shape(), &[4, 8, 16]);
            assert_eq!(s.eps.shape(), s.z_target.shape());
        }
        sum += batch.iter().map(|s| s.t).sum::<usize>();
    }
    let mean = sum as f64 / 1000.0;
    assert!((mean - 500.5).abs() / 500.5 < 0.03, "mean t {mean}");
}

#[test]
fn empty_mask_sample_is_degenerate() {
    let vae = tiny_vae();
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let img = image(6, 32);
    let mut rngs = SampleRngs::new(6, 0);
    let s = inpaint::make_train_batch_with_masks(&[&img], None, &[MaskSpec::empty(32, 32)], &mut rngs, &vae, &sched)
        .unwrap()
        .remove(0);
    let (xm, xl) = s.bundle.halves().unwrap();
    assert_eq!(xm, vae.encode(&img).unwrap());
    assert_eq!(xl, vae.encode(&Tensor::full(&[3, 32, 32], 0.5)).unwrap());
    assert_eq!(s.z_target.narrow(2, 0, 8).unwrap(), xm);
}

#[test]
fn condition_dropout() {
    let vae = tiny_vae();
    let img = image(7, 32);
    let spec = gen_mask(&mut seed::rng(7, "test", 0), 32, 32, &MaskConfig::default()).unwrap();
    let b = build_conditioning(&apply_mask(&img, &spec.mask).unwrap(), &img, &spec.mask, &vae).unwrap();
    let nb = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let nr = Tensor::new(&[4], vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
    let mut rng = seed::rng(8, "test", 0);

    assert_eq!(drop_condition(&b, &mut rng, 0.0, &nb, &nr).unwrap(), b);
    let d = drop_condition(&b, &mut rng, 1.0, &nb, &nr).unwrap();
    assert!(d.null_flag);
    assert!(d.m_c.data().iter().all(|&v| v == 0.0));
    let (l, r) = d.halves().unwrap();
    for c in 0..4 {
        assert!(l.narrow(0, c, 1).unwrap().data().iter().all(|&v| v == nb.data()[c]));
        assert!(r.narrow(0, c, 1).unwrap().data().iter().all(|&v| v == nr.data()[c]));
    }

    let dropped = (0..10_000)
        .filter(|_| drop_condition(&b, &mut rng, 0.1, &nb, &nr).unwrap().null_flag)
        .count();
    let freq = dropped as f64 / 10_000.0;
    assert!((0.09..=0.11).contains(&freq), "{freq}");
    assert!(drop_condition(&b, &mut rng, 1.5, &nb, &nr).is_err());
}

#[test]
fn null_embeddings_are_trainable_only_with_dropout() {
    let m = tiny_model(0);
    let (nb, nr) = m.nulls().unwrap();
    assert_eq!(nb.shape(), &[4]);
    assert_eq!(nr.shape(), &[4]);
    for mode in [TrainMode::All, TrainMode::AttentionOnly] {
        assert!(m.trainable(mode, true)(inpaint::NULL_BENIGN));
        assert!(!m.trainable(mode, false)(inpaint::NULL_REFERENCE));
    }
}

#[test]
fn null_bundle_hides_the_inputs() {
    let vae = tiny_vae();
    let m = tiny_model(1);
    let (nb, nr) = m.nulls().unwrap();
    let mut outs = Vec::new();
    for s in [10, 11] {
        let img = image(s, 32);
        let spec = gen_mask(&mut seed::rng(s, "test", 0), 32, 32, &MaskConfig::default()).unwrap();
        let b = build_conditioning(&apply_mask(&img, &spec.mask).unwrap(), &img, &spec.mask, &vae).unwrap();
        let d = drop_condition(&b, &mut seed::rng(0, "x", 0), 1.0, &nb, &nr).unwrap();
        let z = Tensor::full(&[4, 8, 16], 0.3);
        let x = Tensor::concat(&[&z, &d.m_c, &d.x_c], 0).unwrap();
        outs.push(m.unet.predict(&x, 400).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn fresh_model_loss_matches_independent_fields() {
    let vae = tiny_vae();
    let m = tiny_model(2);
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let imgs: Vec<Tensor> = (0..16).map(|s| image(20 + s, 32)).collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let mut rngs = SampleRngs::new(9, 0);
    let batch = inpaint::make_train_batch(&refs, None, &mut rngs, &vae, &sched, &MaskConfig::default()).unwrap();
    let loss = inpaint::eval_loss(&m, &batch, &sched, LossRegion::Full).unwrap().unwrap();

    // E(eps - eps_hat)² = E eps² + E eps_hat² when the prediction ignores eps
    let mut out_sq = 0.0;
    let mut eps_sq = 0.0;
    let mut n = 0.0;
    for s in &batch {
        let zt = lesion_core::schedule::forward_diffuse(&s.z_target, s.t, &s.eps, &sched).unwrap();
        let x = Tensor::concat(&[&zt, &s.bundle.m_c, &s.bundle.x_c], 0).unwrap();
        let y = m.unet.predict(&x, s.t).unwrap();
        out_sq += y.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        eps_sq += s.eps.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        n += y.numel() as f64;
    }
    let expected = (eps_sq + out_sq) / n;
    assert!((loss - expected).abs() < 0.05, "loss {loss}, expected {expected}");
    assert!((0.7..=1.3).contains(&loss), "{loss}");
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let vae = tiny_vae();
    let mut m = tiny_model(3);
    for n in ["unet.out.conv.weight", "unet.out.conv.bias"] {
        let t = m.unet.params.get_mut(n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let img = image(30, 32);
    let mut rngs = SampleRngs::new(10, 0);
    let mut batch = inpaint::make_train_batch(&[&img], None, &mut rngs, &vae, &sched, &MaskConfig::default()).unwrap();
    // the model now predicts zero noise; make that the injected noise
    batch[0].eps = Tensor::zeros(batch[0].eps.shape());
    for region in [LossRegion::Full, LossRegion::BenignHalf, LossRegion::HoleOnly] {
        assert_eq!(inpaint::eval_loss(&m, &batch, &sched, region).unwrap(), Some(0.0));
    }
}

#[test]
fn empty_hole_region_skips_the_update() {
    let vae = tiny_vae();
    let mut m = tiny_model(4);
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let img = image(31, 32);
    let mut rngs = SampleRngs::new(11, 0);
    let batch =
        inpaint::make_train_batch_with_masks(&[&img], None, &[MaskSpec::empty(32, 32)], &mut rngs, &vae, &sched)
            .unwrap();
    assert_eq!(inpaint::eval_loss(&m, &batch, &sched, LossRegion::HoleOnly).unwrap(), None);
    let before = m.unet.params.clone();
    let mut trainer = Trainer::new(&OptimConfig {
        lr: 1e-3,
        warmup_steps: 0,
        total_steps: 10,
        weight_decay: 0.0,
        batch: 1,
    }).unwrap();
    let loss = inpaint::train_step(&mut m, &batch, &sched, &mut trainer, LossRegion::HoleOnly, TrainMode::All, true)
        .unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(m.unet.params, before);
    assert_eq!(trainer.step(), 1);
}

#[test]
fn guidance_combination() {
    let c = Tensor::new(&[1], vec![2.0]).unwrap();
    let u = Tensor::new(&[1], vec![1.0]).unwrap();
    assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
    assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    assert_eq!(cfg_combine(&c, &u, 3.0).unwrap().data(), &[4.0]);
    let r = Tensor::rand_uniform(&[2, 3, 3], -1.0, 1.0, &mut seed::rng(0, "a", 0));
    let q = Tensor::rand_uniform(&[2, 3, 3], -1.0, 1.0, &mut seed::rng(0, "b", 0));
    assert_eq!(cfg_combine(&r, &q, 1.0).unwrap(), r);
    assert!(cfg_combine(&r, &c, 2.0).is_err());
}

fn inpaint_setup() -> (Vae, DiffusionModel, Tensor, Tensor, Tensor) {
    let vae = tiny_vae();
    let mut m = tiny_model(5);
    // non-zero nulls so the two branches differ
    *m.unet.params.get_mut(inpaint::NULL_BENIGN).unwrap() = Tensor::new(&[4], vec![0.5, -0.5, 0.2, 0.1]).unwrap();
    let (ib, il) = (image(40, 32), image(41, 32));
    let spec = gen_mask(&mut seed::rng(12, "test", 0), 32, 32, &MaskConfig::default()).unwrap();
    (vae, m, ib, il, spec.mask)
}

#[test]
fn inpaint_is_deterministic_and_composites_exactly() {
    let (vae, m, ib, il, mask) = inpaint_setup();
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let cfg = SampleConfig {
        steps: 5,
        ..SampleConfig::default()
    };
    let a = inpaint::inpaint(&ib, &il, &mask, &vae, &m, &sched, &cfg).unwrap();
    let b = inpaint::inpaint(&ib, &il, &mask, &vae, &m, &sched, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[3, 32, 32]);
    let other = SampleConfig { seed: 1, ..cfg.clone() };
    assert_ne!(inpaint::inpaint(&ib, &il, &mask, &vae, &m, &sched, &other).unwrap(), a);

    let comp = SampleConfig {
        composite: true,
        ..cfg.clone()
    };
    let c = inpaint::inpaint(&ib, &il, &mask, &vae, &m, &sched, &comp).unwrap();
    for i in 0..c.numel() {
        if mask.data()[i % 1024] == 0.0 {
            assert_eq!(c.data()[i], ib.data()[i]);
        } else {
            assert_eq!(c.data()[i], a.data()[i]);
        }
    }
    assert!(inpaint::inpaint(&ib, &image(0, 64), &mask, &vae, &m, &sched, &cfg).is_err());
}

#[test]
fn unit_guidance_equals_conditional_only() {
    let (vae, m, ib, il, mask) = inpaint_setup();
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let base = SampleConfig {
        steps: 5,
        guidance: 1.0,
        ..SampleConfig::default()
    };
    let cond_only = SampleConfig {
        conditional_only: true,
        guidance: 7.0,
        ..base.clone()
    };
    let forced = SampleConfig {
        force_uncond: true,
        ..base.clone()
    };
    let a = inpaint::inpaint(&ib, &il, &mask, &vae, &m, &sched, &base).unwrap();
    assert_eq!(a, inpaint::inpaint(&ib, &il, &mask, &vae, &m, &sched, &cond_only).unwrap());
    assert_eq!(a, inpaint::inpaint(&ib, &il, &mask, &vae, &m, &sched, &forced).unwrap());
    let guided = SampleConfig {
        guidance: 2.0,
        ..base.clone()
    };
    assert_ne!(a, inpaint::inpaint(&ib, &il, &mask, &vae, &m, &sched, &guided).unwrap());
    let bad = SampleConfig {
        guidance: -1.0,
        ..base
    };
    assert!(inpaint::inpaint(&ib, &il, &mask, &vae, &m, &sched, &bad).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = tiny_model(6);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.pgck");
    m.save(&p).unwrap();
    let back = DiffusionModel::load(&p).unwrap();
    assert_eq!(back.unet.params, m.unet.params);
    assert_eq!(back.unet.config, m.unet.config);
    assert!(DiffusionModel::load(&dir.path().join("missing.pgck")).is_err());
}

#[test]
fn masked_mae_on_the_mask_only() {
    let a = Tensor::zeros(&[3, 32, 32]);
    let mut b = Tensor::full(&[3, 32, 32], 0.25);
    let m = rect(32, 32, 0, 7, 0, 31);
    for i in 0..b.numel() {
        if m.data()[i % 1024] == 0.0 {
            b.data_mut()[i] = 9.0;
        }
    }
    assert_eq!(inpaint::masked_mae(&a, &b, &m).unwrap(), 0.25);
    assert!(inpaint::masked_mae(&a, &b, &Tensor::zeros(&[32, 32])).is_err());
}
