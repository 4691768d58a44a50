//! Finite-difference coverage of every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{
    grad_check, grad_check_projected, grad_check_weighted, Coverage, GradCheckReport,
};
use crate::ops::{self, AttentionProjections};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by the suite. At f32 the rounding noise of a central difference
/// scales as `ulp / h`; 1e-2 keeps it two orders below the tolerance for
/// gradient entries of order 1e-2 while the h² truncation term stays small.
pub const H: f32 = 1e-2;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric derivative of the worst element.
    pub worst_values: (f64, f64),
    pub elements: usize,
}

type Case = fn(&mut ChaCha8Rng, u64) -> Result<GradCheckReport>;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Run `f` through the projected check with every element probed.
fn proj<F>(f: F, inputs: &[Tensor], seed: u64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_projected(f, inputs, H, Coverage::All, seed)
}

fn scalar<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check(f, inputs, H, Coverage::All)
}

/// Entries with magnitude in [0.5, 1.5] and random sign.
fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.5..1.5f32);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn small_nchw(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=4), rng.random_range(2..=4)]
}

fn case_add(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    proj(|_, x| ops::add(x[0], x[1]), &[randn(&sh, rng), randn(&sh, rng)], s)
}

fn case_sub(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    proj(|_, x| ops::sub(x[0], x[1]), &[randn(&sh, rng), randn(&sh, rng)], s)
}

fn case_mul(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    proj(|_, x| ops::mul(x[0], x[1]), &[randn(&sh, rng), randn(&sh, rng)], s)
}

fn case_div(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    let den = uniform(&sh, 0.5, 2.0, rng);
    proj(|_, x| ops::div(x[0], x[1]), &[randn(&sh, rng), den], s)
}

fn case_scale(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let k = rng.random_range(-2.0..2.0f32);
    let sh = small_nchw(rng);
    proj(move |_, x| Ok(ops::add_scalar(ops::scale(x[0], k), 0.3)), &[randn(&sh, rng)], s)
}

fn case_square(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    proj(|_, x| Ok(ops::square(x[0])), &[randn(&sh, rng)], s)
}

fn case_exp(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    proj(|_, x| Ok(ops::exp(x[0])), &[randn(&sh, rng)], s)
}

fn case_sigmoid(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    proj(|_, x| Ok(ops::sigmoid(x[0])), &[randn(&sh, rng)], s)
}

fn case_silu(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    proj(|_, x| Ok(ops::silu(x[0])), &[randn(&sh, rng)], s)
}

fn case_sum_all(rng: &mut ChaCha8Rng, _: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    let w = signed(&sh, rng);
    scalar(move |t, x| Ok(ops::sum_all(ops::mul(x[0], t.constant(w.clone()))?)), &[randn(&sh, rng)])
}

fn case_mean_all(rng: &mut ChaCha8Rng, _: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    let w = signed(&sh, rng);
    scalar(move |t, x| Ok(ops::mean_all(ops::mul(x[0], t.constant(w.clone()))?)), &[randn(&sh, rng)])
}

fn case_add_per_channel(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    let e = randn(&sh[..2], rng);
    proj(|_, x| ops::add_per_channel(x[0], x[1]), &[randn(&sh, rng), e], s)
}

fn case_add_channel_bias(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    let b = randn(&sh[1..2], rng);
    proj(|_, x| ops::add_channel_bias(x[0], x[1]), &[randn(&sh, rng), b], s)
}

fn case_broadcast_channels(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let c = rng.random_range(1..=4);
    proj(|_, x| ops::broadcast_channels(x[0], 2, &[3, 2]), &[randn(&[c], rng)], s)
}

fn case_reshape_permute(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    proj(
        move |_, x| {
            let y = ops::permute(x[0], &[0, 2, 3, 1])?;
            ops::reshape(y, &[sh[0] * sh[2], sh[3] * sh[1]])
        },
        &[randn(&sh, rng)],
        s,
    )
}

fn case_concat(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let a = small_nchw(rng);
    let mut b = a;
    b[1] = rng.random_range(1..=3);
    let mut c = a;
    c[3] = rng.random_range(1..=3);
    let inputs = [randn(&a, rng), randn(&b, rng), randn(&c, rng)];
    proj(
        |_, x| {
            let chan = ops::concat(&[x[0], x[1]], 1)?;
            let wide = ops::concat(&[x[0], x[2]], 3)?;
            let (nc, nw) = (chan.value().numel(), wide.value().numel());
            ops::concat(&[ops::reshape(chan, &[nc])?, ops::reshape(wide, &[nw])?], 0)
        },
        &inputs,
        s,
    )
}

fn case_split_narrow(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let mut sh = small_nchw(rng);
    sh[3] = 4;
    proj(
        |_, x| {
            let parts = ops::split(x[0], 3, &[1, 3])?;
            let mid = ops::narrow(parts[1], 3, 1, 2)?;
            ops::mul(mid, mid)
        },
        &[randn(&sh, rng)],
        s,
    )
}

fn case_upsample(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    proj(|_, x| ops::upsample_nearest2x(x[0]), &[randn(&sh, rng)], s)
}

fn case_avg_pool(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let mut sh = small_nchw(rng);
    sh[2] *= 2;
    sh[3] *= 2;
    proj(|_, x| ops::avg_pool2x(x[0]), &[randn(&sh, rng)], s)
}

// Multilinear ops draw operands from U(0.5, 1.5): every gradient entry is then
// a sum of positive terms and cannot cancel to near zero, where the per-element
// relative error would measure f32 rounding instead of the derivative.
fn case_conv(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let (n, c, k) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let ksize = if rng.random_bool(0.75) { 3 } else { 1 };
    let stride = rng.random_range(1..=2);
    let pad = ksize / 2;
    let hw = rng.random_range(4..=6);
    let inputs = [
        uniform(&[n, c, hw, hw], 0.5, 1.5, rng),
        uniform(&[k, c, ksize, ksize], 0.5, 1.5, rng),
        randn(&[k], rng),
    ];
    proj(move |_, x| ops::conv2d(x[0], x[1], Some(x[2]), stride, pad), &inputs, s)
}

fn case_group_norm(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let groups = rng.random_range(1..=2);
    let c = groups * rng.random_range(1..=2);
    let sh = [rng.random_range(1..=2), c, 3, 3];
    let inputs = [randn(&sh, rng), uniform(&[c], 0.5, 1.5, rng), randn(&[c], rng)];
    proj(move |_, x| ops::group_norm(x[0], groups, x[1], x[2]), &inputs, s)
}

fn case_matmul(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let (b, m, k, n) = (2, rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=3));
    let inputs = [uniform(&[b, m, k], 0.5, 1.5, rng), uniform(&[b, k, n], 0.5, 1.5, rng)];
    proj(|_, x| ops::matmul(x[0], x[1]), &inputs, s)
}

fn case_linear(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let (rows, din, dout) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let inputs = [
        uniform(&[rows, din], 0.5, 1.5, rng),
        uniform(&[dout, din], 0.5, 1.5, rng),
        randn(&[dout], rng),
    ];
    proj(|_, x| ops::linear(x[0], x[1], Some(x[2])), &inputs, s)
}

fn case_softmax(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let sh = [rng.random_range(1..=3), rng.random_range(2..=5)];
    proj(|_, x| ops::softmax_last(x[0]), &[randn(&sh, rng)], s)
}

fn case_attention(rng: &mut ChaCha8Rng, s: u64) -> Result<GradCheckReport> {
    let heads = rng.random_range(1..=2);
    let d = 2 * heads;
    let l = rng.random_range(2..=4);
    let mut inputs = vec![randn(&[1, l, d], rng)];
    for k in 0..4 {
        inputs.push(randn(&[d, d], rng).map(|v| v * 0.4));
        if k != 1 {
            inputs.push(randn(&[d], rng).map(|v| v * 0.1));
        }
    }
    proj(
        move |_, x| {
            let p = AttentionProjections {
                wq: x[1],
                bq: x[2],
                wk: x[3],
                wv: x[4],
                bv: x[5],
                wo: x[6],
                bo: x[7],
            };
            Ok(ops::attention_self(x[0], &p, heads)?.0)
        },
        &inputs,
        s,
    )
}

// Residuals are kept away from zero, where the gradient of a squared error vanishes.
fn residual_pair(sh: &[usize], rng: &mut ChaCha8Rng) -> [Tensor; 2] {
    let a = randn(sh, rng);
    let b = a.zip_map(&signed(sh, rng), |a, d| a + d).unwrap();
    [a, b]
}

fn case_mse(rng: &mut ChaCha8Rng, _: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    scalar(|_, x| ops::mse(x[0], x[1]), &residual_pair(&sh, rng))
}

fn case_masked_mse(rng: &mut ChaCha8Rng, _: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    let mut w = Tensor::from_fn(&sh, |i| (i % 2) as f32);
    w.data_mut()[0] = 1.0;
    scalar(
        move |_, x| Ok(ops::masked_mse(x[0], x[1], &w)?.expect("non-empty region")),
        &residual_pair(&sh, rng),
    )
}

fn case_bce(rng: &mut ChaCha8Rng, _: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    let t = Tensor::from_fn(&sh, |i| ((i * 7 + 3) % 3 == 0) as u8 as f32);
    scalar(move |_, x| ops::bce_with_logits(x[0], &t), &[randn(&sh, rng)])
}

fn case_soft_dice(rng: &mut ChaCha8Rng, _: u64) -> Result<GradCheckReport> {
    let sh = small_nchw(rng);
    let t = Tensor::from_fn(&sh, |i| ((i * 5 + 1) % 3 == 0) as u8 as f32);
    scalar(move |_, x| ops::soft_dice_loss(x[0], &t), &[uniform(&sh, 0.05, 0.95, rng)])
}

/// `sum(silu(conv2d(x, w)))`, with the final sum taken in f64.
fn case_conv_silu_sum(rng: &mut ChaCha8Rng, _: u64) -> Result<GradCheckReport> {
    let inputs = [randn(&[1, 2, 5, 5], rng), randn(&[3, 2, 3, 3], rng)];
    grad_check_weighted(
        |_, x| Ok(ops::silu(ops::conv2d(x[0], x[1], None, 1, 1)?)),
        &inputs,
        H,
        Coverage::All,
        &Tensor::ones(&[1, 3, 5, 5]),
    )
}

const CASES: &[(&str, Case)] = &[
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("div", case_div),
    ("scale+add_scalar", case_scale),
    ("square", case_square),
    ("exp", case_exp),
    ("sigmoid", case_sigmoid),
    ("silu", case_silu),
    ("sum_all", case_sum_all),
    ("mean_all", case_mean_all),
    ("add_per_channel", case_add_per_channel),
    ("add_channel_bias", case_add_channel_bias),
    ("broadcast_channels", case_broadcast_channels),
    ("permute+reshape", case_reshape_permute),
    ("concat (channel, width)", case_concat),
    ("split+narrow", case_split_narrow),
    ("upsample_nearest2x", case_upsample),
    ("avg_pool2x", case_avg_pool),
    ("conv2d", case_conv),
    ("group_norm", case_group_norm),
    ("matmul", case_matmul),
    ("linear", case_linear),
    ("softmax_last", case_softmax),
    ("attention_self", case_attention),
    ("mse", case_mse),
    ("masked_mse", case_masked_mse),
    ("bce_with_logits", case_bce),
    ("soft_dice_loss", case_soft_dice),
    ("conv2d→silu→sum", case_conv_silu_sum),
];

/// Check every operation on `instances` random inputs each.
pub fn run(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    CASES
        .iter()
        .enumerate()
        .map(|(ci, &(op, case))| {
            let mut check = OpCheck {
                op,
                instances,
                max_rel_error: 0.0,
                worst_values: (0.0, 0.0),
                elements: 0,
            };
            for k in 0..instances {
                let s = seed.wrapping_mul(1_000_003).wrapping_add((ci * 1000 + k) as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let r = case(&mut rng, s)?;
                if r.max_rel_error >= check.max_rel_error {
                    check.max_rel_error = r.max_rel_error;
                    check.worst_values = r.worst_values;
                }
                check.elements += r.checked;
            }
            Ok(check)
        })
        .collect()
}
