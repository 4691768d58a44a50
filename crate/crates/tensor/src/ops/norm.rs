use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f32 = 1e-5;

/// Group count used throughout: 8, or `channels` when fewer than 8.
pub fn default_groups(channels: usize) -> usize {
    channels.min(8)
}

/// Group normalization over `[N, C, ...]` followed by a per-channel affine map.
pub fn group_norm<'t>(
    x: Var<'t>,
    groups: usize,
    gamma: Var<'t>,
    beta: Var<'t>,
) -> Result<Var<'t>> {
    let xs = x.shape();
    if xs.len() < 2 {
        return shape_err("group_norm", format!("expected [N, C, ...], got {xs:?}"));
    }
    let (n, c) = (xs[0], xs[1]);
    let inner: usize = xs[2..].iter().product();
    if groups == 0 || c % groups != 0 {
        return shape_err(
            "group_norm",
            format!("channel count {c} not divisible into {groups} groups"),
        );
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(
            "group_norm",
            format!(
                "affine parameters must be [{c}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            ),
        );
    }
    let cg = c / groups;
    let group_len = cg * inner;
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let mut mean = vec![0f64; n * groups];
    let mut rstd = vec![0f64; n * groups];
    let mut out = vec![0f32; xv.numel()];
    for (gi, chunk) in xv.data().chunks(group_len).enumerate() {
        let m = chunk.iter().map(|&v| v as f64).sum::<f64>() / group_len as f64;
        let var = chunk
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / group_len as f64;
        let r = 1.0 / (var + GROUP_NORM_EPS as f64).sqrt();
        mean[gi] = m;
        rstd[gi] = r;
        let g0 = (gi % groups) * cg;
        for (j, &v) in chunk.iter().enumerate() {
            let ch = g0 + j / inner;
            out[gi * group_len + j] = ((v as f64 - m) * r) as f32 * gv.data()[ch] + bv.data()[ch];
        }
    }
    let out = Tensor::new(&xs, out)?;
    Ok(x.tape().push(out, &[x, gamma, beta], move |ctx| {
        let grad = ctx.grad.data();
        let xd = ctx.inputs[0].data();
        let gd = ctx.inputs[1].data();
        let mut gx = ctx.needs[0].then(|| vec![0f32; xd.len()]);
        let mut ggamma = vec![0f64; c];
        let mut gbeta = vec![0f64; c];
        let mut buf = vec![0f64; group_len];
        for gi in 0..n * groups {
            let base = gi * group_len;
            let g0 = (gi % groups) * cg;
            let (m, r) = (mean[gi], rstd[gi]);
            let mut sum_dxhat = 0f64;
            let mut sum_dxhat_xhat = 0f64;
            for j in 0..group_len {
                let ch = g0 + j / inner;
                let xhat = (xd[base + j] as f64 - m) * r;
                let dy = grad[base + j] as f64;
                ggamma[ch] += dy * xhat;
                gbeta[ch] += dy;
                let dxhat = dy * gd[ch] as f64;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            if let Some(gx) = gx.as_mut() {
                let mean_d = sum_dxhat / group_len as f64;
                let mean_dx = sum_dxhat_xhat / group_len as f64;
                for (j, b) in buf.iter_mut().enumerate() {
                    let ch = g0 + j / inner;
                    let xhat = (xd[base + j] as f64 - m) * r;
                    let dxhat = grad[base + j] as f64 * gd[ch] as f64;
                    *b = r * (dxhat - mean_d - xhat * mean_dx);
                }
                zero_sum_f32(&mut buf, &mut gx[base..base + group_len]);
            }
        }
        let to_t = |v: Vec<f64>| Tensor::new(&[c], v.into_iter().map(|x| x as f32).collect()).unwrap();
        vec![
            gx.map(|g| Tensor::new(ctx.inputs[0].shape(), g).unwrap()),
            ctx.needs[1].then(|| to_t(ggamma)),
            ctx.needs[2].then(|| to_t(gbeta)),
        ]
    }))
}

/// Round `src` into `dst` keeping the f64 sum of `dst` at zero. The output
/// does not change when a whole group shifts, so the input gradient sums to
/// zero exactly; plain rounding would leave ~ulp residue that reappears as
/// spurious gradient on every per-channel offset feeding the norm.
fn zero_sum_f32(src: &mut [f64], dst: &mut [f32]) {
    let mean = src.iter().sum::<f64>() / src.len() as f64;
    src.iter_mut().for_each(|v| *v -= mean);
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *s as f32;
    }
    // park the rounding residue on the smallest entry, where it rounds finest
    let residue: f64 = dst.iter().map(|&v| v as f64).sum();
    if let Some(k) = (0..dst.len()).min_by(|&a, &b| dst[a].abs().total_cmp(&dst[b].abs())) {
        dst[k] = (dst[k] as f64 - residue) as f32;
    }
}
