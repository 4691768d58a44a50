use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

pub fn reshape<'t>(x: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    let out = (*x.value()).clone().reshape(shape)?;
    Ok(x.tape().push(out, &[x], |ctx| {
        vec![Some(
            ctx.grad.clone().reshape(ctx.inputs[0].shape()).unwrap(),
        )]
    }))
}

/// Concatenate along `axis`; operands must agree on every other axis.
pub fn concat<'t>(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = xs.first() else {
        return shape_err("concat", "no operands");
    };
    let values: Vec<_> = xs.iter().map(|x| x.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
    let out = Tensor::concat(&refs, axis)?;
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    Ok(first.tape().push(out, xs, move |ctx| {
        let mut start = 0;
        sizes
            .iter()
            .zip(&ctx.needs)
            .map(|(&len, &need)| {
                let g = need.then(|| ctx.grad.narrow(axis, start, len).unwrap());
                start += len;
                g
            })
            .collect()
    }))
}

pub fn narrow(x: Var<'_>, axis: usize, start: usize, len: usize) -> Result<Var<'_>> {
    let out = x.value().narrow(axis, start, len)?;
    Ok(x.tape().push(out, &[x], move |ctx| {
        let input = ctx.inputs[0];
        let outer: usize = input.shape()[..axis].iter().product();
        let inner: usize = input.shape()[axis + 1..].iter().product();
        let dim = input.shape()[axis];
        let mut g = Tensor::zeros(input.shape());
        let gd = g.data_mut();
        for o in 0..outer {
            let src = &ctx.grad.data()[o * len * inner..(o + 1) * len * inner];
            let base = (o * dim + start) * inner;
            gd[base..base + len * inner].copy_from_slice(src);
        }
        vec![Some(g)]
    }))
}

/// Split along `axis` into consecutive pieces of the given sizes.
pub fn split<'t>(x: Var<'t>, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
    let dim = x.shape().get(axis).copied().unwrap_or(0);
    if sizes.iter().sum::<usize>() != dim {
        return shape_err(
            "split",
            format!("sizes {sizes:?} do not add up to extent {dim} of axis {axis}"),
        );
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let piece = narrow(x, axis, start, len);
            start += len;
            piece
        })
        .collect()
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    let src = t.data();
    for _ in 0..t.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves element count")
}

/// Reorder axes: output axis `i` is input axis `perm[i]`.
pub fn permute<'t>(x: Var<'t>, perm: &[usize]) -> Result<Var<'t>> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return shape_err("permute", format!("{perm:?} is not a permutation of rank {rank}"));
    }
    let out = permute_tensor(&x.value(), perm);
    let mut inverse = vec![0; rank];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    Ok(x.tape().push(out, &[x], move |ctx| {
        vec![Some(permute_tensor(ctx.grad, &inverse))]
    }))
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(op, format!("expected [N, C, H, W], got {shape:?}")),
    }
}

/// Nearest-neighbour ×2 upsampling of `[N,C,H,W]`.
pub fn upsample_nearest2x(x: Var<'_>) -> Result<Var<'_>> {
    let (n, c, h, w) = nchw("upsample_nearest2x", &x.shape())?;
    let xv = x.value();
    let src = xv.data();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0f32; n * c * h2 * w2];
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
            }
        }
    }
    let out = Tensor::new(&[n, c, h2, w2], out)?;
    Ok(x.tape().push(out, &[x], move |ctx| {
        let g = ctx.grad.data();
        let mut gi = vec![0f32; n * c * h * w];
        for p in 0..n * c {
            let gs = &g[p * h2 * w2..(p + 1) * h2 * w2];
            let d = &mut gi[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                for xx in 0..w2 {
                    d[(y / 2) * w + xx / 2] += gs[y * w2 + xx];
                }
            }
        }
        vec![Some(Tensor::new(&[n, c, h, w], gi).unwrap())]
    }))
}

/// 2×2 average pooling with stride 2; H and W must be even.
pub fn avg_pool2x(x: Var<'_>) -> Result<Var<'_>> {
    let (n, c, h, w) = nchw("avg_pool2x", &x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err("avg_pool2x", format!("H={h}, W={w} must be even"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xv = x.value();
    let src = xv.data();
    let mut out = vec![0f32; n * c * ho * wo];
    for p in 0..n * c {
        let s = &src[p * h * w..];
        for y in 0..ho {
            for xx in 0..wo {
                let a = s[2 * y * w + 2 * xx]
                    + s[2 * y * w + 2 * xx + 1]
                    + s[(2 * y + 1) * w + 2 * xx]
                    + s[(2 * y + 1) * w + 2 * xx + 1];
                out[p * ho * wo + y * wo + xx] = 0.25 * a;
            }
        }
    }
    let out = Tensor::new(&[n, c, ho, wo], out)?;
    Ok(x.tape().push(out, &[x], move |ctx| {
        let g = ctx.grad.data();
        let mut gi = vec![0f32; n * c * h * w];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    gi[p * h * w + y * w + xx] = 0.25 * g[p * ho * wo + (y / 2) * wo + xx / 2];
                }
            }
        }
        vec![Some(Tensor::new(&[n, c, h, w], gi).unwrap())]
    }))
}

/// Nearest-neighbour resize of the two trailing axes. Not differentiable;
/// used for masks. Source index is `floor((i + 0.5) · src / dst)`.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() < 2 || out_h == 0 || out_w == 0 {
        return shape_err(
            "resize_nearest",
            format!("cannot resize {shape:?} to {out_h}x{out_w}"),
        );
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let lead: usize = shape[..shape.len() - 2].iter().product();
    let ys: Vec<usize> = (0..out_h)
        .map(|i| (((2 * i + 1) * h) / (2 * out_h)).min(h - 1))
        .collect();
    let xs: Vec<usize> = (0..out_w)
        .map(|j| (((2 * j + 1) * w) / (2 * out_w)).min(w - 1))
        .collect();
    let src = t.data();
    let mut out = Vec::with_capacity(lead * out_h * out_w);
    for l in 0..lead {
        for &y in &ys {
            for &x in &xs {
                out.push(src[l * h * w + y * w + x]);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = out_h;
    out_shape[r - 1] = out_w;
    Tensor::new(&out_shape, out)
}
