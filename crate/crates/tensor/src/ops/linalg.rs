use crate::error::{shape_err, Result};
use crate::gemm::{gemm, Mat};
use crate::tape::Var;
use crate::tensor::Tensor;

fn batch_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1])),
        n if n >= 3 => Ok((
            shape[..n - 2].iter().product(),
            shape[n - 2],
            shape[n - 1],
        )),
        _ => shape_err(op, format!("expected rank ≥ 2, got {shape:?}")),
    }
}

/// Batched matrix product over the two trailing axes. Leading axes must match.
pub fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    let (ba, m, k) = batch_dims("matmul", &sa)?;
    let (bb, k2, n) = batch_dims("matmul", &sb)?;
    if k != k2 || ba != bb || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
    }
    let (av, bv) = (a.value(), b.value());
    let mut out = vec![0f32; ba * m * n];
    for i in 0..ba {
        gemm(
            Mat::new(&av.data()[i * m * k..(i + 1) * m * k], m, k),
            Mat::new(&bv.data()[i * k * n..(i + 1) * k * n], k, n),
            &mut out[i * m * n..(i + 1) * m * n],
            0.0,
        );
    }
    let mut shape = sa[..sa.len() - 2].to_vec();
    shape.extend([m, n]);
    let out = Tensor::new(&shape, out)?;
    Ok(a.tape().push(out, &[a, b], move |ctx| {
        let g = ctx.grad.data();
        let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let ga = ctx.needs[0].then(|| {
            let mut ga = vec![0f32; ba * m * k];
            for i in 0..ba {
                gemm(
                    Mat::new(&g[i * m * n..(i + 1) * m * n], m, n),
                    Mat::new(&bd[i * k * n..(i + 1) * k * n], k, n).t(),
                    &mut ga[i * m * k..(i + 1) * m * k],
                    0.0,
                );
            }
            Tensor::new(ctx.inputs[0].shape(), ga).unwrap()
        });
        let gb = ctx.needs[1].then(|| {
            let mut gb = vec![0f32; ba * k * n];
            for i in 0..ba {
                gemm(
                    Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k).t(),
                    Mat::new(&g[i * m * n..(i + 1) * m * n], m, n),
                    &mut gb[i * k * n..(i + 1) * k * n],
                    0.0,
                );
            }
            Tensor::new(ctx.inputs[1].shape(), gb).unwrap()
        });
        vec![ga, gb]
    }))
}

/// Affine map over the last axis: `x · weightᵀ + bias`, weight `[out, in]`.
pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = weight.shape();
    let Some(&d_in) = xs.last() else {
        return shape_err("linear", "input must have rank ≥ 1");
    };
    let [d_out, w_in] = ws[..] else {
        return shape_err("linear", format!("weight must be [out, in], got {ws:?}"));
    };
    if w_in != d_in {
        return shape_err(
            "linear",
            format!("input feature dimension {d_in} does not match weight input {w_in}"),
        );
    }
    if let Some(b) = &bias {
        if b.shape() != [d_out] {
            return shape_err("linear", format!("bias must be [{d_out}], got {:?}", b.shape()));
        }
    }
    let rows = x.value().numel() / d_in.max(1);
    let (xv, wv) = (x.value(), weight.value());
    let mut out = vec![0f32; rows * d_out];
    gemm(
        Mat::new(xv.data(), rows, d_in),
        Mat::new(wv.data(), d_out, d_in).t(),
        &mut out,
        0.0,
    );
    if let Some(b) = &bias {
        let bv = b.value();
        for row in out.chunks_mut(d_out) {
            row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
        }
    }
    let mut shape = xs.clone();
    *shape.last_mut().unwrap() = d_out;
    let out = Tensor::new(&shape, out)?;
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(x.tape().push(out, &parents, move |ctx| {
        let g = ctx.grad.data();
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![0f32; rows * d_in];
            gemm(
                Mat::new(g, rows, d_out),
                Mat::new(ctx.inputs[1].data(), d_out, d_in),
                &mut gx,
                0.0,
            );
            Tensor::new(ctx.inputs[0].shape(), gx).unwrap()
        });
        let gw = ctx.needs[1].then(|| {
            let mut gw = vec![0f32; d_out * d_in];
            gemm(
                Mat::new(g, rows, d_out).t(),
                Mat::new(ctx.inputs[0].data(), rows, d_in),
                &mut gw,
                0.0,
            );
            Tensor::new(&[d_out, d_in], gw).unwrap()
        });
        let mut result = vec![gx, gw];
        if has_bias {
            result.push(ctx.needs[2].then(|| {
                let mut acc = vec![0f64; d_out];
                for row in g.chunks(d_out) {
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
                }
                Tensor::new(&[d_out], acc.into_iter().map(|v| v as f32).collect()).unwrap()
            }));
        }
        result
    }))
}

/// Softmax over the last axis.
pub fn softmax_last(x: Var<'_>) -> Result<Var<'_>> {
    let xs = x.shape();
    let Some(&d) = xs.last() else {
        return shape_err("softmax", "input must have rank ≥ 1");
    };
    let xv = x.value();
    let mut out = vec![0f32; xv.numel()];
    for (src, dst) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0f64;
        for (o, &v) in dst.iter_mut().zip(src) {
            let e = (v - max).exp();
            *o = e;
            total += e as f64;
        }
        let inv = (1.0 / total) as f32;
        dst.iter_mut().for_each(|o| *o *= inv);
    }
    let out = Tensor::new(&xs, out)?;
    Ok(x.tape().push(out, &[x], move |ctx| {
        let mut gx = vec![0f32; ctx.output.numel()];
        for ((y, g), dst) in ctx
            .output
            .data()
            .chunks(d)
            .zip(ctx.grad.data().chunks(d))
            .zip(gx.chunks_mut(d))
        {
            let dot: f64 = y.iter().zip(g).map(|(&y, &g)| (y * g) as f64).sum();
            for ((o, &y), &g) in dst.iter_mut().zip(y).zip(g) {
                *o = y * (g - dot as f32);
            }
        }
        vec![Some(Tensor::new(ctx.output.shape(), gx).unwrap())]
    }))
}
