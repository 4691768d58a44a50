use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return shape_err(op, format!("operand shapes differ: {sa:?} vs {sb:?}"));
    }
    Ok(())
}

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f32) -> f32,
    df: impl Fn(f32, f32) -> f32 + 'static,
) -> Var<'t> {
    let out = x.value().map(f);
    x.tape().push(out, &[x], move |ctx| {
        let data: Vec<f32> = ctx
            .grad
            .data()
            .iter()
            .zip(ctx.inputs[0].data())
            .zip(ctx.output.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::new(ctx.grad.shape(), data).expect("shape"))]
    })
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape("add", &a, &b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x + y)?;
    Ok(a.tape().push(out, &[a, b], |ctx| {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }))
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape("sub", &a, &b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x - y)?;
    Ok(a.tape().push(out, &[a, b], |ctx| {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
    }))
}

pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape("mul", &a, &b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x * y)?;
    Ok(a.tape().push(out, &[a, b], |ctx| {
        let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y).unwrap());
        let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x).unwrap());
        vec![ga, gb]
    }))
}

pub fn div<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape("div", &a, &b)?;
    let out = a.value().zip_map(&b.value(), |x, y| x / y)?;
    Ok(a.tape().push(out, &[a, b], |ctx| {
        let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g / y).unwrap());
        let gb = ctx.needs[1].then(|| {
            let q = ctx.output.zip_map(ctx.inputs[1], |o, y| o / y).unwrap();
            ctx.grad.zip_map(&q, |g, q| -g * q).unwrap()
        });
        vec![ga, gb]
    }))
}

pub fn scale(x: Var<'_>, s: f32) -> Var<'_> {
    let out = x.value().map(|v| v * s);
    x.tape()
        .push(out, &[x], move |ctx| vec![Some(ctx.grad.map(|g| g * s))])
}

pub fn add_scalar(x: Var<'_>, s: f32) -> Var<'_> {
    let out = x.value().map(|v| v + s);
    x.tape()
        .push(out, &[x], |ctx| vec![Some(ctx.grad.clone())])
}

pub fn square(x: Var<'_>) -> Var<'_> {
    unary(x, |v| v * v, |x, _| 2.0 * x)
}

pub fn exp(x: Var<'_>) -> Var<'_> {
    unary(x, f32::exp, |_, y| y)
}

pub(crate) fn sigmoid_f(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: Var<'_>) -> Var<'_> {
    unary(x, sigmoid_f, |_, y| y * (1.0 - y))
}

pub fn silu(x: Var<'_>) -> Var<'_> {
    unary(
        x,
        |v| v * sigmoid_f(v),
        |x, _| {
            let s = sigmoid_f(x);
            s * (1.0 + x * (1.0 - s))
        },
    )
}

/// Sum of all elements, accumulated in f64.
pub fn sum_all(x: Var<'_>) -> Var<'_> {
    let v = x.value().sum() as f32;
    x.tape().push(Tensor::scalar(v), &[x], |ctx| {
        let g = ctx.grad.item();
        vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
    })
}

pub fn mean_all(x: Var<'_>) -> Var<'_> {
    let n = x.value().numel().max(1);
    let v = (x.value().sum() / n as f64) as f32;
    x.tape().push(Tensor::scalar(v), &[x], move |ctx| {
        let g = ctx.grad.item() / n as f32;
        vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
    })
}

/// Split `shape` (rank ≥ 2) into `(n, c, inner)`.
fn nc_inner(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(op, format!("expected [N, C, ...], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// `x[N,C,...] + e[N,C]`, broadcasting `e` over the trailing axes.
pub fn add_per_channel<'t>(x: Var<'t>, e: Var<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let (n, c, inner) = nc_inner("add_per_channel", &xs)?;
    if e.shape() != [n, c] {
        return shape_err(
            "add_per_channel",
            format!("offset shape {:?} does not match [N, C] = [{n}, {c}]", e.shape()),
        );
    }
    let mut out = (*x.value()).clone();
    out.set_requires_grad(false);
    {
        let ev = e.value();
        let ed = ev.data();
        for (nc, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let o = ed[nc];
            chunk.iter_mut().for_each(|v| *v += o);
        }
    }
    Ok(x.tape().push(out, &[x, e], move |ctx| {
        let ge = ctx.needs[1].then(|| {
            let data = ctx
                .grad
                .data()
                .chunks(inner)
                .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32)
                .collect();
            Tensor::new(&[n, c], data).unwrap()
        });
        vec![Some(ctx.grad.clone()), ge]
    }))
}

/// `x[N,C,...] + b[C]`.
pub fn add_channel_bias<'t>(x: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let (_, c, inner) = nc_inner("add_channel_bias", &xs)?;
    if b.shape() != [c] {
        return shape_err(
            "add_channel_bias",
            format!("bias shape {:?} does not match channel count {c}", b.shape()),
        );
    }
    let mut out = (*x.value()).clone();
    out.set_requires_grad(false);
    {
        let bv = b.value();
        let bd = bv.data();
        for (nc, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let o = bd[nc % c];
            chunk.iter_mut().for_each(|v| *v += o);
        }
    }
    Ok(x.tape().push(out, &[x, b], move |ctx| {
        let gb = ctx.needs[1].then(|| {
            let mut acc = vec![0f64; c];
            for (nc, ch) in ctx.grad.data().chunks(inner).enumerate() {
                acc[nc % c] += ch.iter().map(|&v| v as f64).sum::<f64>();
            }
            Tensor::new(&[c], acc.into_iter().map(|v| v as f32).collect()).unwrap()
        });
        vec![Some(ctx.grad.clone()), gb]
    }))
}

/// Broadcast `v[C]` to `[n, C, spatial...]`.
pub fn broadcast_channels<'t>(v: Var<'t>, n: usize, spatial: &[usize]) -> Result<Var<'t>> {
    let vs = v.shape();
    if vs.len() != 1 {
        return shape_err("broadcast_channels", format!("expected [C], got {vs:?}"));
    }
    let c = vs[0];
    let inner: usize = spatial.iter().product();
    let mut shape = vec![n, c];
    shape.extend_from_slice(spatial);
    let vv = v.value();
    let out = Tensor::from_fn(&shape, |i| vv.data()[(i / inner) % c]);
    Ok(v.tape().push(out, &[v], move |ctx| {
        let mut acc = vec![0f64; c];
        for (nc, ch) in ctx.grad.data().chunks(inner).enumerate() {
            acc[nc % c] += ch.iter().map(|&v| v as f64).sum::<f64>();
        }
        vec![Some(
            Tensor::new(&[c], acc.into_iter().map(|v| v as f32).collect()).unwrap(),
        )]
    }))
}
