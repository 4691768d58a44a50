//! Named building blocks shared by the VAE, the denoiser and the segmenter.
//!
//! Each block has an `init_*` function that inserts its parameters into a
//! [`ParamStore`] under a name prefix, and a forward function that reads them
//! back from a [`Bound`] store.

use lesion_tensor::ops::{self, AttentionProjections};
use lesion_tensor::{init_uniform, Bound, ParamStore, Result, Tensor, Var};
use rand::Rng;

pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f32,
    rng: &mut R,
) {
    store.insert(
        format!("{name}.weight"),
        init_uniform(&[cout, cin, k, k], cin * k * k, gain, rng),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

pub fn conv<'t>(p: &Bound<'t>, name: &str, x: Var<'t>, stride: usize) -> Result<Var<'t>> {
    let w = p.get(&format!("{name}.weight"))?;
    let pad = w.shape()[2] / 2;
    ops::conv2d(x, w, Some(p.get(&format!("{name}.bias"))?), stride, pad)
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    gain: f32,
    rng: &mut R,
) {
    store.insert(format!("{name}.weight"), init_uniform(&[dout, din], din, gain, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]));
}

pub fn linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    ops::linear(
        x,
        p.get(&format!("{name}.weight"))?,
        Some(p.get(&format!("{name}.bias"))?),
    )
}

pub fn init_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), Tensor::ones(&[c]));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
}

pub fn norm<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let c = x.shape()[1];
    ops::group_norm(
        x,
        ops::default_groups(c),
        p.get(&format!("{name}.gamma"))?,
        p.get(&format!("{name}.beta"))?,
    )
}

/// Group norm, silu, conv.
pub fn init_head<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    gain: f32,
    rng: &mut R,
) {
    init_norm(store, &format!("{name}.norm"), cin);
    init_conv(store, &format!("{name}.conv"), cin, cout, 3, gain, rng);
}

pub fn head<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let h = ops::silu(norm(p, &format!("{name}.norm"), x)?);
    conv(p, &format!("{name}.conv"), h, 1)
}

/// Residual block: `skip(x) + conv(silu(gn(conv(silu(gn(x))) + temb))))`.
/// The time projection exists only when `temb_dim` is given; the skip is a
/// 1×1 conv when the channel count changes.
pub fn init_res<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    temb_dim: Option<usize>,
    rng: &mut R,
) {
    init_head(store, &format!("{name}.in"), cin, cout, 1.0, rng);
    if let Some(d) = temb_dim {
        init_linear(store, &format!("{name}.temb"), d, cout, 1.0, rng);
    }
    init_head(store, &format!("{name}.out"), cout, cout, 0.5, rng);
    if cin != cout {
        init_conv(store, &format!("{name}.skip"), cin, cout, 1, 1.0, rng);
    }
}

pub fn res<'t>(p: &Bound<'t>, name: &str, x: Var<'t>, temb: Option<Var<'t>>) -> Result<Var<'t>> {
    let mut h = head(p, &format!("{name}.in"), x)?;
    if let Some(e) = temb {
        let offset = linear(p, &format!("{name}.temb"), e)?;
        h = ops::add_per_channel(h, offset)?;
    }
    let h = head(p, &format!("{name}.out"), h)?;
    let skip_name = format!("{name}.skip");
    let skip = if p.get(&format!("{skip_name}.weight")).is_ok() {
        conv(p, &skip_name, x, 1)?
    } else {
        x
    };
    ops::add(skip, h)
}

pub fn attention_heads(c: usize) -> usize {
    (c / 32).max(1)
}

/// Spatial self-attention with a residual connection; every parameter name
/// contains `.attn.`.
pub fn init_attn<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) {
    let name = format!("{prefix}.attn");
    init_norm(store, &format!("{name}.norm"), c);
    for (w, b) in [("wq", Some("bq")), ("wk", None), ("wv", Some("bv")), ("wo", Some("bo"))] {
        store.insert(format!("{name}.{w}"), init_uniform(&[c, c], c, 1.0, rng));
        if let Some(b) = b {
            store.insert(format!("{name}.{b}"), Tensor::zeros(&[c]));
        }
    }
}

pub fn attn<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let name = format!("{prefix}.attn");
    let shape = x.shape();
    let (n, c, l) = (shape[0], shape[1], shape[2] * shape[3]);
    let h = norm(p, &format!("{name}.norm"), x)?;
    let tokens = ops::permute(ops::reshape(h, &[n, c, l])?, &[0, 2, 1])?;
    let g = |s: &str| p.get(&format!("{name}.{s}"));
    let proj = AttentionProjections {
        wq: g("wq")?,
        bq: g("bq")?,
        wk: g("wk")?,
        wv: g("wv")?,
        bv: g("bv")?,
        wo: g("wo")?,
        bo: g("bo")?,
    };
    let (out, _) = ops::attention_self(tokens, &proj, attention_heads(c))?;
    let back = ops::reshape(ops::permute(out, &[0, 2, 1])?, &shape)?;
    ops::add(x, back)
}

/// Upsample by nearest ×2, then a 3×3 conv.
pub fn up<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    conv(p, name, ops::upsample_nearest2x(x)?, 1)
}
