use crate::error::{shape_err, Result};
use crate::ops::{linear, matmul, permute, reshape, scale, softmax_last};
use crate::tape::Var;

/// Query/key/value/output projections of one self-attention layer.
/// Weights are `[D, D]`, biases `[D]`. Keys carry no bias: it would shift every
/// logit of a row by the same amount and cancel in the softmax.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

/// Multi-head self-attention over `x[N, L, D]`.
///
/// Returns the projected output `[N, L, D]` and the attention weights
/// `[N, heads, L, L]` (rows sum to one).
pub fn attention_self<'t>(
    x: Var<'t>,
    proj: &AttentionProjections<'t>,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let xs = x.shape();
    let [n, l, d] = xs[..] else {
        return shape_err("attention_self", format!("expected [N, L, D], got {xs:?}"));
    };
    if heads == 0 || d % heads != 0 {
        return shape_err(
            "attention_self",
            format!("model dimension {d} not divisible by {heads} heads"),
        );
    }
    let dh = d / heads;
    let split_heads = |t: Var<'t>| -> Result<Var<'t>> {
        permute(reshape(t, &[n, l, heads, dh])?, &[0, 2, 1, 3])
    };
    let q = split_heads(linear(x, proj.wq, Some(proj.bq))?)?;
    let k = linear(x, proj.wk, None)?;
    let kt = permute(reshape(k, &[n, l, heads, dh])?, &[0, 2, 3, 1])?;
    let v = split_heads(linear(x, proj.wv, Some(proj.bv))?)?;
    let logits = scale(matmul(q, kt)?, 1.0 / (dh as f32).sqrt());
    let weights = softmax_last(logits)?;
    let mixed = matmul(weights, v)?;
    let merged = reshape(permute(mixed, &[0, 2, 1, 3])?, &[n, l, d])?;
    let out = linear(merged, proj.wo, Some(proj.bo))?;
    Ok((out, weights))
}
