use crate::error::{shape_err, Result};
use crate::ops::{add_scalar, div, mean_all, mul, scale, square, sub, sum_all};
use crate::ops::elementwise::sigmoid_f;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Mean squared error over all elements.
pub fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(mean_all(square(sub(a, b)?)))
}

/// Mean squared error restricted to cells where `weights` is non-zero:
/// `Σ w·(a−b)² / Σ w`. Returns `None` when the weights sum to zero.
pub fn masked_mse<'t>(a: Var<'t>, b: Var<'t>, weights: &Tensor) -> Result<Option<Var<'t>>> {
    if a.shape() != weights.shape() {
        return shape_err(
            "masked_mse",
            format!("weights {:?} vs operands {:?}", weights.shape(), a.shape()),
        );
    }
    let total = weights.sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let w = a.tape().constant(weights.clone());
    let sq = square(sub(a, b)?);
    Ok(Some(scale(sum_all(mul(sq, w)?), (1.0 / total) as f32)))
}

/// Mean binary cross-entropy between `sigmoid(logits)` and `targets` ∈ [0, 1].
pub fn bce_with_logits<'t>(logits: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    let lv = logits.value();
    if lv.shape() != targets.shape() {
        return shape_err(
            "bce_with_logits",
            format!("logits {:?} vs targets {:?}", lv.shape(), targets.shape()),
        );
    }
    let n = lv.numel().max(1);
    let total: f64 = lv
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| {
            // max(x,0) - x t + log(1 + e^{-|x|})
            (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()) as f64
        })
        .sum();
    let targets = targets.clone();
    Ok(logits.tape().push(
        Tensor::scalar((total / n as f64) as f32),
        &[logits],
        move |ctx| {
            let g = ctx.grad.item() / n as f32;
            let data = ctx.inputs[0]
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&x, &t)| g * (sigmoid_f(x) - t))
                .collect();
            vec![Some(Tensor::new(ctx.inputs[0].shape(), data).unwrap())]
        },
    ))
}

/// `1 − (2·Σ p·t + 1) / (Σ p + Σ t + 1)` over all elements.
pub fn soft_dice_loss<'t>(probs: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    if probs.shape() != targets.shape() {
        return shape_err(
            "soft_dice_loss",
            format!("probabilities {:?} vs targets {:?}", probs.shape(), targets.shape()),
        );
    }
    let tape = probs.tape();
    let t = tape.constant(targets.clone());
    let inter = sum_all(mul(probs, t)?);
    let numer = add_scalar(scale(inter, 2.0), 1.0);
    let denom = add_scalar(sum_all(probs), targets.sum() as f32 + 1.0);
    Ok(add_scalar(scale(div(numer, denom)?, -1.0), 1.0))
}
