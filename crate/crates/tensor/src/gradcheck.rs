//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-6, |numeric|)` over checked elements.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Which elements of each input get probed.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many elements per input, chosen with a fixed seed.
    Sample { per_input: usize, seed: u64 },
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::no_grad();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item() as f64)
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor], weights: Option<&Tensor>) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let mut out = f(&tape, &vars)?;
    if !out.value().is_finite() {
        return Err(Error::Contract("grad_check: f is non-finite at the base point".into()));
    }
    if let Some(w) = weights {
        out = ops::sum_all(ops::mul(out, tape.constant(w.clone()))?);
    }
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

fn probe<E>(
    objective: E,
    analytic: &[Tensor],
    inputs: &[Tensor],
    h: f32,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    E: Fn(&[Tensor]) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let elements: Vec<usize> = match coverage {
            Coverage::Sample { per_input, seed } if per_input < input.numel() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32));
                let mut idx = sample(&mut rng, input.numel(), per_input).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..input.numel()).collect(),
        };
        for j in elements {
            let x0 = input.data()[j];
            let (xp, xm) = (x0 + h, x0 - h);
            probe[i].data_mut()[j] = xp;
            let fp = objective(&probe)?;
            probe[i].data_mut()[j] = xm;
            let fm = objective(&probe)?;
            probe[i].data_mut()[j] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Contract(format!(
                    "grad_check: f is non-finite when perturbing input {i}, element {j}"
                )));
            }
            // divide by the step actually taken after f32 rounding of x0 ± h
            let numeric = (fp - fm) / (xp as f64 - xm as f64);
            let a = analytic[i].data()[j] as f64;
            let rel = (a - numeric).abs() / numeric.abs().max(1e-6);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

/// Compare the tape gradient of scalar `f` against `(f(x+h) − f(x−h)) / 2h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f32, coverage: Coverage) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_grads(&f, inputs, None)?;
    probe(|xs| evaluate(&f, xs), &analytic, inputs, h, coverage)
}

/// [`grad_check`] on the scalar `Σ w·f(x)` for fixed weights `w` shaped like
/// the output of `f`.
///
/// The weighted sum is accumulated in f64 outside the tape, so outputs that a
/// perturbation does not touch cancel exactly between `f(x+h)` and `f(x−h)`.
pub fn grad_check_weighted<F>(
    f: F,
    inputs: &[Tensor],
    h: f32,
    coverage: Coverage,
    weights: &Tensor,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_grads(&f, inputs, Some(weights))?;
    let objective = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars)?.value();
        if y.shape() != weights.shape() {
            return Err(Error::Contract(format!(
                "grad_check: output shape {:?} does not match weights {:?}",
                y.shape(),
                weights.shape()
            )));
        }
        Ok(y.data()
            .iter()
            .zip(weights.data())
            .map(|(&y, &w)| y as f64 * w as f64)
            .sum())
    };
    probe(objective, &analytic, inputs, h, coverage)
}

/// [`grad_check_weighted`] with weights drawn from `U(0.5, 1.5)`. Positive
/// weights keep reductions such as bias gradients away from cancellation.
pub fn grad_check_projected<F>(
    f: F,
    inputs: &[Tensor],
    h: f32,
    coverage: Coverage,
    weight_seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let shape = {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.shape()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
    let weights = Tensor::rand_uniform(&shape, 0.5, 1.5, &mut rng);
    grad_check_weighted(f, inputs, h, coverage, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_hand_gradient() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = ops::sum_all(ops::square(v));
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
        let report = grad_check(
            |_, xs| Ok(ops::sum_all(ops::square(xs[0]))),
            &[x],
            1e-3,
            Coverage::All,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 4.0]).unwrap();
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let g = tape.backward(ops::sum_all(v)).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0, 1.0, 1.0]);
        let report = grad_check(|_, xs| Ok(ops::sum_all(xs[0])), &[x], 1e-3, Coverage::All).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn non_finite_function_reports_location() {
        let x = Tensor::new(&[2], vec![1.0, 88.0]).unwrap();
        let err = grad_check(
            |_, xs| Ok(ops::sum_all(ops::exp(ops::scale(xs[0], 1.01)))),
            &[x],
            1e-3,
            Coverage::All,
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }
}
