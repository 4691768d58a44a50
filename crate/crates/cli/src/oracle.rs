//! Hidden `oracle` subcommand: regenerate or drift-check the golden files,
//! then compare the fast implementations against them.

use std::path::Path;

use lesion_core::inpaint::MaskSpec;
use lesion_core::metrics::{self, GaussianStats};
use lesion_core::schedule::{self, linear_schedule};
use lesion_oracle::{Expected, GoldenCase};
use lesion_tensor::{load_tensor, ops, Tape, Tensor};
use nalgebra::{DMatrix, DVector};

use crate::commands::CliError;

fn oracle_err(e: lesion_oracle::OracleError) -> CliError {
    CliError {
        code: 3,
        message: e.to_string(),
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn scalar_tensor(v: f32) -> Tensor {
    Tensor::new(&[1], vec![v]).expect("one element")
}

/// Values produced by the fast code path for one case.
fn fast_values(dir: &Path, case: &GoldenCase) -> Result<Vec<f64>, String> {
    let input = |i: usize| load_tensor(dir.join(&case.inputs[i])).map_err(err);
    match case.name.as_str() {
        "schedule_t2_alpha_bars" => {
            let b = input(0)?;
            let s = schedule::NoiseSchedule::from_betas(b.data().iter().map(|&v| v as f64).collect())
                .map_err(err)?;
            Ok(vec![s.alpha_bar(1).map_err(err)?, s.alpha_bar(2).map_err(err)?])
        }
        "schedule_t1000_final_alpha_bar" => {
            let s = linear_schedule(1000, 1e-4, 0.02).map_err(err)?;
            Ok(vec![s.alpha_bar(1000).map_err(err)?])
        }
        "ddpm_scalar_t2" | "ddim_scalar_t2" => {
            let s = linear_schedule(2, 0.1, 0.2).map_err(err)?;
            let (z, eps) = (scalar_tensor(0.7), scalar_tensor(-0.3));
            let out = if case.name.starts_with("ddpm") {
                let noise = scalar_tensor(0.5);
                vec![
                    schedule::ddpm_step(&z, &eps, 2, &s, &noise).map_err(err)?,
                    schedule::ddpm_step(&z, &eps, 1, &s, &noise).map_err(err)?,
                ]
            } else {
                vec![
                    schedule::ddim_step(&z, &eps, 2, 1, &s).map_err(err)?,
                    schedule::ddim_step(&z, &eps, 2, 0, &s).map_err(err)?,
                ]
            };
            Ok(out.iter().map(|t| t.data()[0] as f64).collect())
        }
        "kid_random_50x8" => Ok(vec![metrics::kid(&input(0)?, &input(1)?).map_err(err)?.raw]),
        "dilation_rect_d5" => {
            let spec = MaskSpec::from_inner(input(0)?, 5).map_err(err)?;
            Ok(spec.mask.data().iter().map(|&v| v as f64).collect())
        }
        "psd_sqrt_trace_d8" => {
            let a = input(0)?;
            let m = DMatrix::from_row_iterator(8, 8, a.data().iter().map(|&v| v as f64));
            Ok(vec![metrics::psd_sqrt(&m).map_err(err)?.trace()])
        }
        "silu_derivative" => {
            let x = input(0)?;
            let tape = Tape::new();
            let v = tape.param(x);
            let y = ops::sum_all(ops::silu(v));
            let g = tape.backward(y).map_err(err)?;
            Ok(g.get(v).ok_or("no gradient")?.data().iter().map(|&v| v as f64).collect())
        }
        "fid_1d_closed_forms" => {
            let g = |m: f64, v: f64| GaussianStats {
                mu: DVector::from_vec(vec![m]),
                sigma: DMatrix::from_vec(1, 1, vec![v]),
                n: 2,
            };
            Ok(vec![
                metrics::fid(&g(0.0, 1.0), &g(1.0, 1.0)).map_err(err)?,
                metrics::fid(&g(0.0, 1.0), &g(0.0, 4.0)).map_err(err)?,
            ])
        }
        "kernel_hand_value" => Ok(vec![metrics::poly_kernel(&[1.0, 0.0], &[1.0, 0.0])]),
        other => Err(format!("no fast path registered for `{other}`")),
    }
}

fn expected_values(dir: &Path, case: &GoldenCase) -> Result<Vec<f64>, String> {
    match &case.expected {
        Expected::Scalars(v) => Ok(v.clone()),
        Expected::File(f) => Ok(lesion_oracle::load_file(dir, f)
            .map_err(err)?
            .data
            .iter()
            .map(|&v| v as f64)
            .collect()),
    }
}

/// Fast-path mismatch for one case, if any.
pub fn fast_check(dir: &Path, case: &GoldenCase) -> Option<String> {
    let result = fast_values(dir, case).and_then(|got| Ok((expected_values(dir, case)?, got)));
    match result {
        Err(e) => Some(e),
        Ok((want, got)) if want.len() != got.len() => {
            Some(format!("{} expected values, fast path gave {}", want.len(), got.len()))
        }
        Ok((want, got)) => want
            .iter()
            .zip(&got)
            .enumerate()
            .find(|(_, (w, g))| !case.tolerance.accepts(**w, **g))
            .map(|(i, (w, g))| format!("value {i}: golden {w:?}, fast path {g:?} ({})", case.tolerance)),
    }
}

pub fn run(dir: &Path, write: bool) -> Result<(), CliError> {
    if write {
        lesion_oracle::write(dir).map_err(oracle_err)?;
        println!("wrote goldens to {}", dir.display());
    }
    let mut failures = Vec::new();
    for o in lesion_oracle::check(dir).map_err(oracle_err)? {
        match &o.drift {
            None => println!("ok     oracle  {}", o.name),
            Some(d) => {
                println!("DRIFT  oracle  {}: {d}", o.name);
                failures.push(o.name.clone());
            }
        }
    }
    for case in lesion_oracle::load_manifest(dir).map_err(oracle_err)? {
        match fast_check(dir, &case) {
            None => println!("ok     fast    {}", case.name),
            Some(d) => {
                println!("FAIL   fast    {}: {d}", case.name);
                failures.push(case.name.clone());
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            code: 1,
            message: format!("golden cases failing: {}", failures.join(", ")),
        })
    }
}
