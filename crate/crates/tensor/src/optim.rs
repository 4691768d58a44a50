//! AdamW with decoupled weight decay, and a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros_like(t: &Tensor) -> Self {
        Self {
            m: Tensor::zeros(t.shape()),
            v: Tensor::zeros(t.shape()),
        }
    }
}

/// Optimizer state: per-parameter moments and the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

/// One AdamW update of a single parameter. `step` is the 1-based index of
/// this update, used for bias correction.
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    moments: &mut Moments,
    step: u64,
    lr: f32,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.shape() != grad.shape()
        || moments.m.shape() != param.shape()
        || moments.v.shape() != param.shape()
    {
        return shape_err(
            "adamw_step",
            format!(
                "param {:?}, grad {:?}, moments {:?}/{:?}",
                param.shape(),
                grad.shape(),
                moments.m.shape(),
                moments.v.shape()
            ),
        );
    }
    if lr < 0.0 || step == 0 {
        return Err(Error::Contract(format!(
            "adamw_step needs lr ≥ 0 and step ≥ 1 (lr={lr}, step={step})"
        )));
    }
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(moments.m.data_mut())
        .zip(moments.v.data_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m as f64 / bc1;
        let v_hat = *v as f64 / bc2;
        *p *= decay;
        *p -= (lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    /// Apply one update to every parameter that received a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
        lr: f32,
    ) -> Result<()> {
        self.state.step += 1;
        let step = self.state.step;
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            let moments = self
                .state
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments::zeros_like(param));
            adamw_step(param, grad, moments, step, lr, &self.config)?;
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    lr_max: f64,
    warmup_steps: u64,
    total_steps: u64,
}

impl LrSchedule {
    pub fn new(lr_max: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(lr_max > 0.0 && lr_max.is_finite()) {
            return Err(Error::Contract(format!("lr_max must be positive, got {lr_max}")));
        }
        if total_steps <= warmup_steps {
            return Err(Error::Contract(format!(
                "total_steps ({total_steps}) must exceed warmup_steps ({warmup_steps})"
            )));
        }
        Ok(Self {
            lr_max,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_max(&self) -> f64 {
        self.lr_max
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} outside schedule range [0, {}]",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.lr_max * step as f64 / self.warmup_steps as f64);
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok((self.lr_max * 0.5 * (1.0 + (PI * progress).cos())).max(0.0))
    }
}
