//! Linear-β noise schedule, forward diffusion, and the DDPM / DDIM updates.
//!
//! Tables are kept in f64; tensors are updated element-wise in f64 and
//! rounded once to f32.

use lesion_tensor::Tensor;

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit betas, `betas[0]` being β₁.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return contract("noise schedule needs T ≥ 1");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return contract(format!("beta {b} outside (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return contract(format!("timestep {t} outside [1, {}]", self.steps()));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check_t(t)?])
    }

    /// ᾱ_t, with ᾱ₀ ≡ 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check_t(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// β linearly interpolated from `beta_start` to `beta_end`, both inclusive.
pub fn linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return contract("noise schedule needs T ≥ 1");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return contract(format!(
            "need 0 < beta_start ≤ beta_end < 1, got ({beta_start}, {beta_end})"
        ));
    }
    let betas = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return contract(format!(
            "{op}: shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// `√ᾱ·z0 + √(1−ᾱ)·eps` for an explicit ᾱ ∈ [0, 1].
pub fn diffuse_with(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    same_shape("forward_diffuse", z0, eps)?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return contract(format!("alpha_bar {alpha_bar} outside [0, 1]"));
    }
    Ok(combine(z0, alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt()))
}

pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    diffuse_with(z0, eps, s.alpha_bar(t)?)
}

/// Ancestral update z_t → z_{t−1}. `noise` is ignored at t = 1.
pub fn ddpm_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    same_shape("ddpm_step", z_t, eps_hat)?;
    same_shape("ddpm_step", z_t, noise)?;
    let (beta, alpha, ab) = (s.beta(t)?, s.alpha(t)?, s.alpha_bar(t)?);
    let ab_prev = s.alpha_bar(t - 1)?;
    let c_eps = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = if t == 1 {
        0.0
    } else {
        (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
    };
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&z, &e), &n)| (inv * (z as f64 - c_eps * e as f64) + sigma * n as f64) as f32)
        .collect();
    Ok(Tensor::new(z_t.shape(), data)?)
}

/// Predicted clean latent `(z_t − √(1−ᾱ)·eps_hat)/√ᾱ`.
pub fn predict_z0(z_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    same_shape("predict_z0", z_t, eps_hat)?;
    let r = alpha_bar.sqrt();
    Ok(combine(z_t, 1.0 / r, eps_hat, -(1.0 - alpha_bar).sqrt() / r))
}

/// Deterministic (η = 0) jump between explicit ᾱ values.
pub fn ddim_jump(z_t: &Tensor, eps_hat: &Tensor, ab_t: f64, ab_prev: f64) -> Result<Tensor> {
    if !(ab_t > 0.0 && ab_t <= 1.0 && (0.0..=1.0).contains(&ab_prev)) {
        return contract(format!("invalid alpha_bar pair ({ab_t}, {ab_prev})"));
    }
    let z0 = predict_z0(z_t, eps_hat, ab_t)?;
    Ok(combine(&z0, ab_prev.sqrt(), eps_hat, (1.0 - ab_prev).sqrt()))
}

pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return contract(format!("ddim_step needs t_prev < t, got {t_prev} ≥ {t}"));
    }
    ddim_jump(z_t, eps_hat, s.alpha_bar(t)?, s.alpha_bar(t_prev)?)
}

/// Evenly spaced sampler timesteps `T = t_0 > t_1 > … > t_S = 0`, where
/// `t_k = round(T·(S−k)/S)`. Consecutive pairs are the (t, t_prev) jumps.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return contract(format!("sampler steps must be in [1, {t_max}], got {steps}"));
    }
    Ok((0..=steps)
        .map(|k| ((t_max * (steps - k)) as f64 / steps as f64).round() as usize)
        .collect())
}
