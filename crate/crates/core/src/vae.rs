//! Convolutional VAE giving the frozen latent space of the diffusion model.
//!
//! The encoder halves resolution `log2(factor)` times with stride-2 convs and
//! ends in a head producing `2c` channels (mean and log-variance). The decoder
//! mirrors it with nearest upsampling. Latents handed to the rest of the
//! system are the posterior mean times `latent_scale`.

use std::path::Path;

use lesion_tensor::ops;
use lesion_tensor::{Archive, Bound, ParamStore, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::nn;
use crate::seed;
use crate::train::{params_from, params_into, OptimConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub width: usize,
    pub latent_channels: usize,
    /// Downsample factor, a power of two.
    pub factor: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            width: 32,
            latent_channels: 4,
            factor: 4,
        }
    }
}

impl VaeConfig {
    fn levels(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }

    /// Channel width after `i` downsamplings.
    fn channels(&self, i: usize) -> usize {
        if i == 0 {
            self.width
        } else {
            self.width << (i - 1)
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return contract(format!("vae factor must be a power of two ≥ 2, got {}", self.factor));
        }
        if self.width < 8 || self.latent_channels == 0 {
            return contract("vae width must be ≥ 8 and latent channels ≥ 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VaeTrainConfig {
    pub optim: OptimConfig,
    pub beta_kl: f32,
    pub seed: u64,
    /// Batches used to calibrate `latent_scale` after training.
    pub calibrate_images: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                lr: 2e-3,
                warmup_steps: 50,
                total_steps: 800,
                weight_decay: 1e-4,
                batch: 16,
            },
            beta_kl: 1e-4,
            seed: 0,
            calibrate_images: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamStore,
    pub latent_scale: f32,
}

const BATCH: usize = 16;

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "vae.init", 0);
        let mut p = ParamStore::new();
        let k = config.levels();
        let c = config.latent_channels;
        nn::init_conv(&mut p, "vae.enc.conv_in", 3, config.width, 3, 1.0, &mut rng);
        for i in 0..k {
            let (a, b) = (config.channels(i), config.channels(i + 1));
            nn::init_conv(&mut p, &format!("vae.enc.down{i}"), a, b, 3, 1.0, &mut rng);
            nn::init_res(&mut p, &format!("vae.enc.res{i}"), b, b, None, &mut rng);
        }
        nn::init_head(&mut p, "vae.enc.out", config.channels(k), 2 * c, 0.5, &mut rng);
        nn::init_conv(&mut p, "vae.dec.conv_in", c, config.channels(k), 3, 1.0, &mut rng);
        for i in (0..k).rev() {
            let (a, b) = (config.channels(i + 1), config.channels(i));
            nn::init_res(&mut p, &format!("vae.dec.res{i}"), a, a, None, &mut rng);
            nn::init_conv(&mut p, &format!("vae.dec.up{i}"), a, b, 3, 1.0, &mut rng);
        }
        nn::init_head(&mut p, "vae.dec.out", config.width, 3, 0.5, &mut rng);
        Ok(Self {
            config,
            params: p,
            latent_scale: 1.0,
        })
    }

    fn check_image_shape(&self, shape: &[usize]) -> Result<()> {
        let f = self.config.factor;
        match shape {
            [3, h, w] | [_, 3, h, w] if h % f == 0 && w % f == 0 && *h > 0 && *w > 0 => Ok(()),
            [.., h, w] if shape.len() >= 3 => contract(format!(
                "vae encode: image {h}×{w} not divisible by factor {f}"
            )),
            _ => contract(format!("vae encode: expected [3, H, W], got {shape:?}")),
        }
    }

    /// Posterior mean and log-variance of `x[N,3,H,W]`, unscaled.
    pub fn moments<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mut h = nn::conv(p, "vae.enc.conv_in", x, 1)?;
        for i in 0..self.config.levels() {
            h = nn::conv(p, &format!("vae.enc.down{i}"), h, 2)?;
            h = nn::res(p, &format!("vae.enc.res{i}"), h, None)?;
        }
        let out = nn::head(p, "vae.enc.out", h)?;
        let c = self.config.latent_channels;
        let parts = ops::split(out, 1, &[c, c])?;
        Ok((parts[0], parts[1]))
    }

    /// Decoder output before clamping, from an unscaled latent `[N,c,h,w]`.
    pub fn decode_raw<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let mut h = nn::conv(p, "vae.dec.conv_in", z, 1)?;
        for i in (0..self.config.levels()).rev() {
            h = nn::res(p, &format!("vae.dec.res{i}"), h, None)?;
            h = nn::up(p, &format!("vae.dec.up{i}"), h)?;
        }
        Ok(nn::head(p, "vae.dec.out", h)?)
    }

    /// Scaled latents `[N,c,H/f,W/f]` of a batch `[N,3,H,W]`.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.check_image_shape(images.shape())?;
        if images.rank() != 4 {
            return contract("encode_batch expects [N, 3, H, W]");
        }
        let n = images.dim(0);
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(BATCH) {
            let len = BATCH.min(n - start);
            let tape = Tape::no_grad();
            let p = self.params.bind(&tape, |_| false);
            let x = tape.constant(images.narrow(0, start, len)?);
            let (mu, _) = self.moments(&p, x)?;
            out.push(mu.value().map(|v| v * self.latent_scale));
        }
        Ok(Tensor::concat(&out.iter().collect::<Vec<_>>(), 0)?)
    }

    /// Scaled posterior mean of one `[3,H,W]` image.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image_shape(image.shape())?;
        let s = image.shape();
        let z = self.encode_batch(&image.clone().reshape(&[1, s[0], s[1], s[2]])?)?;
        let zs = z.shape().to_vec();
        Ok(z.reshape(&zs[1..])?)
    }

    /// Images in `[0,1]` from scaled latents `[N,c,h,w]`.
    pub fn decode_batch(&self, latents: &Tensor) -> Result<Tensor> {
        let s = latents.shape();
        if s.len() != 4 || s[1] != self.config.latent_channels {
            return contract(format!(
                "vae decode: expected [N, {}, h, w], got {s:?}",
                self.config.latent_channels
            ));
        }
        let n = s[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(BATCH) {
            let len = BATCH.min(n - start);
            let tape = Tape::no_grad();
            let p = self.params.bind(&tape, |_| false);
            let z = latents.narrow(0, start, len)?.map(|v| v / self.latent_scale);
            let img = self.decode_raw(&p, tape.constant(z))?;
            out.push(img.value().map(|v| v.clamp(0.0, 1.0)));
        }
        Ok(Tensor::concat(&out.iter().collect::<Vec<_>>(), 0)?)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let s = latent.shape();
        if s.len() != 3 {
            return contract(format!("vae decode: expected [c, h, w], got {s:?}"));
        }
        let img = self.decode_batch(&latent.clone().reshape(&[1, s[0], s[1], s[2]])?)?;
        let is = img.shape().to_vec();
        Ok(img.reshape(&is[1..])?)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        params_into(&self.params, &mut a);
        let c = &self.config;
        a.insert("meta.vae.width", Tensor::scalar(c.width as f32));
        a.insert("meta.vae.latent_channels", Tensor::scalar(c.latent_channels as f32));
        a.insert("meta.vae.factor", Tensor::scalar(c.factor as f32));
        a.insert("meta.vae.latent_scale", Tensor::scalar(self.latent_scale));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config = VaeConfig {
            width: a.scalar("meta.vae.width")? as usize,
            latent_channels: a.scalar("meta.vae.latent_channels")? as usize,
            factor: a.scalar("meta.vae.factor")? as usize,
        };
        config.validate()?;
        let vae = Self {
            params: params_from(a, "vae."),
            latent_scale: a.scalar("meta.vae.latent_scale")?,
            config,
        };
        // every parameter the architecture needs must be present
        let reference = Vae::new(vae.config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = vae.params.get(name)?;
            if got.shape() != t.shape() {
                return contract(format!(
                    "vae checkpoint entry `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                ));
            }
        }
        Ok(vae)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                what: "VAE checkpoint".into(),
            });
        }
        Self::from_archive(&Archive::load(path)?)
    }

    /// SHA-256 of the parameter tensors (names and values).
    pub fn params_hash(&self) -> String {
        params_hash(&self.params)
    }
}

pub fn params_hash(params: &ParamStore) -> String {
    let mut a = Archive::new();
    params_into(params, &mut a);
    hex::encode(Sha256::digest(a.encode()))
}

/// `MSE(image, recon) + beta_kl · mean(0.5·(exp(logvar) + mu² − 1 − logvar))`.
pub fn vae_loss<'t>(
    image: Var<'t>,
    recon: Var<'t>,
    mu: Var<'t>,
    logvar: Var<'t>,
    beta_kl: f32,
) -> Result<Var<'t>> {
    let rec = ops::mse(image, recon)?;
    let kl_terms = ops::sub(ops::add(ops::exp(logvar), ops::square(mu))?, logvar)?;
    let kl = ops::scale(ops::add_scalar(ops::mean_all(kl_terms), -1.0), 0.5);
    Ok(ops::add(rec, ops::scale(kl, beta_kl))?)
}

/// Stack `[3,H,W]` images selected by `idx` into `[N,3,H,W]`.
pub fn stack_images(images: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let picked: Vec<Tensor> = idx.iter().map(|&i| images[i].clone()).collect();
    Ok(Tensor::stack(&picked)?)
}

/// One optimization step of the VAE on `batch[N,3,H,W]`; returns the loss.
pub fn vae_step(
    vae: &mut Vae,
    trainer: &mut Trainer,
    batch: &Tensor,
    beta_kl: f32,
    noise_seed: u64,
) -> Result<f64> {
    // the tape holds shared references to the parameters; drop it before the
    // update so AdamW mutates them in place
    let (grads, value) = {
        let tape = Tape::new();
        let p = vae.params.bind(&tape, |_| true);
        let x = tape.constant(batch.clone());
        let (mu, logvar) = vae.moments(&p, x)?;
        let mut rng = seed::rng(noise_seed, "vae.sample", trainer.step());
        let eps = Tensor::from_fn(&mu.shape(), |_| StandardNormal.sample(&mut rng));
        let std = ops::exp(ops::scale(logvar, 0.5));
        let z = ops::add(mu, ops::mul(std, tape.constant(eps))?)?;
        let recon = vae.decode_raw(&p, z)?;
        let loss = vae_loss(x, recon, mu, logvar, beta_kl)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return contract(format!("vae loss is non-finite at step {}", trainer.step()));
        }
        let mut grads = tape.backward(loss)?;
        (p.collect_grads(&mut grads), value)
    };
    trainer.apply(&mut vae.params, &grads, value)?;
    Ok(value)
}

/// Run VAE updates until `trainer` is done, calling `checkpoint` after every
/// `every` steps (and at the end).
pub fn train_vae(
    vae: &mut Vae,
    trainer: &mut Trainer,
    images: &[Tensor],
    cfg: &VaeTrainConfig,
    every: u64,
    mut checkpoint: impl FnMut(&Vae, &Trainer) -> Result<()>,
) -> Result<()> {
    if images.is_empty() {
        return contract("vae training corpus is empty");
    }
    let batch = cfg.optim.batch.min(images.len()).max(1);
    while !trainer.done() {
        let step = trainer.step();
        let mut rng = seed::rng(cfg.seed, "vae.batch", step);
        let idx = sample(&mut rng, images.len(), batch).into_vec();
        let x = stack_images(images, &idx)?;
        let loss = vae_step(vae, trainer, &x, cfg.beta_kl, cfg.seed)?;
        if step % 50 == 0 {
            log::info!("vae step {step}: loss {loss:.5}");
        }
        if every > 0 && (step + 1) % every == 0 && !trainer.done() {
            checkpoint(vae, trainer)?;
        }
    }
    calibrate_scale(vae, images, cfg.calibrate_images)?;
    checkpoint(vae, trainer)
}

/// Set `latent_scale` to the reciprocal of the root-mean within-channel
/// variance of posterior means over (at most `limit`) corpus images.
pub fn calibrate_scale(vae: &mut Vae, images: &[Tensor], limit: usize) -> Result<()> {
    vae.latent_scale = 1.0;
    let n = images.len().min(limit.max(1));
    let z = vae.encode_batch(&stack_images(images, &(0..n).collect::<Vec<_>>())?)?;
    let stds = channel_std(&z);
    let std = (stds.iter().map(|s| s * s).sum::<f64>() / stds.len() as f64).sqrt();
    if !(std > 1e-8 && std.is_finite()) {
        return contract(format!("latent std {std} is degenerate; cannot calibrate scale"));
    }
    vae.latent_scale = (1.0 / std) as f32;
    Ok(())
}

/// Per-channel std of `[N,c,h,w]` latents.
pub fn channel_std(z: &Tensor) -> Vec<f64> {
    let s = z.shape();
    let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|i| {
                    let off = (i * c + ch) * inner;
                    z.data()[off..off + inner].iter().map(|&v| v as f64)
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        })
        .collect()
}

/// Peak signal-to-noise ratio for signals in `[0,1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return contract("psnr: shapes differ");
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(10.0 * (1.0 / mse.max(1e-12)).log10())
}
