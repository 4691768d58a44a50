//! Mask generation with margin expansion, spatial-concatenation conditioning,
//! self-supervised training with condition dropout, and guided sampling.

use std::path::Path;

use lesion_tensor::ops;
use lesion_tensor::{Archive, Bound, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blob;
use crate::error::{contract, Error, Result};
use crate::schedule::{self, NoiseSchedule};
use crate::seed;
use crate::train::{params_from, Trainer};
use crate::unet::{is_attention_param, TrainMode, UNet, UNetConfig};
use crate::vae::Vae;

/// Neutral value for canvases and masked-out pixels.
pub const GRAY: f32 = 0.5;

pub const NULL_BENIGN: &str = "cond.null_benign";
pub const NULL_REFERENCE: &str = "cond.null_reference";

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    /// Bounds on the inner-region area as a fraction of the image.
    pub min_frac: f32,
    pub max_frac: f32,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            min_frac: 0.03,
            max_frac: 0.12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub inner: Tensor,
    pub mask: Tensor,
    pub delta_px: usize,
}

/// Margin range `[round(50·H/1024), round(200·H/1024)]`, at least 1.
pub fn delta_range(h: usize) -> (usize, usize) {
    let r = |v: f64| ((v * h as f64 / 1024.0).round() as usize).max(1);
    (r(50.0), r(200.0))
}

/// Dilation of a binary `[h,w]` map by a `(2δ+1)²` square, clipped at the
/// border. Done as a row pass followed by a column pass.
pub fn dilate(m: &Tensor, delta: usize) -> Result<Tensor> {
    let [h, w] = m.shape()[..] else {
        return contract(format!("dilate expects [H, W], got {:?}", m.shape()));
    };
    let src = m.data();
    let mut rows = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (x.saturating_sub(delta), (x + delta).min(w - 1));
            if src[y * w + a..=y * w + b].iter().any(|&v| v >= 0.5) {
                rows[y * w + x] = 1.0;
            }
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        let (a, b) = (y.saturating_sub(delta), (y + delta).min(h - 1));
        for x in 0..w {
            if (a..=b).any(|yy| rows[yy * w + x] >= 0.5) {
                out[y * w + x] = 1.0;
            }
        }
    }
    Ok(Tensor::new(&[h, w], out)?)
}

impl MaskSpec {
    pub fn from_inner(inner: Tensor, delta_px: usize) -> Result<Self> {
        check_binary("inner region", &inner)?;
        let mask = dilate(&inner, delta_px)?;
        Ok(Self {
            inner,
            mask,
            delta_px,
        })
    }

    /// A spec with nothing masked.
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            inner: Tensor::zeros(&[h, w]),
            mask: Tensor::zeros(&[h, w]),
            delta_px: 0,
        }
    }
}

fn check_binary(what: &str, m: &Tensor) -> Result<()> {
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return contract(format!("{what} is not binary"));
    }
    Ok(())
}

/// Random inner blob (1–3 ellipses) plus its margin-expanded mask. With
/// `delta_override` the margin is fixed but the random stream is consumed
/// identically, so the inner region does not change.
pub fn gen_mask_with<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    cfg: &MaskConfig,
    delta_override: Option<usize>,
) -> Result<MaskSpec> {
    if h < 16 || w < 16 {
        return contract(format!("gen_mask needs H, W ≥ 16, got {h}×{w}"));
    }
    let (lo, hi) = (cfg.min_frac, cfg.max_frac);
    if !(lo > 0.0 && lo <= hi && hi < 1.0) || hi * ((h * w) as f32) < 1.0 {
        return contract(format!("infeasible mask fraction bounds [{lo}, {hi}]"));
    }
    let area = (h * w) as f32;
    for _ in 0..1000 {
        let parts = rng.random_range(1..=3);
        let target = rng.random_range(lo..=hi) * area;
        let e = blob::random_blob(rng, h, w, target, parts);
        let inner = blob::rasterize(&e, h, w);
        let frac = inner.iter().sum::<f32>() / area;
        if (lo..=hi).contains(&frac) {
            let (dlo, dhi) = delta_range(h);
            let drawn = rng.random_range(dlo..=dhi);
            let delta = delta_override.unwrap_or(drawn);
            return MaskSpec::from_inner(Tensor::new(&[h, w], inner)?, delta);
        }
    }
    contract(format!(
        "could not draw a mask within fraction bounds [{lo}, {hi}] at {h}×{w}"
    ))
}

pub fn gen_mask<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cfg: &MaskConfig) -> Result<MaskSpec> {
    gen_mask_with(rng, h, w, cfg, None)
}

fn check_image_mask(op: &str, img: &Tensor, m: &Tensor) -> Result<(usize, usize)> {
    let [3, h, w] = img.shape()[..] else {
        return contract(format!("{op}: image must be [3, H, W], got {:?}", img.shape()));
    };
    if m.shape() != [h, w] {
        return contract(format!(
            "{op}: mask is {:?} but image is {h}×{w}",
            m.shape()
        ));
    }
    Ok((h, w))
}

/// `I_b ⊗ (1 − M)` broadcast over channels.
pub fn apply_mask(image: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image_mask("apply_mask", image, m)?;
    check_binary("mask", m)?;
    let md = m.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| image.data()[i] * (1.0 - md[i % (h * w)])))
}

/// Image content inside `inner`, mid-gray elsewhere.
pub fn reference_canvas(image: &Tensor, inner: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image_mask("reference_canvas", image, inner)?;
    let md = inner.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        if md[i % (h * w)] >= 0.5 {
            image.data()[i]
        } else {
            GRAY
        }
    }))
}

/// Pixel mask resized to latent resolution by nearest neighbour and
/// re-binarized at 0.5; shape `[1,h,w]`.
pub fn latent_mask(m: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let r = ops::resize_nearest(m, h, w)?;
    Ok(r.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).reshape(&[1, h, w])?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// `[c,h,2w]`: masked-benign latent | reference latent.
    pub x_c: Tensor,
    /// `[1,h,2w]`: latent mask | zeros.
    pub m_c: Tensor,
    pub null_flag: bool,
}

impl ConditioningBundle {
    fn from_parts(x_m: &Tensor, x_l: &Tensor, m: &Tensor) -> Result<Self> {
        Ok(Self {
            x_c: Tensor::concat(&[x_m, x_l], 2)?,
            m_c: Tensor::concat(&[m, &Tensor::zeros(m.shape())], 2)?,
            null_flag: false,
        })
    }

    /// Width of one half.
    pub fn half_width(&self) -> usize {
        self.x_c.dim(2) / 2
    }

    /// `(X_m, X_l)`.
    pub fn halves(&self) -> Result<(Tensor, Tensor)> {
        let w = self.half_width();
        Ok((self.x_c.narrow(2, 0, w)?, self.x_c.narrow(2, w, w)?))
    }
}

pub fn build_conditioning(
    i_m: &Tensor,
    i_l: &Tensor,
    m: &Tensor,
    vae: &Vae,
) -> Result<ConditioningBundle> {
    if i_m.shape() != i_l.shape() {
        return contract(format!(
            "conditioning images differ in resolution: {:?} vs {:?}",
            i_m.shape(),
            i_l.shape()
        ));
    }
    check_image_mask("build_conditioning", i_m, m)?;
    let z = vae.encode_batch(&Tensor::stack(&[i_m.clone(), i_l.clone()])?)?;
    let (x_m, x_l) = (z.index0(0)?, z.index0(1)?);
    let lm = latent_mask(m, x_m.dim(1), x_m.dim(2))?;
    ConditioningBundle::from_parts(&x_m, &x_l, &lm)
}

/// Learned null vectors broadcast over a `[c,h,2w]` grid.
pub fn null_conditioning(nb: &Tensor, nr: &Tensor, h: usize, w: usize) -> Result<ConditioningBundle> {
    let c = nb.numel();
    let half = |v: &Tensor| Tensor::from_fn(&[c, h, w], |i| v.data()[i / (h * w)]);
    Ok(ConditioningBundle {
        x_c: Tensor::concat(&[&half(nb), &half(nr)], 2)?,
        m_c: Tensor::zeros(&[1, h, 2 * w]),
        null_flag: true,
    })
}

/// With probability `p` (one draw for the whole bundle) replace both halves
/// by their null vectors and zero the mask.
pub fn drop_condition<R: Rng + ?Sized>(
    bundle: &ConditioningBundle,
    rng: &mut R,
    p: f64,
    null_benign: &Tensor,
    null_reference: &Tensor,
) -> Result<ConditioningBundle> {
    if !(0.0..=1.0).contains(&p) {
        return contract(format!("dropout probability {p} outside [0, 1]"));
    }
    let u: f64 = rng.random();
    if u < p {
        null_conditioning(null_benign, null_reference, bundle.x_c.dim(1), bundle.half_width())
    } else {
        Ok(bundle.clone())
    }
}

/// `eps_uncond + s·(eps_cond − eps_uncond)`; exact at `s = 1` and `s = 0`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, s: f32) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return contract("cfg_combine: shapes differ");
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u))?)
}

/// Denoiser plus the two learned null vectors (stored as `cond.*`).
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub unet: UNet,
}

impl DiffusionModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        let mut unet = UNet::new(config, seed)?;
        let c = unet.config.latent_channels;
        unet.params.insert(NULL_BENIGN, Tensor::zeros(&[c]));
        unet.params.insert(NULL_REFERENCE, Tensor::zeros(&[c]));
        Ok(Self { unet })
    }

    pub fn nulls(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            self.unet.params.get(NULL_BENIGN)?.clone(),
            self.unet.params.get(NULL_REFERENCE)?.clone(),
        ))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        self.unet.save_into(&mut a);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let mut unet = UNet::from_archive(a)?;
        unet.params.extend(params_from(a, "cond."));
        let c = unet.config.latent_channels;
        for name in [NULL_BENIGN, NULL_REFERENCE] {
            if unet.params.get(name)?.shape() != [c] {
                return contract(format!("checkpoint entry `{name}` must have shape [{c}]"));
            }
        }
        Ok(Self { unet })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                what: "diffusion checkpoint".into(),
            });
        }
        Self::from_archive(&Archive::load(path)?)
    }

    /// Names updated by the optimizer: the denoiser parameters of `mode`,
    /// plus the null vectors when condition dropout is on.
    pub fn trainable(&self, mode: TrainMode, dropout: bool) -> impl Fn(&str) -> bool {
        move |name: &str| {
            if name.starts_with("cond.") {
                dropout
            } else {
                mode == TrainMode::All || is_attention_param(name)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// `[c,h,2w]`: latent of the image | latent of the reference.
    pub z_target: Tensor,
    pub bundle: ConditioningBundle,
    pub t: usize,
    pub eps: Tensor,
    /// `[1,h,w]` latent mask of the benign half, kept for `hole_only` loss.
    pub latent_mask: Tensor,
}

/// Independent random streams used to build training samples.
pub struct SampleRngs {
    pub mask: seed::Rng,
    pub timestep: seed::Rng,
    pub noise: seed::Rng,
}

impl SampleRngs {
    pub fn new(root: u64, index: u64) -> Self {
        Self {
            mask: seed::rng(root, "mask", index),
            timestep: seed::rng(root, "timestep", index),
            noise: seed::rng(root, "noise", index),
        }
    }
}

/// Training samples for `images` with the given masks. `image_latents`, when
/// given, are the cached encodings of `images`.
pub fn make_train_batch_with_masks(
    images: &[&Tensor],
    image_latents: Option<&[&Tensor]>,
    masks: &[MaskSpec],
    rngs: &mut SampleRngs,
    vae: &Vae,
    schedule: &NoiseSchedule,
) -> Result<Vec<TrainSample>> {
    if images.is_empty() || images.len() != masks.len() {
        return contract("make_train_batch: need one mask per image and at least one image");
    }
    let mut pix = Vec::with_capacity(3 * images.len());
    for (img, m) in images.iter().zip(masks) {
        pix.push(apply_mask(img, &m.mask)?);
        pix.push(reference_canvas(img, &m.inner)?);
    }
    let cached = image_latents.is_some();
    if !cached {
        pix.extend(images.iter().map(|t| (*t).clone()));
    }
    let z = vae.encode_batch(&Tensor::stack(&pix)?)?;
    let n = images.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x_m = z.index0(2 * i)?;
        let x_l = z.index0(2 * i + 1)?;
        let z_img = match image_latents {
            Some(l) => l[i].clone(),
            None => z.index0(2 * n + i)?,
        };
        let lm = latent_mask(&masks[i].mask, x_m.dim(1), x_m.dim(2))?;
        let bundle = ConditioningBundle::from_parts(&x_m, &x_l, &lm)?;
        let z_target = Tensor::concat(&[&z_img, &x_l], 2)?;
        let t = rngs.timestep.random_range(1..=schedule.steps());
        let eps = Tensor::from_fn(z_target.shape(), |_| StandardNormal.sample(&mut rngs.noise));
        out.push(TrainSample {
            z_target,
            bundle,
            t,
            eps,
            latent_mask: lm,
        });
    }
    Ok(out)
}

pub fn make_train_batch(
    images: &[&Tensor],
    image_latents: Option<&[&Tensor]>,
    rngs: &mut SampleRngs,
    vae: &Vae,
    schedule: &NoiseSchedule,
    mask_cfg: &MaskConfig,
) -> Result<Vec<TrainSample>> {
    let masks = images
        .iter()
        .map(|img| gen_mask(&mut rngs.mask, img.dim(1), img.dim(2), mask_cfg))
        .collect::<Result<Vec<_>>>()?;
    make_train_batch_with_masks(images, image_latents, &masks, rngs, vae, schedule)
}

pub fn make_train_sample(
    image: &Tensor,
    rngs: &mut SampleRngs,
    vae: &Vae,
    schedule: &NoiseSchedule,
    mask_cfg: &MaskConfig,
) -> Result<TrainSample> {
    Ok(make_train_batch(&[image], None, rngs, vae, schedule, mask_cfg)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossRegion {
    Full,
    BenignHalf,
    HoleOnly,
}

impl std::str::FromStr for LossRegion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossRegion::Full),
            "benign_half" => Ok(LossRegion::BenignHalf),
            "hole_only" => Ok(LossRegion::HoleOnly),
            _ => contract(format!("unknown loss region `{s}` (full | benign_half | hole_only)")),
        }
    }
}

/// Loss weights `[N,c,h,2w]` for a region, or `None` for the full grid.
fn region_weights(batch: &[TrainSample], region: LossRegion) -> Result<Option<Tensor>> {
    if region == LossRegion::Full {
        return Ok(None);
    }
    let s = batch[0].eps.shape().to_vec();
    let (c, h, w2) = (s[0], s[1], s[2]);
    let w = w2 / 2;
    let per: Vec<Tensor> = batch
        .iter()
        .map(|smp| {
            Tensor::from_fn(&[c, h, w2], |i| {
                let (y, x) = ((i / w2) % h, i % w2);
                match (x < w, region) {
                    (false, _) => 0.0,
                    (true, LossRegion::HoleOnly) => smp.latent_mask.data()[y * w + x],
                    (true, _) => 1.0,
                }
            })
        })
        .collect();
    Ok(Some(Tensor::stack(&per)?))
}

/// The denoiser input `[N,2c+1,h,2w]` for noisy latents and bundles; null
/// bundles are rebuilt from the bound null vectors so they receive gradients.
pub fn denoiser_input<'t>(
    p: &Bound<'t>,
    z_t: &[Tensor],
    bundles: &[&ConditioningBundle],
) -> Result<Var<'t>> {
    let tape = p.get(NULL_BENIGN)?.tape();
    let mut conds = Vec::with_capacity(bundles.len());
    for b in bundles {
        if b.null_flag {
            let (c, h, w) = (b.x_c.dim(0), b.x_c.dim(1), b.half_width());
            let nb = ops::broadcast_channels(p.get(NULL_BENIGN)?, 1, &[h, w])?;
            let nr = ops::broadcast_channels(p.get(NULL_REFERENCE)?, 1, &[h, w])?;
            debug_assert_eq!(nb.shape()[1], c);
            conds.push(ops::concat(&[nb, nr], 3)?);
        } else {
            let s = b.x_c.shape();
            conds.push(tape.constant(b.x_c.clone().reshape(&[1, s[0], s[1], s[2]])?));
        }
    }
    let x_c = ops::concat(&conds, 0)?;
    let zt = tape.constant(Tensor::stack(z_t)?);
    let mc = tape.constant(Tensor::stack(
        &bundles.iter().map(|b| b.m_c.clone()).collect::<Vec<_>>(),
    )?);
    Ok(ops::concat(&[zt, mc, x_c], 1)?)
}

/// Noise prediction loss of `model` on a batch, on a fresh tape with the
/// given trainable set. Returns `None` when the loss region is empty.
fn batch_loss(
    model: &DiffusionModel,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    region: LossRegion,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Option<(f64, indexmap::IndexMap<String, Tensor>)>> {
    let weights = region_weights(batch, region)?;
    let z_t = batch
        .iter()
        .map(|s| schedule::forward_diffuse(&s.z_target, s.t, &s.eps, schedule))
        .collect::<Result<Vec<_>>>()?;
    let tape = Tape::new();
    let p = model.unet.params.bind(&tape, trainable);
    let bundles: Vec<&ConditioningBundle> = batch.iter().map(|s| &s.bundle).collect();
    let x = denoiser_input(&p, &z_t, &bundles)?;
    let ts: Vec<usize> = batch.iter().map(|s| s.t).collect();
    let eps_hat = model.unet.forward(&p, x, &ts)?;
    let eps = tape.constant(Tensor::stack(
        &batch.iter().map(|s| s.eps.clone()).collect::<Vec<_>>(),
    )?);
    let loss = match &weights {
        None => ops::mse(eps_hat, eps)?,
        Some(w) => match ops::masked_mse(eps_hat, eps, w)? {
            Some(l) => l,
            None => return Ok(None),
        },
    };
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        return contract("diffusion loss is non-finite");
    }
    let mut grads = tape.backward(loss)?;
    Ok(Some((value, p.collect_grads(&mut grads))))
}

/// One optimizer step on `batch`; returns the loss (0 with a warning and no
/// update when the loss region is empty).
pub fn train_step(
    model: &mut DiffusionModel,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    trainer: &mut Trainer,
    region: LossRegion,
    mode: TrainMode,
    dropout: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return contract("train_step needs a non-empty batch");
    }
    let trainable = model.trainable(mode, dropout);
    match batch_loss(model, batch, schedule, region, &trainable)? {
        Some((value, grads)) => {
            trainer.apply(&mut model.unet.params, &grads, value)?;
            Ok(value)
        }
        None => {
            log::warn!(
                "step {}: loss region is empty, loss defined as 0 and no update applied",
                trainer.step()
            );
            trainer.skip(0.0)?;
            Ok(0.0)
        }
    }
}

/// Loss of `model` on `batch` without updating anything.
pub fn eval_loss(
    model: &DiffusionModel,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    region: LossRegion,
) -> Result<Option<f64>> {
    Ok(batch_loss(model, batch, schedule, region, &|_| false)?.map(|(v, _)| v))
}

#[derive(Clone, Debug)]
pub struct DiffusionTrainConfig {
    pub dropout: f64,
    pub loss_region: LossRegion,
    pub mode: TrainMode,
    pub mask: MaskConfig,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            dropout: 0.1,
            loss_region: LossRegion::Full,
            mode: TrainMode::All,
            mask: MaskConfig::default(),
            seed: 0,
        }
    }
}

/// Train until `trainer` is done. Image latents are encoded once up front.
/// `checkpoint` runs every `every` steps and at the end.
#[allow(clippy::too_many_arguments)]
pub fn train_diffusion(
    model: &mut DiffusionModel,
    trainer: &mut Trainer,
    images: &[Tensor],
    vae: &Vae,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    batch: usize,
    every: u64,
    mut checkpoint: impl FnMut(&DiffusionModel, &Trainer) -> Result<()>,
) -> Result<()> {
    if images.is_empty() {
        return contract("diffusion training corpus is empty");
    }
    if vae.config.latent_channels != model.unet.config.latent_channels {
        return contract("VAE and denoiser disagree on latent channels");
    }
    let latents = vae.encode_batch(&Tensor::stack(images)?)?;
    let latents: Vec<Tensor> = (0..images.len())
        .map(|i| latents.index0(i))
        .collect::<lesion_tensor::Result<_>>()?;
    let batch = batch.max(1);
    while !trainer.done() {
        let step = trainer.step();
        let mut pick = seed::rng(cfg.seed, "diffusion.batch", step);
        let idx: Vec<usize> = (0..batch).map(|_| pick.random_range(0..images.len())).collect();
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
        let lats: Vec<&Tensor> = idx.iter().map(|&i| &latents[i]).collect();
        let mut rngs = SampleRngs::new(cfg.seed, step);
        let mut samples = make_train_batch(&imgs, Some(&lats), &mut rngs, vae, schedule, &cfg.mask)?;
        let mut drop_rng = seed::rng(cfg.seed, "dropout", step);
        let (nb, nr) = model.nulls()?;
        for s in &mut samples {
            s.bundle = drop_condition(&s.bundle, &mut drop_rng, cfg.dropout, &nb, &nr)?;
        }
        let loss = train_step(
            model,
            &samples,
            schedule,
            trainer,
            cfg.loss_region,
            cfg.mode,
            cfg.dropout > 0.0,
        )?;
        if step % 50 == 0 {
            log::info!("diffusion step {step}: loss {loss:.5}");
        }
        if every > 0 && (step + 1) % every == 0 && !trainer.done() {
            checkpoint(model, trainer)?;
        }
    }
    checkpoint(model, trainer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Ddim,
    Ddpm,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Sampler::Ddim),
            "ddpm" => Ok(Sampler::Ddpm),
            _ => contract(format!("unknown sampler `{s}` (ddim | ddpm)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleConfig {
    pub sampler: Sampler,
    /// DDIM steps; ignored by DDPM, which walks every timestep.
    pub steps: usize,
    pub guidance: f32,
    pub composite: bool,
    pub seed: u64,
    /// Evaluate the unconditional branch even at guidance 1.
    pub force_uncond: bool,
    /// Skip the unconditional branch entirely (conditional-only sampler).
    pub conditional_only: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            sampler: Sampler::Ddim,
            steps: 50,
            guidance: 2.0,
            composite: false,
            seed: 0,
            force_uncond: false,
            conditional_only: false,
        }
    }
}

fn channel_cat(z: &Tensor, b: &ConditioningBundle) -> Result<Tensor> {
    Ok(Tensor::concat(&[z, &b.m_c, &b.x_c], 0)?)
}

fn check_finite(z: &Tensor, step: usize, t: usize) -> Result<()> {
    if !z.is_finite() {
        return Err(Error::SamplerDiverged { step, t });
    }
    Ok(())
}

/// Run the reverse chain from `z_T ~ N(0,1)` and return `z_0` `[c,h,2w]`.
pub fn sample_latent(
    model: &DiffusionModel,
    bundle: &ConditioningBundle,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor> {
    if !(cfg.guidance >= 0.0 && cfg.guidance.is_finite()) {
        return contract(format!("guidance scale must be ≥ 0, got {}", cfg.guidance));
    }
    let (nb, nr) = model.nulls()?;
    let null = null_conditioning(&nb, &nr, bundle.x_c.dim(1), bundle.half_width())?;
    let mut noise_rng = seed::rng(cfg.seed, "inpaint.noise", 0);
    let shape = [model.unet.config.latent_channels, bundle.x_c.dim(1), bundle.x_c.dim(2)];
    let mut z = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut noise_rng));
    let need_uncond = !cfg.conditional_only && (cfg.guidance != 1.0 || cfg.force_uncond);
    let eps_at = |z: &Tensor, t: usize| -> Result<Tensor> {
        let eps_c = model.unet.predict(&channel_cat(z, bundle)?, t)?;
        if !need_uncond {
            return Ok(eps_c);
        }
        let eps_u = model.unet.predict(&channel_cat(z, &null)?, t)?;
        cfg_combine(&eps_c, &eps_u, cfg.guidance)
    };
    match cfg.sampler {
        Sampler::Ddim => {
            let ts = schedule::ddim_timesteps(schedule.steps(), cfg.steps)?;
            for (k, pair) in ts.windows(2).enumerate() {
                let eps = eps_at(&z, pair[0])?;
                z = schedule::ddim_step(&z, &eps, pair[0], pair[1], schedule)?;
                check_finite(&z, k, pair[0])?;
            }
        }
        Sampler::Ddpm => {
            let mut step_rng = seed::rng(cfg.seed, "inpaint.ddpm", 0);
            for (k, t) in (1..=schedule.steps()).rev().enumerate() {
                let eps = eps_at(&z, t)?;
                let noise = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut step_rng));
                z = schedule::ddpm_step(&z, &eps, t, schedule, &noise)?;
                check_finite(&z, k, t)?;
            }
        }
    }
    Ok(z)
}

/// Inpaint lesion content from `i_l` into `i_b` within `m`.
pub fn inpaint(
    i_b: &Tensor,
    i_l: &Tensor,
    m: &Tensor,
    vae: &Vae,
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor> {
    if i_b.shape() != i_l.shape() {
        return contract(format!(
            "benign image is {:?} but reference is {:?}",
            i_b.shape(),
            i_l.shape()
        ));
    }
    let (h, w) = check_image_mask("inpaint", i_b, m)?;
    let f = vae.config.factor;
    if h % f != 0 || w % f != 0 {
        return contract(format!("image {h}×{w} not divisible by the latent factor {f}"));
    }
    let i_m = apply_mask(i_b, m)?;
    let bundle = build_conditioning(&i_m, i_l, m, vae)?;
    let z0 = sample_latent(model, &bundle, schedule, cfg)?;
    let z0_b = z0.narrow(2, 0, bundle.half_width())?;
    let decoded = vae.decode(&z0_b)?;
    if !cfg.composite {
        return Ok(decoded);
    }
    let md = m.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let k = md[i % (h * w)];
        i_b.data()[i] * (1.0 - k) + decoded.data()[i] * k
    }))
}

/// Mean absolute error over pixels where `m` is set, all channels.
pub fn masked_mae(a: &Tensor, b: &Tensor, m: &Tensor) -> Result<f64> {
    let (h, w) = check_image_mask("masked_mae", a, m)?;
    let md = m.data();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..3 * h * w {
        if md[i % (h * w)] >= 0.5 {
            sum += (a.data()[i] - b.data()[i]).abs() as f64;
            n += 1;
        }
    }
    if n == 0 {
        return contract("masked_mae: empty mask");
    }
    Ok(sum / n as f64)
}
