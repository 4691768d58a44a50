//! Downstream segmentation benchmark: a small UNet segmenter, Dice, the
//! geometric augmentation baselines and the inpainting-based augmentation
//! arm, run over a (strategy × real count × seed) grid.

use std::fmt::Write as _;

use lesion_tensor::ops;
use lesion_tensor::{Bound, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::inpaint::{self, DiffusionModel, MaskConfig, SampleConfig};
use crate::nn;
use crate::schedule::NoiseSchedule;
use crate::seed;
use crate::train::{OptimConfig, Trainer};
use crate::vae::Vae;

pub const REPORT_HEADER: &str = "style,strategy,real_count,seed,dice,test_hash,status";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Pathogen,
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    /// `[H, W]`, values in {0, 1}.
    pub mask: Tensor,
    pub provenance: Provenance,
}

impl SegSample {
    pub fn new(image: Tensor, mask: Tensor, provenance: Provenance) -> Result<Self> {
        let [3, h, w] = image.shape()[..] else {
            return contract(format!("segmentation image must be [3, H, W], got {:?}", image.shape()));
        };
        if mask.shape() != [h, w] {
            return contract(format!("mask {:?} does not match image {h}×{w}", mask.shape()));
        }
        check_binary("mask", &mask)?;
        Ok(Self {
            image,
            mask,
            provenance,
        })
    }
}

fn check_binary(what: &str, m: &Tensor) -> Result<()> {
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return contract(format!("{what} is not binary"));
    }
    Ok(())
}

/// `2|a∩b| / (|a|+|b|)`, 1 when both are empty.
pub fn dice(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return contract(format!("dice: {:?} vs {:?}", pred.shape(), gt.shape()));
    }
    check_binary("prediction", pred)?;
    check_binary("ground truth", gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p == 1.0 && g == 1.0) as usize;
        total += (p == 1.0) as usize + (g == 1.0) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// geometric augmentation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeoKind {
    Rotation,
    Flip,
    Translation,
    Combine,
}

/// Remap every channel of `[C,H,W]` with `src(y, x) -> (sy, sx)` into an
/// `[C,oh,ow]` output.
fn remap(t: &Tensor, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let d = t.data();
    let mut out = vec![0f32; c * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = src(y, x);
            for ch in 0..c {
                out[(ch * oh + y) * ow + x] = d[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).expect("remap shape")
}

/// Counter-clockwise rotation by `k` quarter turns.
pub fn rot90(t: &Tensor, k: usize) -> Tensor {
    let mut out = t.clone();
    for _ in 0..k % 4 {
        let (h, w) = (out.dim(1), out.dim(2));
        out = remap(&out, w, h, |y, x| (x, w - 1 - y));
    }
    out
}

pub fn flip(t: &Tensor, horizontal: bool) -> Tensor {
    let (h, w) = (t.dim(1), t.dim(2));
    remap(t, h, w, |y, x| if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Shift content by `(dy, dx)` pixels; uncovered pixels mirror the image.
pub fn translate(t: &Tensor, dy: isize, dx: isize) -> Tensor {
    let (h, w) = (t.dim(1), t.dim(2));
    remap(t, h, w, |y, x| {
        (reflect(y as isize - dy, h), reflect(x as isize - dx, w))
    })
}

fn with_mask_channel(s: &SegSample) -> Result<Tensor> {
    let (h, w) = (s.mask.dim(0), s.mask.dim(1));
    Ok(Tensor::concat(&[&s.image, &s.mask.clone().reshape(&[1, h, w])?], 0)?)
}

pub fn geometric_augment<R: Rng + ?Sized>(s: &SegSample, kind: GeoKind, rng: &mut R) -> Result<SegSample> {
    let mut t = with_mask_channel(s)?;
    let (rot, fl, tr) = match kind {
        GeoKind::Rotation => (true, false, false),
        GeoKind::Flip => (false, true, false),
        GeoKind::Translation => (false, false, true),
        GeoKind::Combine => (true, true, true),
    };
    if rot {
        t = rot90(&t, rng.random_range(1..=3));
    }
    if fl {
        t = flip(&t, rng.random_bool(0.5));
    }
    if tr {
        let (h, w) = (t.dim(1) as i64, t.dim(2) as i64);
        let (my, mx) = ((h / 10).max(1), (w / 10).max(1));
        let dy = rng.random_range(-my..=my) as isize;
        let dx = rng.random_range(-mx..=mx) as isize;
        t = translate(&t, dy, dx);
    }
    let (h, w) = (t.dim(1), t.dim(2));
    let image = t.narrow(0, 0, 3)?;
    let mask = t
        .narrow(0, 3, 1)?
        .reshape(&[h, w])?
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    SegSample::new(image, mask, Provenance::Geometric)
}

// ---------------------------------------------------------------------------
// segmenter

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub base_width: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f32,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            steps: 300,
            batch: 8,
            lr: 3e-3,
            warmup_steps: 20,
            weight_decay: 1e-4,
        }
    }
}

/// Two-level UNet producing one logit per pixel.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub params: ParamStore,
}

impl SegModel {
    pub fn new(base: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "seg.init", 0);
        let mut p = ParamStore::new();
        let (b, b2) = (base, 2 * base);
        nn::init_conv(&mut p, "seg.enc0a", 3, b, 3, 1.0, &mut rng);
        nn::init_conv(&mut p, "seg.enc0b", b, b, 3, 1.0, &mut rng);
        nn::init_conv(&mut p, "seg.enc1a", b, b2, 3, 1.0, &mut rng);
        nn::init_conv(&mut p, "seg.enc1b", b2, b2, 3, 1.0, &mut rng);
        nn::init_conv(&mut p, "seg.dec0a", b + b2, b, 3, 1.0, &mut rng);
        nn::init_conv(&mut p, "seg.dec0b", b, b, 3, 1.0, &mut rng);
        nn::init_conv(&mut p, "seg.out", b, 1, 1, 1.0, &mut rng);
        Self { params: p }
    }

    /// Logits `[N,1,H,W]` for images `[N,3,H,W]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let cbr = |name: &str, h: Var<'t>| -> Result<Var<'t>> { Ok(ops::silu(nn::conv(p, name, h, 1)?)) };
        let e0 = cbr("seg.enc0b", cbr("seg.enc0a", x)?)?;
        let e1 = ops::avg_pool2x(e0)?;
        let e1 = cbr("seg.enc1b", cbr("seg.enc1a", e1)?)?;
        let u = ops::concat(&[ops::upsample_nearest2x(e1)?, e0], 1)?;
        let d = cbr("seg.dec0b", cbr("seg.dec0a", u)?)?;
        Ok(nn::conv(p, "seg.out", d, 1)?)
    }

    /// Binary masks `[H,W]` thresholded at probability 0.5.
    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let tape = Tape::no_grad();
            let p = self.params.bind(&tape, |_| false);
            let logits = self.forward(&p, tape.constant(Tensor::stack(chunk)?))?;
            let v = logits.value();
            let (h, w) = (v.dim(2), v.dim(3));
            for i in 0..chunk.len() {
                let slab = &v.data()[i * h * w..(i + 1) * h * w];
                out.push(Tensor::new(
                    &[h, w],
                    slab.iter().map(|&l| if l >= 0.0 { 1.0 } else { 0.0 }).collect(),
                )?);
            }
        }
        Ok(out)
    }
}

fn batch_tensors(samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let (h, w) = (samples[0].mask.dim(0), samples[0].mask.dim(1));
    let masks = samples
        .iter()
        .map(|s| s.mask.clone().reshape(&[1, h, w]))
        .collect::<lesion_tensor::Result<Vec<_>>>()?;
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Mean per-image Dice of `model` on `test`.
pub fn evaluate(model: &SegModel, test: &[SegSample]) -> Result<f64> {
    if test.is_empty() {
        return contract("empty test set");
    }
    let images: Vec<Tensor> = test.iter().map(|s| s.image.clone()).collect();
    let preds = model.predict(&images)?;
    let mut sum = 0.0;
    for (p, s) in preds.iter().zip(test) {
        sum += dice(p, &s.mask)?;
    }
    Ok(sum / test.len() as f64)
}

/// Train a fresh segmenter on `samples` (0.5·BCE + 0.5·soft Dice) and
/// return it with its mean Dice on `test`.
pub fn train_seg(samples: &[SegSample], test: &[SegSample], cfg: &SegConfig, seed: u64) -> Result<(SegModel, f64)> {
    if samples.len() < 4 {
        return contract(format!("segmentation training needs ≥ 4 samples, got {}", samples.len()));
    }
    let mut model = SegModel::new(cfg.base_width, seed);
    let mut trainer = Trainer::new(&OptimConfig {
        lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
        weight_decay: cfg.weight_decay,
        batch: cfg.batch,
    })?;
    let mut order: Vec<usize> = Vec::new();
    let mut shuffle = seed::rng(seed, "seg.batch", 0);
    while !trainer.done() {
        if order.len() < cfg.batch {
            let mut fresh: Vec<usize> = (0..samples.len()).collect();
            fresh.shuffle(&mut shuffle);
            order.extend(fresh);
        }
        let picked: Vec<&SegSample> = order.drain(..cfg.batch.min(samples.len())).map(|i| &samples[i]).collect();
        let (x, y) = batch_tensors(&picked)?;
        let (grads, value) = {
            let tape = Tape::new();
            let p = model.params.bind(&tape, |_| true);
            let logits = model.forward(&p, tape.constant(x))?;
            let bce = ops::bce_with_logits(logits, &y)?;
            let sd = ops::soft_dice_loss(ops::sigmoid(logits), &y)?;
            let loss = ops::add(ops::scale(bce, 0.5), ops::scale(sd, 0.5))?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return contract(format!("segmentation loss is non-finite at step {}", trainer.step()));
            }
            let mut g = tape.backward(loss)?;
            (p.collect_grads(&mut g), value)
        };
        trainer.apply(&mut model.params, &grads, value)?;
    }
    let d = evaluate(&model, test)?;
    Ok((model, d))
}

// ---------------------------------------------------------------------------
// inpainting augmentation

/// Frozen generator used by the inpainting augmentation arm.
pub struct Generator<'a> {
    pub vae: &'a Vae,
    pub model: &'a DiffusionModel,
    pub schedule: &'a NoiseSchedule,
    pub sample: SampleConfig,
    pub mask: MaskConfig,
}

/// Reference canvas carrying lesion texture from `(image, lesion)` over the
/// region `inner`: the lesion is shifted so its centroid meets the centroid
/// of `inner`, and inner pixels it does not cover take the nearest lesion
/// pixel. Gray elsewhere.
pub fn lesion_reference(image: &Tensor, lesion: &Tensor, inner: &Tensor) -> Result<Tensor> {
    let (h, w) = (lesion.dim(0), lesion.dim(1));
    if inner.shape() != [h, w] || image.shape() != [3, h, w] {
        return contract("lesion_reference: image, lesion mask and region disagree in size");
    }
    let pts = |m: &Tensor| -> Vec<(isize, isize)> {
        (0..h * w)
            .filter(|&i| m.data()[i] >= 0.5)
            .map(|i| ((i / w) as isize, (i % w) as isize))
            .collect()
    };
    let src = pts(lesion);
    let dst = pts(inner);
    if src.is_empty() {
        return contract("lesion reference image has an empty lesion mask");
    }
    let centroid = |p: &[(isize, isize)]| {
        let n = p.len().max(1) as f64;
        let (sy, sx) = p.iter().fold((0.0, 0.0), |a, &(y, x)| (a.0 + y as f64, a.1 + x as f64));
        ((sy / n).round() as isize, (sx / n).round() as isize)
    };
    let (cy, cx) = centroid(&src);
    let (dy, dx) = centroid(&dst);
    let mut out = Tensor::full(&[3, h, w], inpaint::GRAY);
    let d = image.data();
    for &(y, x) in &dst {
        let (sy, sx) = (y - dy + cy, x - dx + cx);
        let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
        let (py, px) = if inside && lesion.data()[sy as usize * w + sx as usize] >= 0.5 {
            (sy, sx)
        } else {
            *src
                .iter()
                .min_by_key(|&&(ly, lx)| (ly - sy).pow(2) + (lx - sx).pow(2))
                .expect("non-empty lesion")
        };
        let (py, px) = (py as usize, px as usize);
        let (y, x) = (y as usize, x as usize);
        for c in 0..3 {
            out.data_mut()[(c * h + y) * w + x] = d[(c * h + py) * w + px];
        }
    }
    Ok(out)
}

/// One synthetic pair per draw: a benign image, a lesion reference and a
/// fresh inner-region mask (no margin) go through the inpainter; the mask is
/// emitted unchanged as the label.
pub fn pathogen_augment<R: Rng + ?Sized>(
    benign: &[Tensor],
    references: &[SegSample],
    gen: &Generator,
    n_synth: usize,
    rng: &mut R,
) -> Result<Vec<SegSample>> {
    if benign.is_empty() || references.is_empty() {
        return contract("inpainting augmentation needs a benign pool and a lesion reference pool");
    }
    let refs: Vec<&SegSample> = references.iter().filter(|s| s.mask.sum() > 0.0).collect();
    if refs.is_empty() {
        return contract("no reference image contains a lesion");
    }
    let mut out = Vec::with_capacity(n_synth);
    for _ in 0..n_synth {
        let i_b = &benign[rng.random_range(0..benign.len())];
        let r = refs[rng.random_range(0..refs.len())];
        let spec = inpaint::gen_mask_with(rng, i_b.dim(1), i_b.dim(2), &gen.mask, Some(0))?;
        let i_l = lesion_reference(&r.image, &r.mask, &spec.inner)?;
        let cfg = SampleConfig {
            seed: rng.random(),
            ..gen.sample.clone()
        };
        let img = inpaint::inpaint(i_b, &i_l, &spec.mask, gen.vae, gen.model, gen.schedule, &cfg)?;
        out.push(SegSample::new(img, spec.mask, Provenance::Pathogen)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// benchmark grid

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    None,
    Geometric(GeoKind),
    Pathogen,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Geometric(GeoKind::Rotation) => "rotation",
            Strategy::Geometric(GeoKind::Flip) => "flip",
            Strategy::Geometric(GeoKind::Translation) => "translation",
            Strategy::Geometric(GeoKind::Combine) => "combine",
            Strategy::Pathogen => "pathogen",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Strategy::None,
            "rotation" => Strategy::Geometric(GeoKind::Rotation),
            "flip" => Strategy::Geometric(GeoKind::Flip),
            "translation" => Strategy::Geometric(GeoKind::Translation),
            "combine" => Strategy::Geometric(GeoKind::Combine),
            "pathogen" => Strategy::Pathogen,
            _ => {
                return contract(format!(
                    "unknown strategy `{s}` (none | rotation | flip | translation | combine | pathogen)"
                ))
            }
        })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub style: String,
    pub real_counts: Vec<usize>,
    pub synth_ratio: usize,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub seg: SegConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            style: "kpi-like".into(),
            real_counts: vec![8, 16, 24, 32],
            synth_ratio: 3,
            strategies: vec![
                Strategy::None,
                Strategy::Geometric(GeoKind::Rotation),
                Strategy::Geometric(GeoKind::Flip),
                Strategy::Geometric(GeoKind::Translation),
                Strategy::Geometric(GeoKind::Combine),
                Strategy::Pathogen,
            ],
            seeds: vec![0, 1, 2],
            seg: SegConfig::default(),
        }
    }
}

/// Train-split material for one style.
pub struct BenchData {
    /// Real labelled training pool, in manifest order.
    pub train: Vec<SegSample>,
    /// Lesion-free images paired with `train` (same tissue, no lesions).
    pub benign: Vec<Tensor>,
    pub test: Vec<SegSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub style: String,
    pub strategy: Strategy,
    pub real_count: usize,
    pub seed: u64,
    pub dice: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub strategy: Strategy,
    pub real_count: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub test_hash: String,
}

/// SHA-256 over the test images and masks, in order.
pub fn test_set_hash(test: &[SegSample]) -> String {
    let mut h = Sha256::new();
    for s in test {
        for v in s.image.data().iter().chain(s.mask.data()) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let d = r.dice.map(|d| format!("{d:.6}")).unwrap_or_default();
            let status = r.status.replace([',', '\n'], ";");
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.style, r.strategy, r.real_count, r.seed, d, self.test_hash, status
            )
            .unwrap();
        }
        s
    }

    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(|r| r.dice.is_none())
    }

    /// Mean and population std of Dice per (strategy, real_count) over
    /// successful seeds, in grid order.
    pub fn aggregate(&self) -> Vec<CellStats> {
        let mut out: Vec<CellStats> = Vec::new();
        for r in &self.rows {
            if out.iter().any(|c| c.strategy == r.strategy && c.real_count == r.real_count) {
                continue;
            }
            let vals: Vec<f64> = self
                .rows
                .iter()
                .filter(|o| o.strategy == r.strategy && o.real_count == r.real_count)
                .filter_map(|o| o.dice)
                .collect();
            let n = vals.len();
            let mean = if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 };
            let var = if n == 0 {
                f64::NAN
            } else {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
            };
            out.push(CellStats {
                strategy: r.strategy,
                real_count: r.real_count,
                mean,
                std: var.sqrt(),
                n,
            });
        }
        out
    }

    pub fn mean(&self, strategy: Strategy, real_count: usize) -> Option<f64> {
        self.aggregate()
            .into_iter()
            .find(|c| c.strategy == strategy && c.real_count == real_count && c.n > 0)
            .map(|c| c.mean)
    }

    /// Learning curves: one polyline of mean Dice against real count per
    /// strategy.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let stats = self.aggregate();
        let counts: Vec<usize> = {
            let mut c: Vec<usize> = stats.iter().map(|s| s.real_count).collect();
            c.sort_unstable();
            c.dedup();
            c
        };
        let (lo, hi) = (
            *counts.first().unwrap_or(&0) as f64,
            *counts.last().unwrap_or(&1) as f64,
        );
        let sx = |c: usize| {
            if hi > lo {
                pad + (c as f64 - lo) / (hi - lo) * (w - 2.0 * pad)
            } else {
                w / 2.0
            }
        };
        let sy = |d: f64| h - pad - d.clamp(0.0, 1.0) * (h - 2.0 * pad);
        let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"{pad}\" y=\"20\" font-size=\"12\">{} dice vs real count</text>\n",
            self.rows.first().map_or("", |r| r.style.as_str()),
            b = h - pad,
            r = w - pad,
        );
        let mut strategies: Vec<Strategy> = Vec::new();
        for st in &stats {
            if !strategies.contains(&st.strategy) {
                strategies.push(st.strategy);
            }
        }
        for (k, strat) in strategies.iter().enumerate() {
            let pts: Vec<String> = stats
                .iter()
                .filter(|c| c.strategy == *strat && c.n > 0)
                .map(|c| format!("{:.1},{:.1}", sx(c.real_count), sy(c.mean)))
                .collect();
            let color = colors[k % colors.len()];
            writeln!(
                s,
                "<polyline data-strategy=\"{strat}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            )
            .unwrap();
            writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{strat}</text>",
                w - pad - 60.0,
                pad + 14.0 * k as f64
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Training pool of one cell: `real_count` real samples (a seed-dependent
/// prefix of a shuffled train pool, so smaller pools nest in larger ones)
/// plus `synth_ratio·real_count` augmented samples.
pub fn cell_pool(
    data: &BenchData,
    strategy: Strategy,
    real_count: usize,
    synth_ratio: usize,
    seed: u64,
    gen: Option<&Generator>,
) -> Result<Vec<SegSample>> {
    if real_count > data.train.len() {
        return contract(format!(
            "real count {real_count} exceeds the {} training images",
            data.train.len()
        ));
    }
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut seed::rng(seed, "bench.subset", 0));
    let picked = &order[..real_count];
    let real: Vec<SegSample> = picked.iter().map(|&i| data.train[i].clone()).collect();
    let n_aug = synth_ratio * real_count;
    let mut aug_rng = seed::rng(seed, "bench.augment", real_count as u64);
    let augmented = match strategy {
        Strategy::None => Vec::new(),
        Strategy::Geometric(kind) => (0..n_aug)
            .map(|_| {
                let s = &real[aug_rng.random_range(0..real.len())];
                geometric_augment(s, kind, &mut aug_rng)
            })
            .collect::<Result<_>>()?,
        Strategy::Pathogen => {
            let Some(gen) = gen else {
                return contract("pathogen strategy needs trained VAE and diffusion checkpoints");
            };
            let benign: Vec<Tensor> = picked.iter().map(|&i| data.benign[i].clone()).collect();
            pathogen_augment(&benign, &real, gen, n_aug, &mut aug_rng)?
        }
    };
    let mut pool = real;
    pool.extend(augmented);
    Ok(pool)
}

/// Run the full grid. Cell failures become error rows; the run continues.
pub fn run_bench(cfg: &BenchConfig, data: &BenchData, gen: Option<&Generator>) -> Result<BenchReport> {
    if data.test.is_empty() {
        return contract("benchmark test set is empty");
    }
    let test_hash = test_set_hash(&data.test);
    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        for &real_count in &cfg.real_counts {
            for &seed in &cfg.seeds {
                let result = cell_pool(data, strategy, real_count, cfg.synth_ratio, seed, gen)
                    .and_then(|pool| train_seg(&pool, &data.test, &cfg.seg, seed));
                let (dice, status) = match result {
                    Ok((_, d)) => (Some(d), "ok".to_string()),
                    Err(e) => {
                        log::warn!("bench cell {strategy}/{real_count}/{seed} failed: {e}");
                        (None, format!("error: {e}"))
                    }
                };
                log::info!("bench {strategy} n={real_count} seed={seed}: {status} {dice:?}");
                rows.push(BenchRow {
                    style: cfg.style.clone(),
                    strategy,
                    real_count,
                    seed,
                    dice,
                    status,
                });
            }
        }
    }
    Ok(BenchReport { rows, test_hash })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }
}
