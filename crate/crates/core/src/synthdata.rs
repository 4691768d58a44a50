//! Procedural tissue-like texture corpora with lesion masks, and the
//! manifest that records them.
//!
//! Backgrounds are multi-octave value noise mapped between two palette
//! anchors. Lesions are ellipse-union blobs filled with a finer texture and
//! blended in with a 2-px soft edge; the ground-truth mask is the blend alpha
//! thresholded at 0.5.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lesion_tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;

use crate::blob;
use crate::error::{contract, io_err, Error, Result};
use crate::imageio;
use crate::seed::{self, Rng as SeedRng};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StyleId {
    Kpi,
    Tiger,
    Ring,
    Puma,
}

impl StyleId {
    pub const ALL: [StyleId; 4] = [StyleId::Kpi, StyleId::Tiger, StyleId::Ring, StyleId::Puma];

    pub fn name(self) -> &'static str {
        match self {
            StyleId::Kpi => "kpi-like",
            StyleId::Tiger => "tiger-like",
            StyleId::Ring => "ring-like",
            StyleId::Puma => "puma-like",
        }
    }
}

impl fmt::Display for StyleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StyleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StyleId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "unknown style `{s}` (expected one of kpi-like, tiger-like, ring-like, puma-like)"
                ))
            })
    }
}

type Rgb = [f32; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStyle {
    pub id: StyleId,
    pub background: [Rgb; 2],
    pub octaves: usize,
    /// Background noise lattice spacing in pixels.
    pub cell_px: f32,
    pub lesion: [Rgb; 2],
    /// Lesion texture frequency relative to the background.
    pub lesion_freq: f32,
    pub lesion_count: (usize, usize),
    pub area_frac: (f32, f32),
}

fn mean_rgb(p: &[Rgb; 2]) -> Rgb {
    [0, 1, 2].map(|c| 0.5 * (p[0][c] + p[1][c]))
}

fn rgb_dist(a: Rgb, b: Rgb) -> f32 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f32>().sqrt()
}

impl CorpusStyle {
    pub fn preset(id: StyleId) -> Self {
        let (background, lesion, lesion_freq, lesion_count, area_frac) = match id {
            StyleId::Kpi => (
                [[0.94, 0.78, 0.85], [0.78, 0.55, 0.70]],
                [[0.42, 0.20, 0.52], [0.62, 0.38, 0.70]],
                2.0,
                (1, 2),
                (0.05, 0.20),
            ),
            StyleId::Tiger => (
                [[0.96, 0.88, 0.90], [0.80, 0.62, 0.72]],
                [[0.30, 0.14, 0.36], [0.52, 0.26, 0.50]],
                2.5,
                (1, 3),
                (0.08, 0.25),
            ),
            StyleId::Ring => (
                [[0.90, 0.84, 0.93], [0.66, 0.60, 0.82]],
                [[0.78, 0.30, 0.38], [0.94, 0.52, 0.52]],
                1.5,
                (1, 2),
                (0.05, 0.18),
            ),
            StyleId::Puma => (
                [[0.88, 0.74, 0.74], [0.64, 0.44, 0.52]],
                [[0.18, 0.20, 0.46], [0.38, 0.36, 0.66]],
                3.0,
                (1, 3),
                (0.05, 0.20),
            ),
        };
        Self {
            id,
            background,
            octaves: 3,
            cell_px: 10.0,
            lesion,
            lesion_freq,
            lesion_count,
            area_frac,
        }
    }

    /// The same style with no lesions.
    pub fn benign(&self) -> Self {
        Self {
            lesion_count: (0, 0),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = rgb_dist(mean_rgb(&self.background), mean_rgb(&self.lesion));
        if d < 0.15 {
            return contract(format!(
                "style {}: lesion and background palettes only {d:.3} apart (need ≥ 0.15)",
                self.id
            ));
        }
        let (lo, hi) = self.area_frac;
        if !(0.0 < lo && lo <= hi && hi < 0.9) || self.lesion_count.0 > self.lesion_count.1 {
            return contract(format!("style {}: invalid lesion ranges", self.id));
        }
        Ok(())
    }
}

/// Multi-octave value noise in `[0,1]` with lattice spacing `cell` pixels.
pub fn value_noise<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    cell: f32,
    octaves: usize,
) -> Vec<f32> {
    let mut acc = vec![0f32; h * w];
    let mut amp_total = 0.0;
    for o in 0..octaves.max(1) {
        let c = (cell / (1 << o) as f32).max(1.0);
        let amp = 0.5f32.powi(o as i32);
        amp_total += amp;
        let (gh, gw) = ((h as f32 / c) as usize + 3, (w as f32 / c) as usize + 3);
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
        let (oy, ox): (f32, f32) = (rng.random(), rng.random());
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        for y in 0..h {
            let fy = y as f32 / c + oy;
            let (iy, ty) = (fy as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f32 / c + ox;
                let (ix, tx) = (fx as usize, smooth(fx.fract()));
                let v = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
                let bot = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
                acc[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    // stretch the narrowed sum back over the unit range
    acc.iter()
        .map(|&v| (0.5 + 2.0 * (v / amp_total - 0.5)).clamp(0.0, 1.0))
        .collect()
}

fn paint(noise: &[f32], palette: &[Rgb; 2], stain: Rgb, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; 3 * h * w];
    for c in 0..3 {
        for (i, &t) in noise.iter().enumerate() {
            let v = palette[0][c] * (1.0 - t) + palette[1][c] * t;
            out[c * h * w + i] = (v * stain[c]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Mean RGB of the pixels where `mask == on`; `None` when there are none.
fn masked_mean(img: &[f32], mask: &[f32], on: bool, hw: usize) -> Option<Rgb> {
    let n = mask.iter().filter(|&&m| (m >= 0.5) == on).count();
    (n > 0).then(|| {
        [0, 1, 2].map(|c| {
            (0..hw)
                .filter(|&i| (mask[i] >= 0.5) == on)
                .map(|i| img[c * hw + i])
                .sum::<f32>()
                / n as f32
        })
    })
}

/// One image `[3,H,W]` and its lesion mask `[H,W]`.
pub fn gen_image<R: Rng + ?Sized>(
    rng: &mut R,
    style: &CorpusStyle,
    h: usize,
    w: usize,
) -> Result<(Tensor, Tensor)> {
    if h < 32 || w < 32 {
        return contract(format!("gen_image needs H, W ≥ 32, got {h}×{w}"));
    }
    style.validate()?;
    let hw = h * w;
    for _ in 0..64 {
        let stain: Rgb = [0, 1, 2].map(|_| 1.0 + rng.random_range(-0.05..0.05));
        let bg_noise = value_noise(rng, h, w, style.cell_px, style.octaves);
        let mut img = paint(&bg_noise, &style.background, stain, h, w);
        let (lo, hi) = style.lesion_count;
        let count = if hi == 0 { 0 } else { rng.random_range(lo..=hi) };
        if count == 0 {
            return Ok((Tensor::new(&[3, h, w], img)?, Tensor::zeros(&[h, w])));
        }
        let Some(ellipses) = lesion_layout(rng, style, count, h, w) else {
            continue;
        };
        let alpha = blob::soft_alpha(&ellipses, h, w);
        let lesion_noise =
            value_noise(rng, h, w, style.cell_px / style.lesion_freq, style.octaves.min(2));
        let lesion = paint(&lesion_noise, &style.lesion, stain, h, w);
        for c in 0..3 {
            for i in 0..hw {
                let a = alpha[i];
                img[c * hw + i] = img[c * hw + i] * (1.0 - a) + lesion[c * hw + i] * a;
            }
        }
        let mask: Vec<f32> = alpha.iter().map(|&a| (a >= 0.5) as u8 as f32).collect();
        // learnability guard
        if let (Some(l), Some(b)) = (
            masked_mean(&img, &mask, true, hw),
            masked_mean(&img, &mask, false, hw),
        ) {
            if rgb_dist(l, b) < 0.1 {
                continue;
            }
        }
        return Ok((Tensor::new(&[3, h, w], img)?, Tensor::new(&[h, w], mask)?));
    }
    contract(format!("style {}: could not place lesions within the area range", style.id))
}

/// Ellipse sets for `count` lesions whose hard union covers a fraction of
/// the image inside the style's area range.
fn lesion_layout<R: Rng + ?Sized>(
    rng: &mut R,
    style: &CorpusStyle,
    count: usize,
    h: usize,
    w: usize,
) -> Option<Vec<blob::Ellipse>> {
    let (lo, hi) = style.area_frac;
    for _ in 0..200 {
        let target = rng.random_range(lo..=hi) * (h * w) as f32;
        let mut all = Vec::new();
        for _ in 0..count {
            let parts = rng.random_range(1..=3);
            all.extend(blob::random_blob(rng, h, w, target / count as f32, parts));
        }
        let frac = blob::rasterize(&all, h, w).iter().sum::<f32>() / (h * w) as f32;
        if (lo..=hi).contains(&frac) {
            return Some(all);
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub style: StyleId,
    pub seed: u64,
}

/// Records plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

/// Number of test records for a corpus of `n`: `round(0.2·n)`.
pub fn test_count(n: usize) -> usize {
    (n as f64 * 0.2).round() as usize
}

/// Test membership for indices `0..n`: the `test_count(n)` indices with the
/// smallest `derive(base_seed, "split", i)` hash.
pub fn split_assignment(base_seed: u64, n: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (seed::derive(base_seed, "split", i as u64), i));
    let mut out = vec![Split::Train; n];
    for &i in &order[..test_count(n)] {
        out[i] = Split::Test;
    }
    out
}

pub fn image_seed(base_seed: u64, index: usize) -> u64 {
    seed::derive(base_seed, "corpus.image", index as u64)
}

/// Generate one corpus image from its recorded seed.
pub fn gen_from_seed(style: &CorpusStyle, seed: u64, size: usize) -> Result<(Tensor, Tensor)> {
    let mut rng = SeedRng::seed_from_u64(seed);
    gen_image(&mut rng, style, size, size)
}

pub fn build_corpus(
    style: &CorpusStyle,
    n_images: usize,
    base_seed: u64,
    size: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_images < 10 {
        return contract(format!("corpus needs at least 10 images, got {n_images}"));
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let splits = split_assignment(base_seed, n_images);
    let mut records = Vec::with_capacity(n_images);
    for (i, split) in splits.into_iter().enumerate() {
        let seed = image_seed(base_seed, i);
        let (img, mask) = gen_from_seed(style, seed, size)?;
        let rec = Record {
            image: PathBuf::from(format!("images/{i:05}.png")),
            mask: PathBuf::from(format!("masks/{i:05}.png")),
            split,
            style: style.id,
            seed,
        };
        imageio::save_rgb(&img, &out_dir.join(&rec.image))?;
        imageio::save_mask(&mask, &out_dir.join(&rec.mask))?;
        records.push(rec);
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    pub fn to_tsv(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    r.image.display(),
                    r.mask.display(),
                    r.split.name(),
                    r.style,
                    r.seed
                )
            })
            .collect()
    }

    pub fn save(&self) -> Result<()> {
        let p = self.path();
        fs::write(&p, self.to_tsv()).map_err(io_err(&p))
    }

    /// Load `manifest.tsv` from a corpus directory (or the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        };
        if !file.exists() {
            return Err(Error::MissingArtifact {
                path: file,
                what: "corpus manifest".into(),
            });
        }
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        let bad = |line: usize, why: &str| Error::Load {
            path: file.clone(),
            detail: format!("line {line}: {why}"),
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 tab-separated fields"));
            }
            let split = match f[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(bad(i + 1, &format!("unknown split `{other}`"))),
            };
            records.push(Record {
                image: f[0].into(),
                mask: f[1].into(),
                split,
                style: f[3].parse().map_err(|e: Error| bad(i + 1, &e.to_string()))?,
                seed: f[4].parse().map_err(|_| bad(i + 1, "seed is not an integer"))?,
            });
        }
        if records.is_empty() {
            return Err(bad(0, "manifest has no records"));
        }
        Ok(Self {
            root: file.parent().unwrap_or(Path::new(".")).to_path_buf(),
            records,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Load image/mask pairs of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<(Tensor, Tensor)>> {
        self.split(split)
            .map(|r| {
                Ok((
                    imageio::load_rgb(&self.root.join(&r.image))?,
                    imageio::load_mask(&self.root.join(&r.mask))?,
                ))
            })
            .collect()
    }

    pub fn load_all(&self) -> Result<Vec<(Tensor, Tensor)>> {
        self.records
            .iter()
            .map(|r| {
                Ok((
                    imageio::load_rgb(&self.root.join(&r.image))?,
                    imageio::load_mask(&self.root.join(&r.mask))?,
                ))
            })
            .collect()
    }
}
