//! Sectioned `key = value` run configuration checked against a fixed
//! registry. Every key has a default; unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Text,
    IntList,
    TextList,
}

pub struct Entry {
    pub key: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

macro_rules! entries {
    ($($key:literal, $default:literal, $kind:ident, $help:literal;)*) => {
        &[$(Entry { key: $key, default: $default, kind: Kind::$kind, help: $help },)*]
    };
}

pub const REGISTRY: &[Entry] = entries![
    "general.seed", "0", Int, "root seed for every random stream";
    "general.image_size", "32", Int, "image side in pixels";

    "paths.corpus", "", Text, "corpus directory (with manifest.tsv)";
    "paths.vae", "", Text, "VAE checkpoint";
    "paths.diffusion", "", Text, "diffusion checkpoint";
    "paths.out", "", Text, "output directory or file";

    "synth.style", "kpi-like", Text, "kpi-like | tiger-like | ring-like | puma-like";
    "synth.n", "200", Int, "number of images";

    "schedule.steps", "1000", Int, "training timesteps T";
    "schedule.beta_start", "1e-4", Float, "first beta";
    "schedule.beta_end", "0.02", Float, "last beta";

    "vae.width", "32", Int, "first-level channel width";
    "vae.latent_channels", "4", Int, "latent channels";
    "vae.factor", "4", Int, "spatial downsampling factor";
    "vae.lr", "2e-3", Float, "peak learning rate";
    "vae.warmup", "50", Int, "warmup steps";
    "vae.steps", "800", Int, "total steps";
    "vae.batch", "16", Int, "batch size";
    "vae.weight_decay", "1e-4", Float, "AdamW weight decay";
    "vae.beta_kl", "1e-4", Float, "KL weight";
    "vae.calibrate_images", "256", Int, "images used to calibrate the latent scale";
    "vae.checkpoint_every", "200", Int, "steps between checkpoints and sample grids (0 = end only)";

    "diffusion.base_width", "32", Int, "denoiser base width";
    "diffusion.depth", "2", Int, "denoiser levels";
    "diffusion.attention", "true", Bool, "self-attention in the middle block";
    "diffusion.time_embed_dim", "128", Int, "time embedding width";
    "diffusion.lr", "2e-3", Float, "peak learning rate";
    "diffusion.warmup", "100", Int, "warmup steps";
    "diffusion.steps", "1500", Int, "total steps";
    "diffusion.batch", "8", Int, "batch size";
    "diffusion.weight_decay", "1e-4", Float, "AdamW weight decay";
    "diffusion.dropout", "0.1", Float, "condition dropout probability";
    "diffusion.loss_region", "full", Text, "full | benign_half | hole_only";
    "diffusion.train_mode", "all", Text, "all | attention_only";
    "diffusion.mask_min_frac", "0.03", Float, "smallest inner-region fraction";
    "diffusion.mask_max_frac", "0.12", Float, "largest inner-region fraction";
    "diffusion.checkpoint_every", "250", Int, "steps between checkpoints and sample grids (0 = end only)";

    "sample.sampler", "ddim", Text, "ddim | ddpm";
    "sample.steps", "50", Int, "DDIM steps";
    "sample.guidance", "2.0", Float, "classifier-free guidance scale";
    "sample.composite", "false", Bool, "paste generated pixels into the mask only";
    "sample.seed", "0", Int, "sampling seed";

    "inpaint.benign", "", Text, "benign image (PNG)";
    "inpaint.reference", "", Text, "lesion reference image (PNG)";
    "inpaint.mask", "", Text, "target mask (PNG)";

    "eval.real", "", Text, "directory of real images";
    "eval.generated", "", Text, "directory of generated images";
    "eval.feature_version", "fe-v1", Text, "feature extractor tag";

    "bench.real_counts", "8,16,24,32", IntList, "real training pool sizes";
    "bench.synth_ratio", "3", Int, "augmented samples per real sample";
    "bench.strategies", "none,rotation,flip,translation,combine,pathogen", TextList, "augmentation arms";
    "bench.seeds", "0,1,2", IntList, "seeds per cell";
    "bench.seg_base_width", "16", Int, "segmenter base width";
    "bench.seg_steps", "300", Int, "segmenter training steps";
    "bench.seg_batch", "8", Int, "segmenter batch size";
    "bench.seg_lr", "3e-3", Float, "segmenter learning rate";
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: `{value}` is not a valid {kind:?}")]
    BadValue { key: String, value: String, kind: Kind },
    #[error("{path}:{line}: {why}")]
    Syntax { path: String, line: usize, why: String },
    #[error("cannot read config {0}: {1}")]
    Read(String, std::io::Error),
    #[error("`{0}` is required")]
    Missing(String),
}

fn entry(key: &str) -> Option<&'static Entry> {
    REGISTRY.iter().find(|e| e.key == key)
}

fn valid(kind: Kind, v: &str) -> bool {
    let list = |ok: fn(&str) -> bool| v.is_empty() || v.split(',').all(|s| ok(s.trim()));
    match kind {
        Kind::Int => v.parse::<i64>().is_ok(),
        Kind::Float => v.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => matches!(v, "true" | "false"),
        Kind::Text => true,
        Kind::IntList => list(|s| s.parse::<i64>().is_ok()),
        Kind::TextList => list(|s| !s.is_empty()),
    }
}

/// Fully resolved configuration: every registry key with a value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: IndexMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: REGISTRY.iter().map(|e| (e.key, e.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let e = entry(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let value = value.trim();
        if !valid(e.kind, value) {
            return Err(ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                kind: e.kind,
            });
        }
        self.values.insert(e.key, value.to_string());
        Ok(())
    }

    /// Apply a `[section]` / `key = value` document over the current values.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |why: &str| ConfigError::Syntax {
                path: origin.to_string(),
                line: i + 1,
                why: why.to_string(),
            };
            if let Some(rest) = line.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| syntax("unterminated section header"))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
            if section.is_empty() {
                return Err(syntax("key outside of any [section]"));
            }
            self.set(&format!("{section}.{}", k.trim()), v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.display().to_string(), e))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a registry key"))
    }

    pub fn int(&self, key: &str) -> i64 {
        self.get(key).parse().expect("validated int")
    }

    pub fn uint(&self, key: &str) -> Result<usize, ConfigError> {
        usize::try_from(self.int(key)).map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: self.get(key).to_string(),
            kind: Kind::Int,
        })
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        Ok(self.uint(key)? as u64)
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated float")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn uint_list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        self.get(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: self.get(key).to_string(),
                    kind: Kind::IntList,
                })
            })
            .collect()
    }

    pub fn text_list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Non-empty path value.
    pub fn path(&self, key: &str) -> Result<std::path::PathBuf, ConfigError> {
        match self.get(key) {
            "" => Err(ConfigError::Missing(key.to_string())),
            v => Ok(v.into()),
        }
    }

    /// Canonical text: every section and key in registry order.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut current = "";
        for e in REGISTRY {
            let (sec, key) = e.key.split_once('.').expect("dotted key");
            if sec != current {
                if !current.is_empty() {
                    s.push('\n');
                }
                writeln!(s, "[{sec}]").unwrap();
                current = sec;
            }
            writeln!(s, "{key} = {}", self.values[e.key]).unwrap();
        }
        s
    }

    pub fn describe() -> String {
        let mut s = String::new();
        for e in REGISTRY {
            writeln!(s, "{:<28} {:<12} {}", e.key, e.default, e.help).unwrap();
        }
        s
    }
}
