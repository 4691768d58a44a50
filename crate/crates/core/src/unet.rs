//! Time-conditioned ε-prediction UNet over the widened latent grid.
//!
//! Input channels are `[noisy latent (c) | mask (1) | conditioning (c)]`.
//! Each level has one residual block on the way down and one on the way up
//! (fed the concatenated skip); levels are joined by stride-2 convs and
//! nearest upsampling. Self-attention sits in the middle block, at the
//! lowest resolution only. There is no cross-attention.

use std::path::Path;

use lesion_tensor::ops;
use lesion_tensor::{Archive, Bound, ParamStore, Tape, Tensor, Var};

use crate::error::{contract, Error, Result};
use crate::nn;
use crate::seed;
use crate::train::{params_from, params_into};

pub const ATTN_SEGMENT: &str = ".attn.";

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub attention: bool,
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_width: 64,
            depth: 3,
            attention: true,
            time_embed_dim: 128,
        }
    }
}

impl UNetConfig {
    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * (1 << level.min(2))
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width < 8 || self.latent_channels == 0 {
            return contract("unet needs depth ≥ 1, base width ≥ 8 and latent channels ≥ 1");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return contract(format!(
                "time embedding dimension must be even, got {}",
                self.time_embed_dim
            ));
        }
        let lowest = self.width(self.depth - 1);
        if self.attention && lowest % nn::attention_heads(lowest) != 0 {
            return contract("attention width not divisible by its head count");
        }
        Ok(())
    }
}

/// Which parameters an optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    All,
    AttentionOnly,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TrainMode::All),
            "attention_only" => Ok(TrainMode::AttentionOnly),
            _ => contract(format!("unknown train mode `{s}` (all | attention_only)")),
        }
    }
}

pub fn is_attention_param(name: &str) -> bool {
    name.contains(ATTN_SEGMENT)
}

/// Sinusoidal embedding: `sin(t·f_k)` then `cos(t·f_k)`, `f_k = 10000^(−k/half)`.
pub fn time_embed(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return contract(format!("time embedding dimension must be even, got {dim}"));
    }
    let half = dim / 2;
    let mut v = vec![0f32; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        v[k] = arg.sin() as f32;
        v[half + k] = arg.cos() as f32;
    }
    Ok(Tensor::new(&[dim], v)?)
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamStore,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "unet.init", 0);
        let mut p = ParamStore::new();
        let d = config.time_embed_dim;
        let c = config.latent_channels;
        nn::init_linear(&mut p, "unet.time.fc1", d, d, 1.0, &mut rng);
        nn::init_linear(&mut p, "unet.time.fc2", d, d, 1.0, &mut rng);
        nn::init_conv(&mut p, "unet.conv_in", config.in_channels(), config.width(0), 3, 1.0, &mut rng);
        let mut ch = config.width(0);
        for i in 0..config.depth {
            let w = config.width(i);
            nn::init_res(&mut p, &format!("unet.down{i}.res"), ch, w, Some(d), &mut rng);
            ch = w;
            if i + 1 < config.depth {
                nn::init_conv(&mut p, &format!("unet.down{i}.down"), w, w, 3, 1.0, &mut rng);
            }
        }
        nn::init_res(&mut p, "unet.mid.res1", ch, ch, Some(d), &mut rng);
        if config.attention {
            nn::init_attn(&mut p, "unet.mid", ch, &mut rng);
        }
        nn::init_res(&mut p, "unet.mid.res2", ch, ch, Some(d), &mut rng);
        for i in (0..config.depth).rev() {
            let w = config.width(i);
            nn::init_res(&mut p, &format!("unet.up{i}.res"), ch + w, w, Some(d), &mut rng);
            ch = w;
            if i > 0 {
                let next = config.width(i - 1);
                nn::init_conv(&mut p, &format!("unet.up{i}.up"), w, next, 3, 1.0, &mut rng);
                ch = next;
            }
        }
        // small output init keeps the initial prediction near zero
        nn::init_head(&mut p, "unet.out", ch, c, 0.1, &mut rng);
        Ok(Self { config, params: p })
    }

    fn check_input(&self, shape: &[usize], batch: usize) -> Result<()> {
        let cfg = &self.config;
        let [n, ch, h, w] = shape[..] else {
            return contract(format!("unet input must be [N, C, h, w], got {shape:?}"));
        };
        if ch != cfg.in_channels() {
            return contract(format!(
                "unet input channel axis is {ch}, expected {}",
                cfg.in_channels()
            ));
        }
        let m = 1 << (cfg.depth - 1);
        if h % m != 0 || h == 0 {
            return contract(format!("unet input height {h} not divisible by {m}"));
        }
        if w % m != 0 || w == 0 {
            return contract(format!("unet input width {w} not divisible by {m}"));
        }
        if n != batch {
            return contract(format!("unet batch axis is {n} but {batch} timesteps given"));
        }
        Ok(())
    }

    /// `eps_hat[N,c,h,w]` for `x[N,2c+1,h,w]` at per-sample timesteps `t`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, t: &[usize]) -> Result<Var<'t>> {
        self.check_input(&x.shape(), t.len())?;
        let cfg = &self.config;
        let d = cfg.time_embed_dim;
        let tape = x.tape();
        let sin = t
            .iter()
            .map(|&ti| time_embed(ti, d))
            .collect::<Result<Vec<_>>>()?;
        let e = tape.constant(Tensor::stack(&sin)?);
        let e = ops::silu(nn::linear(p, "unet.time.fc1", e)?);
        let e = ops::silu(nn::linear(p, "unet.time.fc2", e)?);
        let mut h = nn::conv(p, "unet.conv_in", x, 1)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            h = nn::res(p, &format!("unet.down{i}.res"), h, Some(e))?;
            skips.push(h);
            if i + 1 < cfg.depth {
                h = nn::conv(p, &format!("unet.down{i}.down"), h, 2)?;
            }
        }
        h = nn::res(p, "unet.mid.res1", h, Some(e))?;
        if cfg.attention {
            h = nn::attn(p, "unet.mid", h)?;
        }
        h = nn::res(p, "unet.mid.res2", h, Some(e))?;
        for i in (0..cfg.depth).rev() {
            let skip = skips.pop().expect("one skip per level");
            h = ops::concat(&[h, skip], 1)?;
            h = nn::res(p, &format!("unet.up{i}.res"), h, Some(e))?;
            if i > 0 {
                h = nn::up(p, &format!("unet.up{i}.up"), h)?;
            }
        }
        Ok(nn::head(p, "unet.out", h)?)
    }

    /// Inference on a batch `[N,2c+1,h,w]`.
    pub fn predict_batch(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape, |_| false);
        let out = self.forward(&p, tape.constant(x.clone()), t)?;
        Ok((*out.value()).clone())
    }

    /// Inference on one `[2c+1,h,w]` input.
    pub fn predict(&self, z_in: &Tensor, t: usize) -> Result<Tensor> {
        let s = z_in.shape();
        if s.len() != 3 {
            return contract(format!("unet input must be [C, h, w], got {s:?}"));
        }
        let out = self.predict_batch(&z_in.clone().reshape(&[1, s[0], s[1], s[2]])?, &[t])?;
        let os = out.shape().to_vec();
        Ok(out.reshape(&os[1..])?)
    }

    /// Parameter names updated in `mode`.
    pub fn trainable_params(&self, mode: TrainMode) -> Vec<String> {
        self.params
            .names()
            .filter(|n| mode == TrainMode::All || is_attention_param(n))
            .map(str::to_string)
            .collect()
    }

    pub fn save_into(&self, a: &mut Archive) {
        params_into(&self.params, a);
        let c = &self.config;
        a.insert("meta.unet.latent_channels", Tensor::scalar(c.latent_channels as f32));
        a.insert("meta.unet.base_width", Tensor::scalar(c.base_width as f32));
        a.insert("meta.unet.depth", Tensor::scalar(c.depth as f32));
        a.insert("meta.unet.attention", Tensor::scalar(c.attention as u8 as f32));
        a.insert("meta.unet.time_embed_dim", Tensor::scalar(c.time_embed_dim as f32));
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config = UNetConfig {
            latent_channels: a.scalar("meta.unet.latent_channels")? as usize,
            base_width: a.scalar("meta.unet.base_width")? as usize,
            depth: a.scalar("meta.unet.depth")? as usize,
            attention: a.scalar("meta.unet.attention")? != 0.0,
            time_embed_dim: a.scalar("meta.unet.time_embed_dim")? as usize,
        };
        let reference = UNet::new(config.clone(), 0)?;
        let params = params_from(a, "unet.");
        for (name, t) in reference.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return contract(format!("unet checkpoint entry `{name}` has the wrong shape"));
            }
        }
        Ok(Self { config, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embed_at_zero() {
        let e = time_embed(0, 8).unwrap();
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
        assert!(time_embed(3, 7).is_err());
    }
}
