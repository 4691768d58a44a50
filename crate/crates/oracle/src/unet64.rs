//! Double-precision reference forward pass of the denoiser, batch of one,
//! for central differences that f32 cannot resolve. Layout and parameter
//! names follow the checkpoint format; every layer is written out directly.

use std::collections::BTreeMap;

/// Dense `[C, H, W]` (or any shape) array in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    fn chw(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

pub type Params = BTreeMap<String, Arr>;

#[derive(Clone, Debug)]
pub struct UNetSpec {
    pub depth: usize,
    pub attention: bool,
    pub time_embed_dim: usize,
}

fn p<'a>(params: &'a Params, name: &str) -> &'a Arr {
    params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn conv(params: &Params, name: &str, x: &Arr, stride: usize) -> Arr {
    let w = p(params, &format!("{name}.weight"));
    let b = p(params, &format!("{name}.bias"));
    let (cout, cin, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let (c, h, wd) = x.chw();
    assert_eq!(c, cin, "{name}: input channels");
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Arr::zeros(vec![cout, oh, ow]);
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b.data[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = (y * stride + ky) as isize - pad as isize;
                            let sx = (xx * stride + kx) as isize - pad as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += w.data[((o * cin + i) * k + ky) * k + kx]
                                * x.data[(i * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out.data[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

fn linear(params: &Params, name: &str, x: &[f64]) -> Vec<f64> {
    let w = p(params, &format!("{name}.weight"));
    let b = p(params, &format!("{name}.bias"));
    let (dout, din) = (w.shape[0], w.shape[1]);
    (0..dout)
        .map(|o| b.data[o] + (0..din).map(|i| w.data[o * din + i] * x[i]).sum::<f64>())
        .collect()
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_arr(x: &Arr) -> Arr {
    Arr::new(x.shape.clone(), x.data.iter().map(|&v| silu(v)).collect())
}

fn group_norm(params: &Params, name: &str, x: &Arr) -> Arr {
    let gamma = p(params, &format!("{name}.gamma"));
    let beta = p(params, &format!("{name}.beta"));
    let (c, h, w) = x.chw();
    let groups = c.min(8);
    let per = c / groups;
    let len = per * h * w;
    let mut out = x.clone();
    for g in 0..groups {
        let chunk = &x.data[g * len..(g + 1) * len];
        let mean = chunk.iter().sum::<f64>() / len as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let r = 1.0 / (var + 1e-5f32 as f64).sqrt();
        for j in 0..len {
            let ch = g * per + j / (h * w);
            out.data[g * len + j] = (chunk[j] - mean) * r * gamma.data[ch] + beta.data[ch];
        }
    }
    out
}

fn head(params: &Params, name: &str, x: &Arr) -> Arr {
    let h = silu_arr(&group_norm(params, &format!("{name}.norm"), x));
    conv(params, &format!("{name}.conv"), &h, 1)
}

fn add(a: &Arr, b: &Arr) -> Arr {
    assert_eq!(a.shape, b.shape);
    Arr::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

fn res(params: &Params, name: &str, x: &Arr, temb: &[f64]) -> Arr {
    let mut h = head(params, &format!("{name}.in"), x);
    let off = linear(params, &format!("{name}.temb"), temb);
    let (c, hh, w) = h.chw();
    for ch in 0..c {
        for v in &mut h.data[ch * hh * w..(ch + 1) * hh * w] {
            *v += off[ch];
        }
    }
    let h = head(params, &format!("{name}.out"), &h);
    let skip = if params.contains_key(&format!("{name}.skip.weight")) {
        conv(params, &format!("{name}.skip"), x, 1)
    } else {
        x.clone()
    };
    add(&skip, &h)
}

fn matvec(w: &Arr, b: Option<&Arr>, x: &[f64]) -> Vec<f64> {
    let (dout, din) = (w.shape[0], w.shape[1]);
    (0..dout)
        .map(|o| b.map_or(0.0, |b| b.data[o]) + (0..din).map(|i| w.data[o * din + i] * x[i]).sum::<f64>())
        .collect()
}

fn attention(params: &Params, prefix: &str, x: &Arr) -> Arr {
    let name = format!("{prefix}.attn");
    let g = |s: &str| p(params, &format!("{name}.{s}"));
    let (c, h, w) = x.chw();
    let l = h * w;
    let heads = (c / 32).max(1);
    let dh = c / heads;
    let normed = group_norm(params, &format!("{name}.norm"), x);
    let tokens: Vec<Vec<f64>> = (0..l).map(|i| (0..c).map(|ch| normed.data[ch * l + i]).collect()).collect();
    let q: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(g("wq"), Some(g("bq")), t)).collect();
    let k: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(g("wk"), None, t)).collect();
    let v: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(g("wv"), Some(g("bv")), t)).collect();
    let mut merged = vec![vec![0.0; c]; l];
    for hd in 0..heads {
        let r = hd * dh..(hd + 1) * dh;
        for i in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|j| r.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for d in r.clone() {
                merged[i][d] = (0..l).map(|j| e[j] / s * v[j][d]).sum();
            }
        }
    }
    let mut out = x.clone();
    for (i, row) in merged.iter().enumerate() {
        let o = matvec(g("wo"), Some(g("bo")), row);
        for ch in 0..c {
            out.data[ch * l + i] += o[ch];
        }
    }
    out
}

fn upsample(x: &Arr) -> Arr {
    let (c, h, w) = x.chw();
    let mut out = Arr::zeros(vec![c, 2 * h, 2 * w]);
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.data[(ch * 2 * h + y) * 2 * w + xx] = x.data[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn cat_channels(a: &Arr, b: &Arr) -> Arr {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Arr::new(vec![a.shape[0] + b.shape[0], a.shape[1], a.shape[2]], data)
}

fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for k in 0..half {
        let arg = t as f64 * (10000f64).powf(-(k as f64) / half as f64);
        v[k] = arg.sin();
        v[half + k] = arg.cos();
    }
    v
}

/// Noise prediction `[c, h, w]` for `x[2c+1, h, w]` at timestep `t`.
pub fn forward(spec: &UNetSpec, params: &Params, x: &Arr, t: usize) -> Arr {
    let e = time_features(t, spec.time_embed_dim);
    let e: Vec<f64> = linear(params, "unet.time.fc1", &e).into_iter().map(silu).collect();
    let e: Vec<f64> = linear(params, "unet.time.fc2", &e).into_iter().map(silu).collect();
    let mut h = conv(params, "unet.conv_in", x, 1);
    let mut skips = Vec::new();
    for i in 0..spec.depth {
        h = res(params, &format!("unet.down{i}.res"), &h, &e);
        skips.push(h.clone());
        if i + 1 < spec.depth {
            h = conv(params, &format!("unet.down{i}.down"), &h, 2);
        }
    }
    h = res(params, "unet.mid.res1", &h, &e);
    if spec.attention {
        h = attention(params, "unet.mid", &h);
    }
    h = res(params, "unet.mid.res2", &h, &e);
    for i in (0..spec.depth).rev() {
        let skip = skips.pop().expect("one skip per level");
        h = cat_channels(&h, &skip);
        h = res(params, &format!("unet.up{i}.res"), &h, &e);
        if i > 0 {
            h = conv(params, &format!("unet.up{i}.up"), &upsample(&h), 1);
        }
    }
    head(params, "unet.out", &h)
}

/// `Σ forward(x)²`.
pub fn energy(spec: &UNetSpec, params: &Params, x: &Arr, t: usize) -> f64 {
    forward(spec, params, x, t).data.iter().map(|v| v * v).sum()
}

/// Which tensor a probe perturbs.
#[derive(Clone, Debug)]
pub enum Probe {
    Input(usize),
    Param(String, usize),
}

/// Central difference of [`energy`] along one element, step `h`.
pub fn energy_derivative(spec: &UNetSpec, params: &Params, x: &Arr, t: usize, probe: &Probe, h: f64) -> f64 {
    let eval = |delta: f64| {
        let mut ps = params.clone();
        let mut xs = x.clone();
        match probe {
            Probe::Input(i) => xs.data[*i] += delta,
            Probe::Param(name, i) => ps.get_mut(name).expect("probed parameter").data[*i] += delta,
        }
        energy(spec, &ps, &xs, t)
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}
