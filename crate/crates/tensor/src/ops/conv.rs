use crate::error::{shape_err, Result};
use crate::gemm::{gemm, Mat};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &Geometry, x: &[f32], cols: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, cols: &[f32], x: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `input` is `[N,C,H,W]`, `weight` is `[K,C,kh,kw]`
/// with odd kernel extents, `bias` is `[K]`.
pub fn conv2d<'t>(
    input: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    let xs = input.shape();
    let ws = weight.shape();
    let [n, c, h, w] = xs[..] else {
        return shape_err("conv2d", format!("input must be [N, C, H, W], got {xs:?}"));
    };
    let [k, wc, kh, kw] = ws[..] else {
        return shape_err("conv2d", format!("weight must be [K, C, kh, kw], got {ws:?}"));
    };
    if wc != c {
        return shape_err(
            "conv2d",
            format!("channel dimension: input has C={c}, weight expects C={wc}"),
        );
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return shape_err("conv2d", format!("kernel extents must be odd, got {kh}x{kw}"));
    }
    if stride == 0 {
        return shape_err("conv2d", "stride must be positive");
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return shape_err(
            "conv2d",
            format!("height/width {h}x{w} with pad {pad} smaller than kernel {kh}x{kw}"),
        );
    }
    if let Some(b) = &bias {
        if b.shape() != [k] {
            return shape_err(
                "conv2d",
                format!("bias must be [{k}], got {:?}", b.shape()),
            );
        }
    }
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    };
    let (rows, p) = (g.rows(), g.positions());

    let xv = input.value();
    let wv = weight.value();
    let keep_cols = weight.requires_grad() && input.tape().grad_enabled();
    let mut out = vec![0f32; n * k * p];
    let mut saved_cols: Vec<f32> = if keep_cols && !g.is_pointwise() {
        vec![0f32; n * rows * p]
    } else {
        Vec::new()
    };
    let mut scratch = if g.is_pointwise() || keep_cols {
        Vec::new()
    } else {
        vec![0f32; rows * p]
    };
    for i in 0..n {
        let xi = &xv.data()[i * c * h * w..(i + 1) * c * h * w];
        let cols: &[f32] = if g.is_pointwise() {
            xi
        } else if keep_cols {
            let dst = &mut saved_cols[i * rows * p..(i + 1) * rows * p];
            im2col(&g, xi, dst);
            dst
        } else {
            im2col(&g, xi, &mut scratch);
            &scratch
        };
        gemm(
            Mat::new(wv.data(), k, rows),
            Mat::new(cols, rows, p),
            &mut out[i * k * p..(i + 1) * k * p],
            0.0,
        );
    }
    if let Some(b) = &bias {
        let bv = b.value();
        for (kk, chunk) in out.chunks_mut(p).enumerate() {
            let o = bv.data()[kk % k];
            chunk.iter_mut().for_each(|v| *v += o);
        }
    }
    let out = Tensor::new(&[n, k, g.ho, g.wo], out)?;

    let mut parents = vec![input, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(input.tape().push(out, &parents, move |ctx| {
        let grad = ctx.grad.data();
        let x = ctx.inputs[0];
        let wt = ctx.inputs[1];
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![0f32; n * c * h * w];
            let mut dcols = vec![0f32; rows * p];
            for i in 0..n {
                let gi = &grad[i * k * p..(i + 1) * k * p];
                let dst = &mut gx[i * c * h * w..(i + 1) * c * h * w];
                if g.is_pointwise() {
                    gemm(Mat::new(wt.data(), k, rows).t(), Mat::new(gi, k, p), dst, 0.0);
                } else {
                    gemm(Mat::new(wt.data(), k, rows).t(), Mat::new(gi, k, p), &mut dcols, 0.0);
                    col2im(&g, &dcols, dst);
                }
            }
            Tensor::new(x.shape(), gx).unwrap()
        });
        let gw = ctx.needs[1].then(|| {
            let mut gw = vec![0f32; k * rows];
            let mut scratch = Vec::new();
            for i in 0..n {
                let gi = &grad[i * k * p..(i + 1) * k * p];
                let xi = &x.data()[i * c * h * w..(i + 1) * c * h * w];
                let cols: &[f32] = if g.is_pointwise() {
                    xi
                } else if !saved_cols.is_empty() {
                    &saved_cols[i * rows * p..(i + 1) * rows * p]
                } else {
                    scratch.resize(rows * p, 0.0);
                    im2col(&g, xi, &mut scratch);
                    &scratch
                };
                gemm(
                    Mat::new(gi, k, p),
                    Mat::new(cols, rows, p).t(),
                    &mut gw,
                    if i == 0 { 0.0 } else { 1.0 },
                );
            }
            Tensor::new(wt.shape(), gw).unwrap()
        });
        let mut result = vec![gx, gw];
        if has_bias {
            let gb = ctx.needs[2].then(|| {
                let mut acc = vec![0f64; k];
                for (kk, chunk) in grad.chunks(p).enumerate() {
                    acc[kk % k] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
                Tensor::new(&[k], acc.into_iter().map(|v| v as f32).collect()).unwrap()
            });
            result.push(gb);
        }
        result
    }))
}
