//! Generative-quality metrics over features of a fixed random conv net:
//! Fréchet distance between fitted Gaussians and unbiased polynomial-kernel
//! MMD² (KID). All d×d algebra is f64.

use lesion_tensor::ops;
use lesion_tensor::{init_uniform, Tape, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{contract, Result};
use crate::seed;

pub const FEATURE_DIM: usize = 64;
pub const DEFAULT_VERSION: &str = "fe-v1";

/// Untrained three-stage conv net whose weights depend only on its version tag.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub version: String,
    stages: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    pub fn new(version: &str) -> Self {
        let mut rng = seed::rng(seed::fnv1a(version), "features", 0);
        let widths = [3, 16, 32, FEATURE_DIM];
        let stages = widths
            .windows(2)
            .map(|w| {
                let weight = init_uniform(&[w[1], w[0], 3, 3], w[0] * 9, 1.0, &mut rng);
                let bias = Tensor::rand_uniform(&[w[1]], -0.1, 0.1, &mut rng);
                (weight, bias)
            })
            .collect();
        Self {
            version: version.to_string(),
            stages,
        }
    }

    /// Features `[n, 64]` for a batch `[n,3,H,W]`.
    fn batch(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let mut h = tape.constant(x.clone());
        for (w, b) in &self.stages {
            h = ops::silu(ops::conv2d(h, tape.constant(w.clone()), Some(tape.constant(b.clone())), 2, 1)?);
        }
        let s = h.shape();
        let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
        let v = h.value();
        Ok(Tensor::from_fn(&[n, c], |i| {
            v.data()[i * inner..(i + 1) * inner].iter().sum::<f32>() / inner as f32
        }))
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_VERSION)
    }
}

/// Feature matrix `[n, d]`, rows in input order.
pub fn extract_features(images: &[Tensor], fe: &FeatureExtractor) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return contract("extract_features needs at least one image");
    };
    if first.rank() != 3 || first.dim(0) != 3 {
        return contract(format!("expected [3, H, W] images, got {:?}", first.shape()));
    }
    if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
        return contract(format!(
            "mixed resolutions: {:?} and {:?}",
            first.shape(),
            bad.shape()
        ));
    }
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        rows.push(fe.batch(&Tensor::stack(chunk)?)?);
    }
    Ok(Tensor::concat(&rows.iter().collect::<Vec<_>>(), 0)?)
}

fn to_matrix(f: &Tensor) -> Result<DMatrix<f64>> {
    let [n, d] = f.shape()[..] else {
        return contract(format!("features must be [n, d], got {:?}", f.shape()));
    };
    Ok(DMatrix::from_row_iterator(n, d, f.data().iter().map(|&v| v as f64)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

/// Column means and unbiased covariance plus `eps_reg·I`; exactly symmetric.
pub fn fit_gaussian(features: &Tensor, eps_reg: f64) -> Result<GaussianStats> {
    let x = to_matrix(features)?;
    let (n, d) = x.shape();
    if n < 2 {
        return contract(format!("fit_gaussian needs n ≥ 2, got {n}"));
    }
    let mu = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
    let mut sigma = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let s: f64 = (0..n).map(|r| (x[(r, i)] - mu[i]) * (x[(r, j)] - mu[j])).sum();
            let v = s / (n - 1) as f64;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
        sigma[(i, i)] += eps_reg;
    }
    Ok(GaussianStats { mu, sigma, n })
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return contract("psd_sqrt needs a square matrix");
    }
    let asym = (a - a.transpose()).abs().max();
    if asym > 1e-8 {
        return contract(format!("psd_sqrt: matrix asymmetric by {asym:e}"));
    }
    let eig = SymmetricEigen::new(a.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2·(Σa^½ Σb Σa^½)^½)`, clamped at 0.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mu.len() != b.mu.len() {
        return contract(format!(
            "fid: dimension mismatch ({} vs {})",
            a.mu.len(),
            b.mu.len()
        ));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let ra = psd_sqrt(&a.sigma)?;
    let m = &ra * &b.sigma * &ra;
    let cross = psd_sqrt(&((&m + m.transpose()) * 0.5))?;
    let v = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kid {
    pub raw: f64,
    pub x1000: f64,
}

/// `(uᵀv/d + 1)³`.
pub fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let d = u.len() as f64;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Sum that does not depend on the order of `v`.
fn order_free_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Unbiased MMD² with the cubic polynomial kernel. The cross term is summed
/// order-independently so `kid(x, y) == kid(y, x)` exactly.
pub fn kid(x: &Tensor, y: &Tensor) -> Result<Kid> {
    let (xm, ym) = (to_matrix(x)?, to_matrix(y)?);
    let (m, n) = (xm.nrows(), ym.nrows());
    if m < 2 || n < 2 {
        return contract(format!("kid needs at least 2 samples per set, got {m} and {n}"));
    }
    if xm.ncols() != ym.ncols() {
        return contract("kid: feature dimensions differ");
    }
    let d = xm.ncols() as f64;
    let cube = |g: DMatrix<f64>| g.map(|v| (v / d + 1.0).powi(3));
    let kxx = cube(&xm * xm.transpose());
    let kyy = cube(&ym * ym.transpose());
    let kxy = cube(&xm * ym.transpose());
    let off_diag = |k: &DMatrix<f64>| k.sum() - k.trace();
    let txx = off_diag(&kxx) / (m * (m - 1)) as f64;
    let tyy = off_diag(&kyy) / (n * (n - 1)) as f64;
    let txy = order_free_sum(kxy.iter().copied().collect()) * 2.0 / (m * n) as f64;
    let raw = (txx + tyy) - txy;
    Ok(Kid {
        raw,
        x1000: raw * 1000.0,
    })
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub set_a: String,
    pub set_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub value: f64,
    pub value_x1000: Option<f64>,
}

pub const METRICS_HEADER: &str = "metric,set_a,set_b,n_a,n_b,value,value_x1000";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let x = r.value_x1000.map(|v| format!("{v:e}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{:e},{}\n",
            r.metric, r.set_a, r.set_b, r.n_a, r.n_b, r.value, x
        ));
    }
    s
}

/// FID and KID rows comparing two image sets.
pub fn compare_sets(
    a: &[Tensor],
    b: &[Tensor],
    names: (&str, &str),
    fe: &FeatureExtractor,
) -> Result<Vec<MetricRow>> {
    let fa = extract_features(a, fe)?;
    let fb = extract_features(b, fe)?;
    let f = fid(&fit_gaussian(&fa, 1e-6)?, &fit_gaussian(&fb, 1e-6)?)?;
    let k = kid(&fa, &fb)?;
    let row = |metric, value, x| MetricRow {
        metric,
        set_a: names.0.to_string(),
        set_b: names.1.to_string(),
        n_a: a.len(),
        n_b: b.len(),
        value,
        value_x1000: x,
    };
    Ok(vec![row("fid", f, None), row("kid", k.raw, Some(k.x1000))])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_hand_value() {
        assert_eq!(poly_kernel(&[1.0, 0.0], &[1.0, 0.0]), 3.375);
    }

    #[test]
    fn diag_sqrt() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = psd_sqrt(&a).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12 && (s[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-12);
    }
}
