//! Deliberately plain implementations: explicit loops, f64 throughout,
//! written straight from the formulas.

/// `splitmix64` stream used to draw oracle inputs.
pub struct Stream(u64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.unit().max(1e-300);
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

pub fn kernel(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    for k in 0..u.len() {
        dot += u[k] * v[k];
    }
    (dot / u.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic polynomial kernel, by double loops.
pub fn kid(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mut xx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                xx += kernel(&x[i], &x[j]);
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                yy += kernel(&y[i], &y[j]);
            }
        }
    }
    let mut xy = 0.0;
    for xi in x {
        for yj in y {
            xy += kernel(xi, yj);
        }
    }
    xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
}

/// Per-pixel dilation: a pixel is set when any set pixel lies within
/// Chebyshev distance `delta`.
pub fn dilate(mask: &[Vec<bool>], delta: usize) -> Vec<Vec<bool>> {
    let h = mask.len();
    let w = mask.first().map_or(0, Vec::len);
    let d = delta as i64;
    let mut out = vec![vec![false; w]; h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut hit = false;
            for qy in (y - d)..=(y + d) {
                for qx in (x - d)..=(x + d) {
                    if qy >= 0 && qx >= 0 && qy < h as i64 && qx < w as i64 && mask[qy as usize][qx as usize] {
                        hit = true;
                    }
                }
            }
            out[y as usize][x as usize] = hit;
        }
    }
    out
}

/// Running products `ᾱ_t = Π_{s≤t} (1 − β_s)`.
pub fn alpha_bars(betas: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut prod = 1.0;
    for b in betas {
        prod *= 1.0 - b;
        out.push(prod);
    }
    out
}

/// One ancestral step at 1-based `t` for a scalar latent; no noise at t = 1.
pub fn ddpm_step(z: f64, eps: f64, t: usize, betas: &[f64], noise: f64) -> f64 {
    let ab = alpha_bars(betas);
    let beta = betas[t - 1];
    let alpha = 1.0 - beta;
    let abar = ab[t - 1];
    let mean = (z - beta / (1.0 - abar).sqrt() * eps) / alpha.sqrt();
    if t == 1 {
        return mean;
    }
    let abar_prev = ab[t - 2];
    let var = (1.0 - abar_prev) / (1.0 - abar) * beta;
    mean + var.sqrt() * noise
}

/// Deterministic DDIM jump from `t` to `t_prev` (0 means the clean end).
pub fn ddim_step(z: f64, eps: f64, t: usize, t_prev: usize, betas: &[f64]) -> f64 {
    let ab = alpha_bars(betas);
    let a_t = ab[t - 1];
    let a_prev = if t_prev == 0 { 1.0 } else { ab[t_prev - 1] };
    let z0 = (z - (1.0 - a_t).sqrt() * eps) / a_t.sqrt();
    a_prev.sqrt() * z0 + (1.0 - a_prev).sqrt() * eps
}

/// Central difference of `f` at `x`.
pub fn derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Principal square root of a symmetric positive-definite matrix by the
/// Denman–Beavers iteration.
pub fn matrix_sqrt(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut y = a.to_vec();
    let mut z = identity(n);
    for _ in 0..100 {
        let yi = inverse(&y);
        let zi = inverse(&z);
        let y_next = average(&y, &zi);
        let z_next = average(&z, &yi);
        let change = max_abs_diff(&y_next, &y);
        y = y_next;
        z = z_next;
        if change < 1e-15 {
            break;
        }
    }
    y
}

pub fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

fn average(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| 0.5 * (x + y)).collect())
        .collect()
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| (i == j) as u8 as f64));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                for k in 0..2 * n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn trace(a: &[Vec<f64>]) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let ab = alpha_bars(&[0.1, 0.2]);
        assert!((ab[0] - 0.9).abs() < 1e-15 && (ab[1] - 0.72).abs() < 1e-15);
        assert_eq!(kernel(&[1.0, 0.0], &[1.0, 0.0]), 3.375);
        let s = matrix_sqrt(&[vec![4.0, 0.0], vec![0.0, 9.0]]);
        assert!((s[0][0] - 2.0).abs() < 1e-12 && (s[1][1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dilation_of_a_point() {
        let mut m = vec![vec![false; 7]; 7];
        m[3][3] = true;
        let d = dilate(&m, 2);
        let count = d.iter().flatten().filter(|&&b| b).count();
        assert_eq!(count, 25);
        assert!(!d[0][3] && d[1][3]);
    }
}
