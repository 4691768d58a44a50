//! Random blobs built from unions of rotated ellipses, used for lesion shapes
//! and inpainting regions.

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f32,
    pub cx: f32,
    pub ry: f32,
    pub rx: f32,
    pub theta: f32,
}

impl Ellipse {
    /// Normalized radius at a pixel center: ≤ 1 inside.
    pub fn radius(&self, y: usize, x: usize) -> f32 {
        let (dy, dx) = (y as f32 + 0.5 - self.cy, x as f32 + 0.5 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// Approximate signed distance in pixels, positive inside.
    pub fn depth(&self, y: usize, x: usize) -> f32 {
        (1.0 - self.radius(y, x)) * self.rx.min(self.ry)
    }
}

/// A blob of `parts` ellipses (main body plus satellites) whose area is
/// roughly `area_px`, centered away from the border.
pub fn random_blob<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    area_px: f32,
    parts: usize,
) -> Vec<Ellipse> {
    let parts = parts.max(1);
    // satellites overlap the body, so the body takes most of the area budget
    let body_area = if parts > 1 { 0.75 * area_px } else { area_px };
    let r0 = (body_area / std::f32::consts::PI).sqrt().max(1.0);
    let aspect: f32 = rng.random_range(0.6..1.6);
    let body = Ellipse {
        cy: rng.random_range(0.2..0.8) * h as f32,
        cx: rng.random_range(0.2..0.8) * w as f32,
        ry: r0 / aspect.sqrt(),
        rx: r0 * aspect.sqrt(),
        theta: rng.random_range(0.0..std::f32::consts::PI),
    };
    let mut out = vec![body];
    for _ in 1..parts {
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let dist = rng.random_range(0.4..0.9) * r0;
        let s = rng.random_range(0.4..0.7) * r0;
        let a: f32 = rng.random_range(0.6..1.6);
        out.push(Ellipse {
            cy: body.cy + dist * angle.sin(),
            cx: body.cx + dist * angle.cos(),
            ry: s / a.sqrt(),
            rx: s * a.sqrt(),
            theta: rng.random_range(0.0..std::f32::consts::PI),
        });
    }
    out
}

/// Binary union of the ellipses, row-major `h × w`.
pub fn rasterize(ellipses: &[Ellipse], h: usize, w: usize) -> Vec<f32> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            ellipses.iter().any(|e| e.radius(y, x) <= 1.0) as u8 as f32
        })
        .collect()
}

/// Soft coverage with a 2-px linear ramp across the boundary; `≥ 0.5`
/// exactly where [`rasterize`] is 1.
pub fn soft_alpha(ellipses: &[Ellipse], h: usize, w: usize) -> Vec<f32> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            ellipses
                .iter()
                .map(|e| {
                    if e.radius(y, x) <= 1.0 {
                        (0.5 + e.depth(y, x) / 2.0).clamp(0.5, 1.0)
                    } else {
                        (0.5 + e.depth(y, x) / 2.0).clamp(0.0, 0.499)
                    }
                })
                .fold(0.0, f32::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn soft_alpha_thresholds_to_raster() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = random_blob(&mut rng, 32, 32, 120.0, 3);
            let hard = rasterize(&b, 32, 32);
            let soft = soft_alpha(&b, 32, 32);
            for (h, s) in hard.iter().zip(&soft) {
                assert_eq!(*h == 1.0, *s >= 0.5);
            }
        }
    }
}
