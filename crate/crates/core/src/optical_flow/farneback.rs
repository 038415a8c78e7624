use serde::{Deserialize, Serialize};

use super::{check_same_size, FlowField, FlowKind};
use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FarnebackParams {
    /// Gaussian applicability scale of the quadratic fit.
    pub sigma_expansion: f64,
    /// Side of the box over which displacement constraints are pooled.
    pub avg_window: usize,
    /// Warping refinements.
    pub iterations: usize,
    /// Pixels with `|det A|` below this are invalid.
    pub min_det: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        FarnebackParams {
            sigma_expansion: 1.5,
            avg_window: 15,
            iterations: 3,
            min_det: 1e-9,
        }
    }
}

/// Per-pixel quadratic model `f(x) ~ x^T A x + b^T x + c`.
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub width: usize,
    pub height: usize,
    /// `A` as (a11, a12, a22).
    pub a: Vec<[f64; 3]>,
    pub b: Vec<[f64; 2]>,
    pub c: Vec<f64>,
}

impl PolyExpansion {
    fn sample(&self, x: f64, y: f64) -> ([f64; 3], [f64; 2]) {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let idx = |xx: usize, yy: usize| yy * self.width + xx;
        let (i00, i10, i01, i11) = (idx(x0, y0), idx(x1, y0), idx(x0, y1), idx(x1, y1));
        let lerp = |v00: f64, v10: f64, v01: f64, v11: f64| {
            let top = v00 + fx * (v10 - v00);
            let bottom = v01 + fx * (v11 - v01);
            top + fy * (bottom - top)
        };
        let mut a = [0.0; 3];
        for (k, slot) in a.iter_mut().enumerate() {
            *slot = lerp(self.a[i00][k], self.a[i10][k], self.a[i01][k], self.a[i11][k]);
        }
        let mut b = [0.0; 2];
        for (k, slot) in b.iter_mut().enumerate() {
            *slot = lerp(self.b[i00][k], self.b[i10][k], self.b[i01][k], self.b[i11][k]);
        }
        (a, b)
    }
}

fn invert_spd(m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    // Gauss-Jordan with partial pivoting; the Gram matrix is well conditioned.
    let mut a = m;
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for k in 0..6 {
            a[col][k] /= p;
            inv[col][k] /= p;
        }
        for r in 0..6 {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in 0..6 {
                        a[r][k] -= f * a[col][k];
                        inv[r][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    inv
}

/// Gaussian-weighted least-squares quadratic fit around every pixel.
///
/// Basis is `{1, x, y, x^2, y^2, xy}` over a `(2r+1)^2` neighborhood with
/// `r = round(2 sigma)`; samples beyond the border are clamped.
pub fn polynomial_expansion(img: &GrayImage, sigma: f64) -> PolyExpansion {
    let radius = (2.0 * sigma).round().max(1.0) as i64;
    let mut offsets = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (fx, fy) = (dx as f64, dy as f64);
            let w = (-(fx * fx + fy * fy) / (2.0 * sigma * sigma)).exp();
            offsets.push((dx, dy, w, [1.0, fx, fy, fx * fx, fy * fy, fx * fy]));
        }
    }
    let mut gram = [[0.0; 6]; 6];
    for (_, _, w, basis) in &offsets {
        for i in 0..6 {
            for j in 0..6 {
                gram[i][j] += w * basis[i] * basis[j];
            }
        }
    }
    let inv = invert_spd(gram);

    let (w, h) = (img.width, img.height);
    let mut out = PolyExpansion {
        width: w,
        height: h,
        a: Vec::with_capacity(w * h),
        b: Vec::with_capacity(w * h),
        c: Vec::with_capacity(w * h),
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut r = [0.0; 6];
            for (dx, dy, wt, basis) in &offsets {
                let sx = (x + dx).clamp(0, w as i64 - 1) as usize;
                let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                let f = img.get(sx, sy) as f64 * wt;
                for k in 0..6 {
                    r[k] += basis[k] * f;
                }
            }
            let mut coef = [0.0; 6];
            for (i, c) in coef.iter_mut().enumerate() {
                *c = (0..6).map(|j| inv[i][j] * r[j]).sum();
            }
            out.c.push(coef[0]);
            out.b.push([coef[1], coef[2]]);
            out.a.push([coef[3], coef[5] / 2.0, coef[4]]);
        }
    }
    out
}

/// Separable box mean with a window clipped at the borders.
fn box_mean(data: &[f64], w: usize, h: usize, side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        let mut prefix = vec![0.0; w + 1];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x];
        }
        for x in 0..w {
            let lo = x.saturating_sub(half);
            let hi = (x + half).min(w - 1);
            tmp[y * w + x] = (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64;
        }
    }
    let mut out = vec![0.0; w * h];
    let mut prefix = vec![0.0; h + 1];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + tmp[y * w + x];
        }
        for y in 0..h {
            let lo = y.saturating_sub(half);
            let hi = (y + half).min(h - 1);
            out[y * w + x] = (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64;
        }
    }
    out
}

/// Two-frame dense flow from polynomial expansion.
///
/// With both frames expanded, each pixel contributes the constraint
/// `A d = delta_b`, where `A` is the mean of the two `A` fields and
/// `delta_b = -(b2 - b1) / 2 + A d_prev`. Constraints are pooled by a box mean
/// over `avg_window` (least squares on `A^T A`, `A^T delta_b`) and the
/// second frame's expansion is re-sampled at the current estimate each iteration.
pub fn farneback_dense(prev: &GrayImage, next: &GrayImage, params: &FarnebackParams) -> Result<FlowField> {
    check_same_size(prev, next)?;
    let (w, h) = (prev.width, prev.height);
    if w < 16 || h < 16 {
        return Err(Error::Size(format!("dense flow needs at least 16x16, found {w}x{h}")));
    }
    let e1 = polynomial_expansion(prev, params.sigma_expansion);
    let e2 = polynomial_expansion(next, params.sigma_expansion);
    let n = w * h;
    let mut flow = vec![(0.0f64, 0.0f64); n];
    let mut valid = vec![false; n];

    for _ in 0..params.iterations.max(1) {
        let mut g11 = vec![0.0; n];
        let mut g12 = vec![0.0; n];
        let mut g22 = vec![0.0; n];
        let mut h1 = vec![0.0; n];
        let mut h2 = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (du, dv) = flow[i];
                let (a2, b2) = e2.sample(x as f64 + du, y as f64 + dv);
                let a1 = e1.a[i];
                let b1 = e1.b[i];
                let a = [(a1[0] + a2[0]) / 2.0, (a1[1] + a2[1]) / 2.0, (a1[2] + a2[2]) / 2.0];
                valid[i] = (a[0] * a[2] - a[1] * a[1]).abs() >= params.min_det;
                let db = [
                    -0.5 * (b2[0] - b1[0]) + a[0] * du + a[1] * dv,
                    -0.5 * (b2[1] - b1[1]) + a[1] * du + a[2] * dv,
                ];
                // A is symmetric, so A^T A = A^2.
                g11[i] = a[0] * a[0] + a[1] * a[1];
                g12[i] = a[0] * a[1] + a[1] * a[2];
                g22[i] = a[1] * a[1] + a[2] * a[2];
                h1[i] = a[0] * db[0] + a[1] * db[1];
                h2[i] = a[1] * db[0] + a[2] * db[1];
            }
        }
        let side = params.avg_window.max(1);
        let (g11, g12, g22) = (box_mean(&g11, w, h, side), box_mean(&g12, w, h, side), box_mean(&g22, w, h, side));
        let (h1, h2) = (box_mean(&h1, w, h, side), box_mean(&h2, w, h, side));
        for i in 0..n {
            let det = g11[i] * g22[i] - g12[i] * g12[i];
            if det > 0.0 && det.is_finite() {
                flow[i] = ((g22[i] * h1[i] - g12[i] * h2[i]) / det, (g11[i] * h2[i] - g12[i] * h1[i]) / det);
            } else {
                flow[i] = (0.0, 0.0);
                valid[i] = false;
            }
        }
    }

    let mut field = FlowField {
        kind: FlowKind::Dense,
        width: w,
        height: h,
        points: Vec::with_capacity(n),
        vectors: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            field.points.push((x as f64, y as f64));
            if valid[i] {
                field.vectors.push(flow[i]);
                field.valid.push(true);
            } else {
                field.vectors.push((0.0, 0.0));
                field.valid.push(false);
            }
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::super::test_images::texture;
    use super::*;

    #[test]
    fn expansion_recovers_quadratic() {
        // f = 0.01 x^2 - 0.02 xy + 0.005 y^2 + 0.1 x - 0.05 y + 0.3 about pixel (20, 20).
        let img = GrayImage::from_fn(40, 40, |x, y| {
            let (x, y) = (x as f64 - 20.0, y as f64 - 20.0);
            (0.001 * x * x - 0.002 * x * y + 0.0005 * y * y + 0.01 * x - 0.005 * y + 0.3) as f32
        });
        let e = polynomial_expansion(&img, 1.5);
        let i = 20 * 40 + 20;
        assert!((e.a[i][0] - 0.001).abs() < 1e-6);
        assert!((e.a[i][1] + 0.001).abs() < 1e-6);
        assert!((e.a[i][2] - 0.0005).abs() < 1e-6);
        assert!((e.b[i][0] - 0.01).abs() < 1e-6);
        assert!((e.b[i][1] + 0.005).abs() < 1e-6);
        assert!((e.c[i] - 0.3).abs() < 1e-5);
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let img = texture(48, 40, 0.0, 0.0);
        let flow = farneback_dense(&img, &img, &FarnebackParams::default()).unwrap();
        assert!(flow.valid_count() > flow.len() / 2);
        assert!(flow.vectors.iter().all(|&v| v == (0.0, 0.0)));
        assert_eq!(flow.len(), 48 * 40);
    }

    #[test]
    fn constant_frames_are_invalid() {
        let img = GrayImage::from_fn(32, 32, |_, _| 0.5);
        let flow = farneback_dense(&img, &img, &FarnebackParams::default()).unwrap();
        assert_eq!(flow.valid_count(), 0);
    }

    #[test]
    fn sinusoid_shift_recovered() {
        let a = texture(96, 96, 0.0, 0.0);
        let b = texture(96, 96, 2.0, 1.0);
        let flow = farneback_dense(&a, &b, &FarnebackParams::default()).unwrap();
        let (mu, mv) = flow.median_valid().unwrap();
        assert!((mu - 2.0).abs() < 0.5 && (mv - 1.0).abs() < 0.5, "median ({mu}, {mv})");
    }

    #[test]
    fn small_images_rejected() {
        let img = GrayImage::new(15, 30);
        assert!(matches!(farneback_dense(&img, &img, &Default::default()), Err(Error::Size(_))));
    }
}
