use serde::{Deserialize, Serialize};

use super::{check_same_size, image_gradients, FlowField, FlowKind};
use crate::error::Result;
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LucasKanadeParams {
    /// Lattice spacing in pixels.
    pub spacing: usize,
    /// Side of the square integration window.
    pub window: usize,
    /// Smallest accepted eigenvalue of the per-pixel-averaged structure tensor.
    pub min_eigen: f64,
    /// Gauss-Newton refinements per point.
    pub max_iterations: usize,
}

impl Default for LucasKanadeParams {
    fn default() -> Self {
        LucasKanadeParams {
            spacing: 10,
            window: 15,
            min_eigen: 1e-4,
            max_iterations: 20,
        }
    }
}

/// Lattice coordinates along one axis: `0, spacing, 2*spacing, ... <= len - 1`.
pub fn lattice_axis(len: usize, spacing: usize) -> Vec<usize> {
    (0..len).step_by(spacing.max(1)).collect()
}

/// Tracks every lattice point from `prev` to `next`.
///
/// Each point solves the 2x2 system `G v = -(sum Ix It, sum Iy It)` over its
/// window, iterating with the residual re-sampled at the current estimate.
/// Points whose structure tensor (averaged per pixel) has a smaller eigenvalue
/// below `min_eigen` are marked invalid.
pub fn lucas_kanade_grid(prev: &GrayImage, next: &GrayImage, params: &LucasKanadeParams) -> Result<FlowField> {
    check_same_size(prev, next)?;
    let (ix, iy) = image_gradients(prev)?;
    let (w, h) = (prev.width, prev.height);
    let half = (params.window / 2) as i64;
    let xs = lattice_axis(w, params.spacing);
    let ys = lattice_axis(h, params.spacing);

    let mut field = FlowField {
        kind: FlowKind::SparseGrid,
        width: w,
        height: h,
        points: Vec::with_capacity(xs.len() * ys.len()),
        vectors: Vec::with_capacity(xs.len() * ys.len()),
        valid: Vec::with_capacity(xs.len() * ys.len()),
    };

    for &py in &ys {
        for &px in &xs {
            let x0 = (px as i64 - half).max(0) as usize;
            let x1 = (px as i64 + half).min(w as i64 - 1) as usize;
            let y0 = (py as i64 - half).max(0) as usize;
            let y1 = (py as i64 + half).min(h as i64 - 1) as usize;
            let n = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;

            let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let gx = ix.get(x, y) as f64;
                    let gy = iy.get(x, y) as f64;
                    gxx += gx * gx;
                    gxy += gx * gy;
                    gyy += gy * gy;
                }
            }
            let trace = (gxx + gyy) / n;
            let det = (gxx * gyy - gxy * gxy) / (n * n);
            let disc = (trace * trace / 4.0 - det).max(0.0).sqrt();
            let min_eig = trace / 2.0 - disc;

            field.points.push((px as f64, py as f64));
            if !(min_eig >= params.min_eigen) {
                field.vectors.push((0.0, 0.0));
                field.valid.push(false);
                continue;
            }

            let det_sum = gxx * gyy - gxy * gxy;
            let (mut u, mut v) = (0.0f64, 0.0f64);
            for _ in 0..params.max_iterations {
                let (mut bx, mut by) = (0.0, 0.0);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let it = next.sample(x as f64 + u, y as f64 + v) - prev.get(x, y) as f64;
                        bx -= ix.get(x, y) as f64 * it;
                        by -= iy.get(x, y) as f64 * it;
                    }
                }
                let du = (gyy * bx - gxy * by) / det_sum;
                let dv = (gxx * by - gxy * bx) / det_sum;
                u += du;
                v += dv;
                if du * du + dv * dv < 1e-6 {
                    break;
                }
            }
            let ok = u.is_finite() && v.is_finite() && (u * u + v * v).sqrt() <= params.window as f64;
            field.vectors.push(if ok { (u, v) } else { (0.0, 0.0) });
            field.valid.push(ok);
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::super::test_images::{blob, texture};
    use super::*;
    use crate::error::Error;

    #[test]
    fn identical_frames_give_zero_flow() {
        let img = texture(60, 50, 0.0, 0.0);
        let flow = lucas_kanade_grid(&img, &img, &LucasKanadeParams::default()).unwrap();
        assert!(flow.valid_count() > 0);
        assert!(flow.valid_vectors().all(|v| v == (0.0, 0.0)));
    }

    #[test]
    fn shifted_blob_is_tracked() {
        let a = blob(60, 60, 30.0, 30.0, 5.0);
        let b = blob(60, 60, 31.0, 30.0, 5.0);
        let flow = lucas_kanade_grid(&a, &b, &LucasKanadeParams::default()).unwrap();
        let mut near = 0;
        for ((p, vec), ok) in flow.points.iter().zip(&flow.vectors).zip(&flow.valid) {
            if *ok && (p.0 - 30.0).abs() <= 10.0 && (p.1 - 30.0).abs() <= 10.0 {
                near += 1;
                assert!((0.7..=1.3).contains(&vec.0), "u={} at {p:?}", vec.0);
                assert!((-0.3..=0.3).contains(&vec.1), "v={} at {p:?}", vec.1);
            }
        }
        assert!(near >= 4);
    }

    #[test]
    fn flat_frames_are_invalid() {
        let img = GrayImage::new(40, 40);
        let flow = lucas_kanade_grid(&img, &img, &LucasKanadeParams::default()).unwrap();
        assert_eq!(flow.valid_count(), 0);
        assert_eq!(flow.len(), 16);
    }

    #[test]
    fn lattice_count_formula() {
        for (w, h, s) in [(100, 100, 10), (101, 37, 10), (64, 48, 7), (5, 5, 10)] {
            let img = GrayImage::new(w, h);
            let flow = lucas_kanade_grid(
                &img,
                &img,
                &LucasKanadeParams {
                    spacing: s,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(flow.len(), ((w - 1) / s + 1) * ((h - 1) / s + 1));
        }
    }

    #[test]
    fn size_mismatch() {
        assert!(matches!(
            lucas_kanade_grid(&GrayImage::new(10, 10), &GrayImage::new(10, 11), &Default::default()),
            Err(Error::Size(_))
        ));
    }
}
