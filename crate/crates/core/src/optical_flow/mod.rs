//! Optical-flow baselines: Lucas-Kanade on a uniform lattice and Farnebäck
//! dense flow, plus the hue/intensity and arrow renderings.
//!
//! Both estimators respond to any apparent motion, camera shake included;
//! they exist for comparison and visualization, not as classifier input.

mod farneback;
mod lucas_kanade;
mod render;

use serde::{Deserialize, Serialize};

pub use farneback::{farneback_dense, polynomial_expansion, FarnebackParams, PolyExpansion};
pub use lucas_kanade::{lattice_axis, lucas_kanade_grid, LucasKanadeParams};
pub use render::{flow_hue, flow_to_hsv, hsv_to_rgb, render_arrows, ArrowStyle};

use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    SparseGrid,
    Dense,
}

/// Displacements at a set of sample points; `points`, `vectors` and `valid` are parallel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub kind: FlowKind,
    pub width: usize,
    pub height: usize,
    pub points: Vec<(f64, f64)>,
    pub vectors: Vec<(f64, f64)>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_vectors(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.vectors
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(v, _)| *v)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Fraction of valid points whose vector lies within `tol` px of `expected`.
    pub fn fraction_within(&self, expected: (f64, f64), tol: f64) -> f64 {
        let n = self.valid_count();
        if n == 0 {
            return 0.0;
        }
        let hits = self
            .valid_vectors()
            .filter(|(u, v)| ((u - expected.0).powi(2) + (v - expected.1).powi(2)).sqrt() <= tol)
            .count();
        hits as f64 / n as f64
    }

    /// Component-wise median of valid vectors.
    pub fn median_valid(&self) -> Option<(f64, f64)> {
        let mut us: Vec<f64> = self.valid_vectors().map(|v| v.0).collect();
        let mut vs: Vec<f64> = self.valid_vectors().map(|v| v.1).collect();
        if us.is_empty() {
            return None;
        }
        let median = |xs: &mut Vec<f64>| {
            xs.sort_by(|a, b| a.total_cmp(b));
            let n = xs.len();
            if n % 2 == 1 {
                xs[n / 2]
            } else {
                0.5 * (xs[n / 2 - 1] + xs[n / 2])
            }
        };
        Some((median(&mut us), median(&mut vs)))
    }

    /// JSON dump `{"points": [[x, y], ...], "vectors": [[u, v], ...], "valid": [...]}`.
    pub fn to_json(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Dump<'a> {
            points: &'a [(f64, f64)],
            vectors: &'a [(f64, f64)],
            valid: &'a [bool],
        }
        let mut out = serde_json::to_vec(&Dump {
            points: &self.points,
            vectors: &self.vectors,
            valid: &self.valid,
        })
        .expect("flow serialization cannot fail");
        out.push(b'\n');
        out
    }
}

fn check_same_size(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Size(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Spatial derivatives: central differences inside, one-sided at the borders.
pub fn image_gradients(img: &GrayImage) -> Result<(GrayImage, GrayImage)> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(Error::Size(format!("gradients need at least 3x3, found {w}x{h}")));
    }
    let ix = GrayImage::from_fn(w, h, |x, y| {
        if x == 0 {
            img.get(1, y) - img.get(0, y)
        } else if x == w - 1 {
            img.get(w - 1, y) - img.get(w - 2, y)
        } else {
            (img.get(x + 1, y) - img.get(x - 1, y)) / 2.0
        }
    });
    let iy = GrayImage::from_fn(w, h, |x, y| {
        if y == 0 {
            img.get(x, 1) - img.get(x, 0)
        } else if y == h - 1 {
            img.get(x, h - 1) - img.get(x, h - 2)
        } else {
            (img.get(x, y + 1) - img.get(x, y - 1)) / 2.0
        }
    });
    Ok((ix, iy))
}

#[cfg(test)]
pub(crate) mod test_images {
    use crate::image::GrayImage;

    /// Smooth 2D texture evaluated at `(x - dx, y - dy)`, i.e. shifted by `(dx, dy)`.
    pub fn texture(w: usize, h: usize, dx: f64, dy: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64 - dx, y as f64 - dy);
            let v = 0.5
                + 0.15 * (x / 3.1).sin() * (y / 3.7).cos()
                + 0.1 * ((x + 0.6 * y) / 4.3).sin()
                + 0.08 * ((0.8 * x - y) / 2.9).cos();
            v as f32
        })
    }

    pub fn blob(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            (-r2 / (2.0 * sigma * sigma)).exp() as f32
        })
    }
}
