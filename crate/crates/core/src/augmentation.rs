//! Training-time rotation and zoom, applied to keypoint coordinates before
//! rasterization so the transforms are exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::ClipAugmenter;
use crate::pose_features::{rasterize, KeypointSequence, RasterClip, RasterSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// One draw per sequence, applied to every frame.
    PerClip,
    /// Independent draw for every frame.
    PerFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Degrees, `[-a, a]`.
    pub rotation_range: [f64; 2],
    pub zoom_range: [f64; 2],
    pub mode: AugmentMode,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rotation_range: [-45.0, 45.0],
            zoom_range: [1.0, 2.0],
            mode: AugmentMode::PerClip,
        }
    }
}

impl AugmentSpec {
    /// No rotation, no zoom.
    pub fn identity() -> Self {
        AugmentSpec {
            rotation_range: [0.0, 0.0],
            zoom_range: [1.0, 1.0],
            mode: AugmentMode::PerClip,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let p = |f: &str| if path.is_empty() { f.to_string() } else { format!("{path}.{f}") };
        let [rlo, rhi] = self.rotation_range;
        if !(rlo.is_finite() && rhi.is_finite()) || rlo > rhi || rlo != -rhi || rhi > 180.0 {
            return Err(Error::config(
                p("rotation_range"),
                format!("must be a symmetric range [-a, a] with 0 <= a <= 180, got [{rlo}, {rhi}]"),
            ));
        }
        let [zlo, zhi] = self.zoom_range;
        if !(zlo.is_finite() && zhi.is_finite()) || zlo < 1.0 || zlo > zhi {
            return Err(Error::config(
                p("zoom_range"),
                format!("must satisfy 1 <= min <= max, got [{zlo}, {zhi}]"),
            ));
        }
        Ok(())
    }
}

/// Rotates every present keypoint by `theta` degrees about the frame center.
///
/// Coordinates are image coordinates (y down), so a positive angle turns a
/// point right of the center towards below it.
pub fn rotate_sequence(seq: &KeypointSequence, theta: f64) -> KeypointSequence {
    let (cx, cy) = seq.frame_size.center();
    let (s, c) = theta.to_radians().sin_cos();
    seq.map_points(|_, x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

/// Scales coordinates about the frame center. Points pushed outside the frame
/// are kept and clipped later by the rasterizer.
pub fn zoom_sequence(seq: &KeypointSequence, factor: f64) -> Result<KeypointSequence> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::Range(format!("zoom factor must be >= 1, got {factor}")));
    }
    let (cx, cy) = seq.frame_size.center();
    Ok(seq.map_points(|_, x, y| (cx + factor * (x - cx), cy + factor * (y - cy))))
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Draws `(theta, factor)` uniformly from the configured ranges.
pub fn draw_augmentation(spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let theta = uniform(rng, spec.rotation_range);
    let factor = uniform(rng, spec.zoom_range);
    (theta, factor)
}

fn transform_point(center: (f64, f64), theta: f64, factor: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = theta.to_radians().sin_cos();
    let (dx, dy) = (x - center.0, y - center.1);
    (
        center.0 + factor * (c * dx - s * dy),
        center.1 + factor * (s * dx + c * dy),
    )
}

/// Applies a random rotation and zoom according to `spec.mode`.
pub fn augment_sequence(seq: &KeypointSequence, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> KeypointSequence {
    let center = seq.frame_size.center();
    match spec.mode {
        AugmentMode::PerClip => {
            let (theta, factor) = draw_augmentation(spec, rng);
            seq.map_points(|_, x, y| transform_point(center, theta, factor, x, y))
        }
        AugmentMode::PerFrame => {
            let draws: Vec<(f64, f64)> = (0..seq.frames.len()).map(|_| draw_augmentation(spec, rng)).collect();
            seq.map_points(|i, x, y| transform_point(center, draws[i].0, draws[i].1, x, y))
        }
    }
}

/// Re-rasterizes augmented copies of prepared (already centered) sequences.
pub struct KeypointAugmenter<'a> {
    pub sequences: &'a [KeypointSequence],
    pub spec: AugmentSpec,
    pub raster: RasterSpec,
}

impl ClipAugmenter for KeypointAugmenter<'_> {
    fn augment(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<RasterClip> {
        let seq = self
            .sequences
            .get(index)
            .ok_or_else(|| Error::Range(format!("no training sequence {index}")))?;
        Ok(rasterize(&augment_sequence(seq, &self.spec, rng), &self.raster))
    }
}
