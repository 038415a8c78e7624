use serde::{Deserialize, Serialize};

use super::keypoint::HeadPose;
use super::manifest::{FrameSize, Label};
use super::windows::KeypointSequence;
use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    None,
    SequenceMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterSpec {
    pub width: usize,
    pub height: usize,
    pub point_radius: f64,
    pub line_thickness: usize,
    pub center_mode: CenterMode,
}

impl Default for RasterSpec {
    fn default() -> Self {
        RasterSpec {
            width: 64,
            height: 64,
            point_radius: 2.0,
            line_thickness: 1,
            center_mode: CenterMode::SequenceMean,
        }
    }
}

impl RasterSpec {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::config(
                format!("{path}.width"),
                format!("raster must be at least 16x16, found {}x{}", self.width, self.height),
            ));
        }
        if !(self.point_radius >= 1.0) {
            return Err(Error::config(format!("{path}.point_radius"), "must be >= 1"));
        }
        if self.line_thickness == 0 {
            return Err(Error::config(format!("{path}.line_thickness"), "must be >= 1"));
        }
        Ok(())
    }

    /// Uniform scale and offset mapping source-frame coordinates to raster pixels.
    pub fn transform(&self, frame: FrameSize) -> (f64, f64, f64) {
        let scale = (self.width as f64 / frame.width).min(self.height as f64 / frame.height);
        let ox = (self.width as f64 - scale * frame.width) / 2.0;
        let oy = (self.height as f64 - scale * frame.height) / 2.0;
        (scale, ox, oy)
    }
}

/// T rasterized skeleton frames: the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterClip {
    pub frames: Vec<GrayImage>,
    pub label: Label,
    pub subject_id: String,
}

impl RasterClip {
    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }
}

fn fill_disk(img: &mut GrayImage, cx: f64, cy: f64, radius: f64) {
    let r2 = radius * radius;
    let x0 = (cx - radius).floor().max(0.0) as i64;
    let y0 = (cy - radius).floor().max(0.0) as i64;
    let x1 = ((cx + radius).ceil() as i64).min(img.width as i64 - 1);
    let y1 = ((cy + radius).ceil() as i64).min(img.height as i64 - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r2 {
                img.set(x as usize, y as usize, 1.0);
            }
        }
    }
}

fn stamp(img: &mut GrayImage, x: i64, y: i64, half: i64) {
    for sy in y - half..=y + half {
        for sx in x - half..=x + half {
            if sx >= 0 && sy >= 0 && (sx as usize) < img.width && (sy as usize) < img.height {
                img.set(sx as usize, sy as usize, 1.0);
            }
        }
    }
}

/// Bresenham centerline, widened by a square stamp for thickness > 1.
fn draw_line(img: &mut GrayImage, a: (f64, f64), b: (f64, f64), thickness: usize) {
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let half = (thickness as i64 - 1) / 2;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    // Bound the walk: far off-raster endpoints would otherwise loop for a long time.
    let limit = (dx - dy) as usize + 1;
    for _ in 0..limit.min(1 << 20) {
        stamp(img, x0, y0, half);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Draws one head pose into a blank raster.
pub fn rasterize_frame(pose: &HeadPose, frame: FrameSize, spec: &RasterSpec) -> GrayImage {
    let mut img = GrayImage::new(spec.width, spec.height);
    let (scale, ox, oy) = spec.transform(frame);
    let map = |x: f64, y: f64| (ox + scale * x, oy + scale * y);
    for &(a, b) in &pose.edges {
        if let (Some(ka), Some(kb)) = (pose.get(a), pose.get(b)) {
            draw_line(&mut img, map(ka.x, ka.y), map(kb.x, kb.y), spec.line_thickness);
        }
    }
    for (_, kp) in pose.present() {
        let (u, v) = map(kp.x, kp.y);
        fill_disk(&mut img, u, v, spec.point_radius);
    }
    img
}

/// Rasterizes every frame of a sequence with one shared frame-to-raster mapping.
/// Points that land outside the raster are clipped.
pub fn rasterize(seq: &KeypointSequence, spec: &RasterSpec) -> RasterClip {
    RasterClip {
        frames: seq
            .frames
            .iter()
            .map(|f| rasterize_frame(f, seq.frame_size, spec))
            .collect(),
        label: seq.label,
        subject_id: seq.subject_id.clone(),
    }
}
