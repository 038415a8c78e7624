use super::{FlowField, FlowKind};
use crate::image::{GrayImage, RgbImage};

const HUE_QUANTUM: f64 = 1_048_576.0; // 2^20 steps per degree

/// Flow direction as a hue in `[0, 360)` degrees, 0 = +x (red).
///
/// The angle is reduced to the upper half-plane before adding 180, and
/// snapped to a 2^-20 degree grid, so opposite vectors differ by exactly 180.
pub fn flow_hue(u: f64, v: f64) -> f64 {
    let upper = v > 0.0 || (v == 0.0 && u >= 0.0);
    let (a, b) = if upper { (u, v) } else { (-u, -v) };
    let mut deg = b.atan2(a).to_degrees();
    deg = (deg * HUE_QUANTUM).round() / HUE_QUANTUM;
    if !upper {
        deg += 180.0;
    }
    if deg >= 360.0 {
        deg -= 360.0;
    }
    deg
}

/// HSV (h in degrees, s and v in [0, 1]) to 8-bit RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |f: f64| ((f + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    [to8(r), to8(g), to8(b)]
}

/// 95th percentile (nearest rank) of valid magnitudes.
fn auto_max_magnitude(flow: &FlowField) -> f64 {
    let mut mags: Vec<f64> = flow.valid_vectors().map(|(u, v)| u.hypot(v)).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let rank = ((0.95 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

/// Direction as hue, magnitude as intensity, full saturation; invalid pixels black.
///
/// `max_magnitude = None` normalizes by the 95th percentile of valid magnitudes.
pub fn flow_to_hsv(flow: &FlowField, max_magnitude: Option<f64>) -> RgbImage {
    let mut img = RgbImage::black(flow.width, flow.height);
    let max = max_magnitude.unwrap_or_else(|| auto_max_magnitude(flow));
    if !(max > 0.0) {
        return img;
    }
    for ((p, &(u, v)), &ok) in flow.points.iter().zip(&flow.vectors).zip(&flow.valid) {
        if !ok {
            continue;
        }
        let intensity = (u.hypot(v) / max).clamp(0.0, 1.0);
        if intensity == 0.0 {
            continue;
        }
        img.put(p.0 as i64, p.1 as i64, hsv_to_rgb(flow_hue(u, v), 1.0, intensity));
    }
    img
}

#[derive(Debug, Clone, Copy)]
pub struct ArrowStyle {
    /// Multiplier applied to each vector before drawing.
    pub scale: f64,
    pub line: [u8; 3],
    pub dot: [u8; 3],
}

impl Default for ArrowStyle {
    fn default() -> Self {
        ArrowStyle {
            scale: 3.0,
            line: [0, 255, 0],
            dot: [255, 0, 0],
        }
    }
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), rgb: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        img.put(x.round() as i64, y.round() as i64, rgb);
    }
}

/// Draws each valid lattice point as a dot with a segment along its vector.
/// Without a background the arrows are drawn on black.
pub fn render_arrows(flow: &FlowField, background: Option<&GrayImage>, style: &ArrowStyle) -> RgbImage {
    debug_assert!(flow.kind == FlowKind::SparseGrid || flow.is_empty());
    let mut img = match background {
        Some(bg) => bg.to_rgb(),
        None => RgbImage::black(flow.width, flow.height),
    };
    for ((p, &(u, v)), &ok) in flow.points.iter().zip(&flow.vectors).zip(&flow.valid) {
        if !ok {
            continue;
        }
        let end = (p.0 + style.scale * u, p.1 + style.scale * v);
        if end != *p {
            draw_segment(&mut img, *p, end, style.line);
        }
        img.put(p.0.round() as i64, p.1.round() as i64, style.dot);
    }
    img
}
