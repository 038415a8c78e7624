use std::path::Path;

use serde::{Deserialize, Serialize};

use super::keypoint::{filter_head, HeadPose};
use super::manifest::{ClipRecord, FrameSize, Label};
use super::openpose::load_keypoints;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowParams {
    /// Frames per window (T).
    pub frames: usize,
    /// Source-frame step between consecutive window frames.
    pub stride: usize,
    /// Source-frame step between consecutive window starts.
    pub hop: usize,
    /// Minimum fraction of valid frames for a window to be kept.
    pub min_valid_fraction: f64,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams {
            frames: 7,
            stride: 5,
            hop: 15,
            min_valid_fraction: 0.7,
        }
    }
}

impl WindowParams {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::config(format!("{path}.frames"), "must be >= 2"));
        }
        if self.stride == 0 {
            return Err(Error::config(format!("{path}.stride"), "must be >= 1"));
        }
        if self.hop == 0 {
            return Err(Error::config(format!("{path}.hop"), "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::config(
                format!("{path}.min_valid_fraction"),
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Source frames covered by one window.
    pub fn span(&self) -> usize {
        (self.frames - 1) * self.stride + 1
    }

    pub fn min_valid_frames(&self) -> usize {
        // Guard against 0.7 * 10 = 7.000000000000001 style rounding.
        let raw = self.min_valid_fraction * self.frames as f64;
        (raw - 1e-9).ceil().max(0.0) as usize
    }

    /// Windows that fit in a clip of `n_frames`, ignoring validity.
    pub fn window_count(&self, n_frames: usize) -> usize {
        if n_frames < self.span() {
            0
        } else {
            (n_frames - self.span()) / self.hop + 1
        }
    }
}

/// T sampled head poses from one clip: the unit of classification.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSequence {
    pub clip_id: String,
    pub subject_id: String,
    pub label: Label,
    pub frames: Vec<HeadPose>,
    pub stride: usize,
    pub origin_frame: usize,
    pub frame_size: FrameSize,
}

impl KeypointSequence {
    pub fn valid_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.is_valid()).count()
    }

    pub fn map_points(&self, mut f: impl FnMut(usize, f64, f64) -> (f64, f64)) -> KeypointSequence {
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, fr)| fr.map_points(|x, y| f(i, x, y)))
            .collect();
        KeypointSequence {
            frames,
            ..self.clone()
        }
    }

    /// Mean of all present points over all frames.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for frame in &self.frames {
            for (_, kp) in frame.present() {
                sx += kp.x;
                sy += kp.y;
                n += 1;
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub windows: Vec<KeypointSequence>,
    /// Windows dropped by the valid-frame rule.
    pub dropped_invalid: usize,
    pub warning: Option<String>,
}

/// Cuts a clip's head poses into stride-sampled windows of T frames.
///
/// Window `k` takes frames `k*hop + j*stride` for `j in 0..T`, relative to the
/// first frame of `frames`. Windows running past the clip are not emitted.
pub fn sample_windows(
    clip: &ClipRecord,
    frame_size: FrameSize,
    frames: &[HeadPose],
    params: &WindowParams,
) -> WindowSet {
    let mut set = WindowSet::default();
    let span = params.span();
    if frames.len() < span {
        let msg = format!(
            "clip {}: {} frames is shorter than one window ({span} frames)",
            clip.clip_id,
            frames.len()
        );
        log::warn!("{msg}");
        set.warning = Some(msg);
        return set;
    }
    let min_valid = params.min_valid_frames();
    let mut start = 0;
    while start + span <= frames.len() {
        let picked: Vec<HeadPose> = (0..params.frames)
            .map(|j| frames[start + j * params.stride].clone())
            .collect();
        let valid = picked.iter().filter(|f| f.is_valid()).count();
        if valid >= min_valid {
            set.windows.push(KeypointSequence {
                clip_id: clip.clip_id.clone(),
                subject_id: clip.subject_id.clone(),
                label: clip.label,
                origin_frame: picked[0].frame_index,
                frames: picked,
                stride: params.stride,
                frame_size,
            });
        } else {
            set.dropped_invalid += 1;
        }
        start += params.hop;
    }
    set
}

/// Loads a clip's keypoints, restricts them to its frame range and keeps the head region.
pub fn load_clip_heads(clip: &ClipRecord, confidence_threshold: f64) -> Result<Vec<HeadPose>> {
    let frames = load_keypoints(Path::new(&clip.keypoint_source))?;
    let (start, end) = clip.frame_range;
    if end >= frames.len() {
        return Err(Error::Validation(format!(
            "clip {}: frame range [{start}, {end}] exceeds {} available frames in {}",
            clip.clip_id,
            frames.len(),
            clip.keypoint_source.display()
        )));
    }
    Ok(frames[start..=end]
        .iter()
        .map(|f| filter_head(f, confidence_threshold))
        .collect())
}

const CENTER_QUANTUM: f64 = 1_048_576.0; // 2^20

fn quantize(v: f64) -> f64 {
    (v * CENTER_QUANTUM).round() / CENTER_QUANTUM
}

/// Moves the sequence-mean head centroid to the frame center.
///
/// Offsets are taken relative to the first present point and results are
/// snapped to a 2^-20 px grid. The snap absorbs the rounding of `x + d`, so
/// a global translation leaves the output unchanged unless an offset lands
/// within ~1e-13 px of a grid boundary, and the operation is idempotent.
/// Inter-frame displacements are preserved up to that grid.
pub fn center_sequence(seq: &KeypointSequence) -> Result<KeypointSequence> {
    let reference = seq
        .frames
        .iter()
        .find_map(|f| f.present().next().map(|(_, k)| (k.x, k.y)))
        .ok_or_else(|| {
            Error::InvalidSequence(format!(
                "clip {} window @{}: no present keypoints",
                seq.clip_id, seq.origin_frame
            ))
        })?;
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for frame in &seq.frames {
        for (_, kp) in frame.present() {
            sx += kp.x - reference.0;
            sy += kp.y - reference.1;
            n += 1;
        }
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let (cx, cy) = seq.frame_size.center();
    Ok(seq.map_points(|_, x, y| {
        (
            quantize((x - reference.0) - mx + cx),
            quantize((y - reference.1) - my + cy),
        )
    }))
}
