//! Synthetic head-keypoint clips: oscillating heads (head banging) against
//! stable heads, both under a shared handheld-camera random walk.
//!
//! Every clip draws from its own stream derived from `(seed, clip id)`, so
//! output does not depend on generation order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::pose_features::manifest::MANIFEST_VERSION;
use crate::pose_features::{
    write_consolidated, ClipRecord, FrameSize, HeadPart, Keypoint, Label, ManifestDocument, ManifestEntry, PoseFrame,
};
use crate::rng::derive_rng;

/// Smallest clip that still yields a stride-5, seven-frame window with margin.
pub const MIN_FRAMES: usize = 35;

/// Head template in units of head scale, relative to the nose-neck axis; y down.
const TEMPLATE: [(HeadPart, f64, f64); 6] = [
    (HeadPart::Nose, 0.0, 0.05),
    (HeadPart::Neck, 0.0, 0.9),
    (HeadPart::RightEye, -0.18, -0.1),
    (HeadPart::LeftEye, 0.18, -0.1),
    (HeadPart::RightEar, -0.5, -0.02),
    (HeadPart::LeftEar, 0.5, -0.02),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub base_position: (f64, f64),
    /// Inter-ear distance in pixels.
    pub head_scale: f64,
    pub keypoint_jitter_sigma: f64,
    pub detection_dropout_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    Headbanging,
    Stable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub class: MotionClass,
    /// Hz; ignored for stable clips.
    pub frequency: f64,
    /// Fraction of frame height; forced to 0 for stable clips.
    pub amplitude: f64,
    /// Unit direction of the oscillation.
    pub axis: (f64, f64),
    /// Standard deviation of the per-frame camera step, pixels.
    pub camera_drift_sigma: f64,
}

impl MotionParams {
    pub fn stable(camera_drift_sigma: f64) -> Self {
        MotionParams {
            class: MotionClass::Stable,
            frequency: 0.0,
            amplitude: 0.0,
            axis: (0.0, 1.0),
            camera_drift_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub clips_per_subject: usize,
    pub n_frames: usize,
    pub fps: f64,
    pub frame_width: f64,
    pub frame_height: f64,
    pub frequency_range: [f64; 2],
    pub amplitude_range: [f64; 2],
    pub camera_drift_sigma: f64,
    pub jitter_range: [f64; 2],
    pub dropout_range: [f64; 2],
    pub head_scale_range: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 12,
            clips_per_subject: 6,
            n_frames: 46,
            fps: 30.0,
            frame_width: 640.0,
            frame_height: 480.0,
            frequency_range: [1.0, 2.5],
            amplitude_range: [0.05, 0.15],
            camera_drift_sigma: 1.5,
            jitter_range: [0.5, 2.0],
            dropout_range: [0.0, 0.05],
            head_scale_range: [40.0, 70.0],
        }
    }
}

impl SynthConfig {
    pub fn frame_size(&self) -> FrameSize {
        FrameSize {
            width: self.frame_width,
            height: self.frame_height,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let p = |f: &str| if path.is_empty() { f.to_string() } else { format!("{path}.{f}") };
        if self.n_subjects == 0 {
            return Err(Error::config(p("n_subjects"), "must be at least 1"));
        }
        if self.clips_per_subject < 2 || self.clips_per_subject % 2 != 0 {
            return Err(Error::config(p("clips_per_subject"), "must be a positive even number"));
        }
        if self.n_frames < MIN_FRAMES {
            return Err(Error::config(p("n_frames"), format!("must be at least {MIN_FRAMES}")));
        }
        if !(self.fps > 0.0) {
            return Err(Error::config(p("fps"), "must be positive"));
        }
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return Err(Error::config(p("frame_width"), "frame size must be positive"));
        }
        let ranges = [
            ("frequency_range", self.frequency_range, 0.0, f64::INFINITY),
            ("amplitude_range", self.amplitude_range, 0.0, 1.0),
            ("jitter_range", self.jitter_range, 0.0, f64::INFINITY),
            ("dropout_range", self.dropout_range, 0.0, 0.5),
            ("head_scale_range", self.head_scale_range, f64::MIN_POSITIVE, f64::INFINITY),
        ];
        for (name, [lo, hi], min, max) in ranges {
            if !(lo >= min && lo <= hi && hi <= max) || (name == "dropout_range" && hi >= 0.5) {
                return Err(Error::config(p(name), format!("invalid range [{lo}, {hi}]")));
            }
        }
        if !(self.camera_drift_sigma >= 0.0) {
            return Err(Error::config(p("camera_drift_sigma"), "must be >= 0"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Subject profiles drawn from the configured ranges; ids `synth_000`, ...
pub fn gen_profiles(n: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SubjectProfile>> {
    if n == 0 {
        return Err(Error::Size("need at least one subject".into()));
    }
    let (w, h) = (config.frame_width, config.frame_height);
    Ok((0..n)
        .map(|i| SubjectProfile {
            subject_id: format!("synth_{i:03}"),
            base_position: (rng.gen_range(0.3 * w..0.7 * w), rng.gen_range(0.3 * h..0.6 * h)),
            head_scale: uniform(rng, config.head_scale_range),
            keypoint_jitter_sigma: uniform(rng, config.jitter_range),
            detection_dropout_prob: uniform(rng, config.dropout_range),
        })
        .collect())
}

/// A generated clip together with the camera offset applied at each frame.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub frames: Vec<PoseFrame>,
    pub camera_offsets: Vec<(f64, f64)>,
}

/// Renders one clip of `n_frames` BODY_25 frames (head keypoints only).
pub fn gen_clip(
    profile: &SubjectProfile,
    params: &MotionParams,
    n_frames: usize,
    fps: f64,
    frame_size: FrameSize,
    rng: &mut ChaCha8Rng,
) -> Result<SynthClip> {
    if n_frames < MIN_FRAMES {
        return Err(Error::Size(format!(
            "synthetic clips need at least {MIN_FRAMES} frames, got {n_frames}"
        )));
    }
    let amplitude = match params.class {
        MotionClass::Headbanging => params.amplitude * frame_size.height,
        MotionClass::Stable => 0.0,
    };
    let jitter = Normal::new(0.0, profile.keypoint_jitter_sigma.max(0.0)).map_err(|e| Error::Range(e.to_string()))?;
    let step = Normal::new(0.0, params.camera_drift_sigma.max(0.0)).map_err(|e| Error::Range(e.to_string()))?;
    let (bx, by) = profile.base_position;
    let mut camera = (0.0, 0.0);
    let mut frames = Vec::with_capacity(n_frames);
    let mut camera_offsets = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        if t > 0 {
            camera.0 += step.sample(rng);
            camera.1 += step.sample(rng);
        }
        let s = amplitude * (2.0 * std::f64::consts::PI * params.frequency * t as f64 / fps).sin();
        let (dx, dy) = (s * params.axis.0, s * params.axis.1);
        let mut frame = PoseFrame::absent(t);
        for &(part, tx, ty) in &TEMPLATE {
            let x = bx + tx * profile.head_scale + dx + camera.0 + jitter.sample(rng);
            let y = by + ty * profile.head_scale + dy + camera.1 + jitter.sample(rng);
            let confidence = rng.gen_range(0.6..0.95);
            let dropped = rng.gen::<f64>() < profile.detection_dropout_prob;
            if !dropped {
                frame.keypoints[part.body25_index()] = Keypoint::new(x, y, confidence);
            }
        }
        frames.push(frame);
        camera_offsets.push(camera);
    }
    Ok(SynthClip { frames, camera_offsets })
}

/// Motion parameters for a clip of the given class, drawn from the config ranges.
pub fn draw_motion(class: MotionClass, config: &SynthConfig, rng: &mut ChaCha8Rng) -> MotionParams {
    let frequency = uniform(rng, config.frequency_range);
    let amplitude = uniform(rng, config.amplitude_range);
    match class {
        MotionClass::Headbanging => MotionParams {
            class,
            frequency,
            amplitude,
            axis: (0.0, 1.0),
            camera_drift_sigma: config.camera_drift_sigma,
        },
        MotionClass::Stable => MotionParams::stable(config.camera_drift_sigma),
    }
}

/// A full generated clip and its manifest record.
#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub record: ClipRecord,
    pub profile: SubjectProfile,
    pub motion: MotionParams,
    pub clip: SynthClip,
}

pub fn clip_id(subject: &str, index: usize) -> String {
    format!("{subject}_c{index}")
}

/// Generates every clip in memory. Clip `j` of a subject is positive when
/// `j < clips_per_subject / 2`.
pub fn gen_clips(config: &SynthConfig, seed: u64) -> Result<Vec<GeneratedClip>> {
    config.validate("synth")?;
    let profiles = gen_profiles(config.n_subjects, config, &mut derive_rng(seed, "profiles", &[]))?;
    let mut out = Vec::with_capacity(profiles.len() * config.clips_per_subject);
    for profile in &profiles {
        for j in 0..config.clips_per_subject {
            let id = clip_id(&profile.subject_id, j);
            let positive = j < config.clips_per_subject / 2;
            let mut rng = derive_rng(seed, &format!("clip:{id}"), &[]);
            let class = if positive {
                MotionClass::Headbanging
            } else {
                MotionClass::Stable
            };
            let motion = draw_motion(class, config, &mut rng);
            let clip = gen_clip(profile, &motion, config.n_frames, config.fps, config.frame_size(), &mut rng)?;
            out.push(GeneratedClip {
                record: ClipRecord {
                    clip_id: id.clone(),
                    subject_id: profile.subject_id.clone(),
                    label: if positive { Label::Positive } else { Label::Negative },
                    fps: config.fps,
                    keypoint_source: PathBuf::from(format!("keypoints/{id}.json")),
                    frame_range: (0, config.n_frames - 1),
                },
                profile: profile.clone(),
                motion,
                clip,
            });
        }
    }
    Ok(out)
}

/// Writes `keypoints/<clip>.json` files and `manifest.json` under `out_dir`;
/// returns the manifest path.
pub fn gen_dataset(config: &SynthConfig, out_dir: &Path, seed: u64) -> Result<PathBuf> {
    let clips = gen_clips(config, seed)?;
    let kp_dir = out_dir.join("keypoints");
    fs::create_dir_all(&kp_dir).map_err(|e| Error::io(&kp_dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in &clips {
        write_atomic(&out_dir.join(&c.record.keypoint_source), &write_consolidated(&c.clip.frames))?;
        entries.push(ManifestEntry {
            id: c.record.clip_id.clone(),
            subject: c.record.subject_id.clone(),
            label: c.record.label.as_str().to_string(),
            fps: c.record.fps,
            keypoints: c.record.keypoint_source.to_string_lossy().into_owned(),
            start_frame: c.record.frame_range.0,
            end_frame: c.record.frame_range.1,
        });
    }
    let doc = ManifestDocument {
        version: MANIFEST_VERSION,
        frame_width: config.frame_width,
        frame_height: config.frame_height,
        clips: entries,
    };
    let path = out_dir.join("manifest.json");
    write_atomic(&path, &doc.to_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn profile(jitter: f64, dropout: f64) -> SubjectProfile {
        SubjectProfile {
            subject_id: "p".into(),
            base_position: (300.0, 200.0),
            head_scale: 50.0,
            keypoint_jitter_sigma: jitter,
            detection_dropout_prob: dropout,
        }
    }

    const SIZE: FrameSize = FrameSize {
        width: 640.0,
        height: 480.0,
    };

    #[test]
    fn motionless_stable_clip_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = gen_clip(&profile(0.0, 0.0), &MotionParams::stable(0.0), 40, 30.0, SIZE, &mut rng).unwrap();
        for f in &c.frames[1..] {
            for (a, b) in f.keypoints.iter().zip(&c.frames[0].keypoints) {
                assert_eq!((a.x, a.y), (b.x, b.y));
            }
        }
    }

    #[test]
    fn sine_phase_points() {
        let params = MotionParams {
            class: MotionClass::Headbanging,
            frequency: 2.0,
            amplitude: 0.1,
            axis: (0.0, 1.0),
            camera_drift_sigma: 0.0,
        };
        // Fractional frame 3.75 is where sin reaches pi/2 at 2 Hz and 30 fps.
        let phase = 2.0 * std::f64::consts::PI * params.frequency * 3.75 / 30.0;
        assert!((phase - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = gen_clip(&profile(0.0, 0.0), &params, 40, 30.0, SIZE, &mut rng).unwrap();
        let nose_y = |t: usize| c.frames[t].keypoints[0].y;
        assert_eq!(nose_y(0), 200.0 + 0.05 * 50.0);
        let expected = 48.0 * (2.0 * std::f64::consts::PI * 2.0 * 4.0 / 30.0).sin();
        assert!((nose_y(4) - nose_y(0) - expected).abs() < 1e-9);
    }

    #[test]
    fn profiles_reproducible_and_distinct() {
        let cfg = SynthConfig::default();
        let a = gen_profiles(12, &cfg, &mut derive_rng(5, "profiles", &[])).unwrap();
        let b = gen_profiles(12, &cfg, &mut derive_rng(5, "profiles", &[])).unwrap();
        let c = gen_profiles(12, &cfg, &mut derive_rng(6, "profiles", &[])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].base_position, c[0].base_position);
        let ids: std::collections::BTreeSet<_> = a.iter().map(|p| p.subject_id.clone()).collect();
        assert_eq!(ids.len(), 12);
        assert!(gen_profiles(0, &cfg, &mut derive_rng(5, "profiles", &[])).is_err());
    }

    #[test]
    fn short_clip_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = gen_clip(&profile(1.0, 0.0), &MotionParams::stable(1.0), 34, 30.0, SIZE, &mut rng);
        assert!(matches!(r, Err(Error::Size(_))));
    }

    #[test]
    fn drift_parameters_class_independent() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = draw_motion(MotionClass::Headbanging, &cfg, &mut rng);
        let neg = draw_motion(MotionClass::Stable, &cfg, &mut rng);
        assert_eq!(pos.camera_drift_sigma, neg.camera_drift_sigma);
        assert_eq!(neg.amplitude, 0.0);
    }

    #[test]
    fn default_dataset_balance() {
        let clips = gen_clips(&SynthConfig::default(), 1).unwrap();
        assert_eq!(clips.len(), 72);
        assert_eq!(clips.iter().filter(|c| c.record.label.is_positive()).count(), 36);
        let subjects: std::collections::BTreeSet<_> = clips.iter().map(|c| c.record.subject_id.clone()).collect();
        assert_eq!(subjects.len(), 12);
    }
}
