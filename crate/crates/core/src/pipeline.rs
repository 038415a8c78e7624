use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose_features::{
    center_sequence, load_clip_heads, rasterize, sample_windows, CenterMode, ClipRecord, FrameSize, HeadPose,
    KeypointSequence, Manifest, RasterClip, RasterSpec, WindowParams, DEFAULT_CONFIDENCE_THRESHOLD,
};

/// Preprocessing settings a model was trained with; stored in checkpoints
/// so prediction reproduces the training-time features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub raster: RasterSpec,
    pub window: WindowParams,
    pub confidence_threshold: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            raster: RasterSpec::default(),
            window: WindowParams::default(),
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<()> {
        self.raster.validate("raster")?;
        self.window.validate("window")?;
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::config(
                "confidence_threshold",
                format!("must lie in [0, 1], got {}", self.confidence_threshold),
            ));
        }
        Ok(())
    }
}

/// Windows of one clip, centered according to the raster spec.
#[derive(Debug, Clone, Default)]
pub struct ClipWindows {
    pub windows: Vec<KeypointSequence>,
    pub dropped_invalid: usize,
    pub warning: Option<String>,
}

/// Samples and centers the windows of a clip whose head poses are already loaded.
pub fn windows_from_heads(
    clip: &ClipRecord,
    frame_size: FrameSize,
    heads: &[HeadPose],
    settings: &PipelineSettings,
) -> Result<ClipWindows> {
    let set = sample_windows(clip, frame_size, heads, &settings.window);
    let windows = match settings.raster.center_mode {
        CenterMode::SequenceMean => set.windows.iter().map(center_sequence).collect::<Result<Vec<_>>>()?,
        CenterMode::None => set.windows,
    };
    Ok(ClipWindows {
        windows,
        dropped_invalid: set.dropped_invalid,
        warning: set.warning,
    })
}

pub fn clip_windows(clip: &ClipRecord, frame_size: FrameSize, settings: &PipelineSettings) -> Result<ClipWindows> {
    let heads = load_clip_heads(clip, settings.confidence_threshold)?;
    windows_from_heads(clip, frame_size, &heads, settings)
}

/// Every usable window of a manifest, in manifest clip order.
#[derive(Debug, Clone, Default)]
pub struct PreparedDataset {
    pub windows: Vec<KeypointSequence>,
    /// Index into the manifest's clips for each window.
    pub clip_of_window: Vec<usize>,
    pub dropped_invalid: usize,
    pub warnings: Vec<String>,
}

impl PreparedDataset {
    pub fn window_counts_by_clip(&self, n_clips: usize) -> Vec<usize> {
        let mut counts = vec![0; n_clips];
        for &c in &self.clip_of_window {
            counts[c] += 1;
        }
        counts
    }
}

pub fn prepare_manifest(manifest: &Manifest, settings: &PipelineSettings) -> Result<PreparedDataset> {
    settings.validate()?;
    let mut out = PreparedDataset::default();
    for (ci, clip) in manifest.clips.iter().enumerate() {
        let cw = clip_windows(clip, manifest.frame_size, settings)?;
        out.clip_of_window.extend(std::iter::repeat(ci).take(cw.windows.len()));
        out.windows.extend(cw.windows);
        out.dropped_invalid += cw.dropped_invalid;
        out.warnings.extend(cw.warning);
    }
    Ok(out)
}

pub fn rasterize_all(windows: &[KeypointSequence], spec: &RasterSpec) -> Vec<RasterClip> {
    windows.iter().map(|w| rasterize(w, spec)).collect()
}
