//! The declarative run configuration shared by the CLI commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentSpec;
use crate::error::{Error, Result};
use crate::neural::{ModelConfig, TrainConfig};
use crate::pipeline::PipelineSettings;
use crate::pose_features::{RasterSpec, WindowParams, DEFAULT_CONFIDENCE_THRESHOLD};
use crate::synthgen::SynthConfig;

fn default_k() -> usize {
    3
}

fn default_threshold() -> f64 {
    DEFAULT_CONFIDENCE_THRESHOLD
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("stimkit-out")
}

/// One JSON document configures every command. `seed` is mandatory and
/// overrides the seeds of the nested model and training sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub raster: RasterSpec,
    #[serde(default)]
    pub window: WindowParams,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// For `train`: hold out this fold of the subject-disjoint plan and
    /// report its metrics; absent means fit on the whole dataset.
    #[serde(default)]
    pub holdout_fold: Option<usize>,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            manifest: None,
            raster: RasterSpec::default(),
            window: WindowParams::default(),
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentSpec::default(),
            k: 3,
            seed,
            output_dir: default_output_dir(),
            holdout_fold: None,
            synth: SynthConfig::default(),
        }
    }

    pub fn pipeline(&self) -> PipelineSettings {
        PipelineSettings {
            raster: self.raster,
            window: self.window,
            confidence_threshold: self.confidence_threshold,
        }
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        self.model.validate("model")?;
        let input = &self.model.input;
        if input.frames != self.window.frames {
            return Err(Error::config(
                "model.input.frames",
                format!("{} does not match window.frames {}", input.frames, self.window.frames),
            ));
        }
        if input.height != self.raster.height || input.width != self.raster.width || input.channels != 1 {
            return Err(Error::config(
                "model.input",
                format!(
                    "{}x{}x{} does not match the {}x{} single-channel raster",
                    input.height, input.width, input.channels, self.raster.height, self.raster.width
                ),
            ));
        }
        self.train.validate("train")?;
        self.augment.validate("augment")?;
        if self.k < 2 {
            return Err(Error::config("k", format!("need at least 2 folds, got {}", self.k)));
        }
        if let Some(f) = self.holdout_fold {
            if f >= self.k {
                return Err(Error::config("holdout_fold", format!("{f} is not below k = {}", self.k)));
            }
        }
        self.synth.validate("synth")?;
        Ok(())
    }

    /// Parses and validates config bytes; relative paths resolve against `base_dir`.
    pub fn from_slice(raw: &[u8], base_dir: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(raw);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { String::new() } else { path };
            let inner = e.into_inner();
            let path = if path.is_empty() {
                missing_field(&inner.to_string()).unwrap_or_else(|| "<root>".into())
            } else {
                path
            };
            Error::config(path, inner.to_string())
        })?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                cfg.manifest = Some(base_dir.join(m));
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_slice(&raw, base)
    }
}

fn missing_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("missing field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        RunConfig::from_slice(s.as_bytes(), Path::new("/base"))
    }

    #[test]
    fn minimal_config() {
        let cfg = parse(r#"{"seed": 4, "manifest": "data/m.json"}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.manifest.clone().unwrap(), PathBuf::from("/base/data/m.json"));
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.model_config().seed, 4);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(parse("{}"), Err(Error::Config { path, .. }) if path == "seed"));
    }

    #[test]
    fn errors_name_field_paths() {
        let e = parse(r#"{"seed": 1, "augment": {"zoom_range": [0.5, 2.0]}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "augment.zoom_range"), "{e}");
        let e = parse(r#"{"seed": 1, "train": {"learning_rate": -1}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "train.learning_rate"), "{e}");
        let e = parse(r#"{"seed": 1, "train": {"bogus": 1}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "train.bogus"), "{e}");
        let e = parse(r#"{"seed": 1, "window": {"frames": 5}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "model.input.frames"), "{e}");
        let e = parse(r#"{"seed": 1, "augment": {"zoom_range": "big"}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "augment.zoom_range"), "{e}");
    }
}
