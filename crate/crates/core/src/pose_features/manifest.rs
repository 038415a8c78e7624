//! Dataset manifest: one JSON file listing every clip with its subject and label.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: f64,
    pub height: f64,
}

impl FrameSize {
    pub fn center(&self) -> (f64, f64) {
        (self.width / 2.0, self.height / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub subject_id: String,
    pub label: Label,
    pub fps: f64,
    /// Resolved against the manifest's directory.
    pub keypoint_source: PathBuf,
    /// Inclusive frame range.
    pub frame_range: (usize, usize),
}

impl ClipRecord {
    pub fn frame_count(&self) -> usize {
        self.frame_range.1 - self.frame_range.0 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub frame_size: FrameSize,
    pub clips: Vec<ClipRecord>,
}

/// Serialized clip entry, as written by generators and `stimkit import`.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub id: String,
    pub subject: String,
    pub label: String,
    pub fps: f64,
    pub keypoints: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestDocument {
    pub version: u64,
    pub frame_width: f64,
    pub frame_height: f64,
    pub clips: Vec<ManifestEntry>,
}

impl ManifestDocument {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serialization cannot fail");
        bytes.push(b'\n');
        bytes
    }
}

fn field<'a>(obj: &'a Map<String, Value>, record: &str, name: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::Schema {
        record: record.to_string(),
        field: name.to_string(),
        message: "missing".into(),
    })
}

fn schema(record: &str, name: &str, message: &str) -> Error {
    Error::Schema {
        record: record.to_string(),
        field: name.to_string(),
        message: message.to_string(),
    }
}

fn str_field(obj: &Map<String, Value>, record: &str, name: &str) -> Result<String> {
    field(obj, record, name)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| schema(record, name, "expected a string"))
}

fn uint_field(obj: &Map<String, Value>, record: &str, name: &str) -> Result<usize> {
    field(obj, record, name)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| schema(record, name, "expected a non-negative integer"))
}

fn num_field(obj: &Map<String, Value>, record: &str, name: &str) -> Result<f64> {
    field(obj, record, name)?
        .as_f64()
        .ok_or_else(|| schema(record, name, "expected a number"))
}

fn parse_clip(value: &Value, index: usize, base_dir: &Path) -> Result<ClipRecord> {
    let record = format!("clips[{index}]");
    let obj = value
        .as_object()
        .ok_or_else(|| schema(&record, "<record>", "expected an object"))?;
    let clip_id = str_field(obj, &record, "id")?;
    let record = format!("clips[{index}] ({clip_id})");
    let subject_id = str_field(obj, &record, "subject")?;
    let label = match str_field(obj, &record, "label")?.as_str() {
        "positive" => Label::Positive,
        "negative" => Label::Negative,
        other => {
            return Err(schema(
                &record,
                "label",
                &format!("expected \"positive\" or \"negative\", found {other:?}"),
            ))
        }
    };
    let fps = num_field(obj, &record, "fps")?;
    let keypoints = str_field(obj, &record, "keypoints")?;
    let start = uint_field(obj, &record, "start_frame")?;
    let end = uint_field(obj, &record, "end_frame")?;
    if fps.is_nan() || fps <= 0.0 {
        return Err(Error::Validation(format!("{record}: fps must be > 0, found {fps}")));
    }
    if start > end {
        return Err(Error::Validation(format!(
            "{record}: start_frame {start} > end_frame {end}"
        )));
    }
    Ok(ClipRecord {
        clip_id,
        subject_id,
        label,
        fps,
        keypoint_source: base_dir.join(keypoints),
        frame_range: (start, end),
    })
}

/// Parses and validates manifest bytes. Relative keypoint paths are resolved
/// against `base_dir`.
pub fn parse_manifest(raw: &[u8], source_name: &str, base_dir: &Path) -> Result<Manifest> {
    let doc: Value = serde_json::from_slice(raw).map_err(|e| Error::Parse {
        source_name: source_name.to_string(),
        offset: 0,
        message: e.to_string(),
    })?;
    let root = doc
        .as_object()
        .ok_or_else(|| schema("manifest", "<root>", "expected an object"))?;
    let version = field(root, "manifest", "version")?
        .as_u64()
        .ok_or_else(|| schema("manifest", "version", "expected an integer"))?;
    if version != MANIFEST_VERSION {
        return Err(schema(
            "manifest",
            "version",
            &format!("unsupported version {version}, expected {MANIFEST_VERSION}"),
        ));
    }
    let width = num_field(root, "manifest", "frame_width")?;
    let height = num_field(root, "manifest", "frame_height")?;
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Validation(format!(
            "manifest: frame size must be positive, found {width}x{height}"
        )));
    }
    let clips_raw = field(root, "manifest", "clips")?
        .as_array()
        .ok_or_else(|| schema("manifest", "clips", "expected an array"))?;

    let mut seen = HashSet::new();
    let mut clips = Vec::with_capacity(clips_raw.len());
    for (i, value) in clips_raw.iter().enumerate() {
        let clip = parse_clip(value, i, base_dir)?;
        if !seen.insert(clip.clip_id.clone()) {
            return Err(Error::Conflict(format!(
                "duplicate clip id {:?} at clips[{i}]",
                clip.clip_id
            )));
        }
        clips.push(clip);
    }
    Ok(Manifest {
        frame_size: FrameSize { width, height },
        clips,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&raw, &path.display().to_string(), base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(clips: &str) -> String {
        format!(r#"{{"version":1,"frame_width":640,"frame_height":480,"clips":[{clips}]}}"#)
    }

    const A: &str = r#"{"id":"a","subject":"s1","label":"positive","fps":30.0,"keypoints":"kp/a.json","start_frame":0,"end_frame":89}"#;
    const B: &str = r#"{"id":"b","subject":"s2","label":"negative","fps":30.0,"keypoints":"kp/b.json","start_frame":10,"end_frame":50}"#;

    #[test]
    fn two_clips_parse() {
        let m = parse_manifest(doc(&format!("{A},{B}")).as_bytes(), "m", Path::new("/data")).unwrap();
        assert_eq!(m.clips.len(), 2);
        assert_eq!(m.clips[1].frame_range, (10, 50));
        assert_eq!(m.clips[1].frame_count(), 41);
        assert_eq!(m.clips[0].keypoint_source, PathBuf::from("/data/kp/a.json"));
        assert_eq!(m.frame_size.width, 640.0);
    }

    #[test]
    fn duplicate_id_is_conflict() {
        let err = parse_manifest(doc(&format!("{A},{A}")).as_bytes(), "m", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Conflict(_)), "{err}");
    }

    #[test]
    fn start_after_end_is_rejected() {
        let bad = A.replace("\"start_frame\":0", "\"start_frame\":100");
        let err = parse_manifest(doc(&bad).as_bytes(), "m", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn missing_field_names_field_and_record() {
        let bad = B.replace("\"subject\":\"s2\",", "");
        let err = parse_manifest(doc(&format!("{A},{bad}")).as_bytes(), "m", Path::new(".")).unwrap_err();
        match err {
            Error::Schema { record, field, .. } => {
                assert!(record.contains("clips[1]"));
                assert_eq!(field, "subject");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_schema_error() {
        let raw = doc(A).replace("\"version\":1", "\"version\":2");
        assert!(matches!(
            parse_manifest(raw.as_bytes(), "m", Path::new(".")),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn unset_label_is_rejected() {
        let raw = doc(&A.replace("positive", "UNSET"));
        assert!(matches!(
            parse_manifest(raw.as_bytes(), "m", Path::new(".")),
            Err(Error::Schema { .. })
        ));
    }
}
