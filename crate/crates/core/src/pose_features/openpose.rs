//! Reading and writing OpenPose-style keypoint JSON.
//!
//! Per-frame layout: `{"version": 1.3, "people": [{"pose_keypoints_2d": [x0, y0, c0, x1, ...]}]}`
//! with 75 numbers per person (BODY_25). A consolidated keypoint file is a JSON
//! array of such frame objects, array position = frame index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::keypoint::{Keypoint, PoseFrame, BODY_25_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct RawFrame {
    people: Vec<RawPerson>,
}

#[derive(Debug, Deserialize)]
struct RawPerson {
    #[serde(default)]
    pose_keypoints_2d: Vec<f64>,
}

#[derive(Serialize)]
struct OutFrame<'a> {
    version: f64,
    people: Vec<OutPerson<'a>>,
}

#[derive(Serialize)]
struct OutPerson<'a> {
    pose_keypoints_2d: &'a [f64],
}

fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in raw.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(raw.len());
        }
        offset += l.len() + 1;
    }
    raw.len()
}

fn parse_error(source_name: &str, raw: &[u8], err: serde_json::Error) -> Error {
    Error::Parse {
        source_name: source_name.to_string(),
        offset: byte_offset(raw, err.line(), err.column()),
        message: err.to_string(),
    }
}

fn person_to_frame(source_name: &str, frame_index: usize, flat: &[f64]) -> Result<PoseFrame> {
    if flat.len() % 3 != 0 {
        return Err(Error::Format(format!(
            "{source_name}: pose_keypoints_2d length {} is not divisible by 3",
            flat.len()
        )));
    }
    if flat.len() != BODY_25_LEN * 3 {
        return Err(Error::Format(format!(
            "{source_name}: expected {} values (BODY_25), found {}",
            BODY_25_LEN * 3,
            flat.len()
        )));
    }
    let mut frame = PoseFrame::absent(frame_index);
    for (slot, triple) in frame.keypoints.iter_mut().zip(flat.chunks_exact(3)) {
        *slot = Keypoint::new(triple[0], triple[1], triple[2]);
    }
    Ok(frame)
}

fn select_person(source_name: &str, frame_index: usize, raw: RawFrame) -> Result<PoseFrame> {
    let mut best: Option<PoseFrame> = None;
    for person in &raw.people {
        let candidate = person_to_frame(source_name, frame_index, &person.pose_keypoints_2d)?;
        match &best {
            Some(b) if b.head_confidence() >= candidate.head_confidence() => {}
            _ => best = Some(candidate),
        }
    }
    Ok(best.unwrap_or_else(|| PoseFrame::absent(frame_index)))
}

/// Parses one per-frame OpenPose JSON document.
///
/// When several people are detected the one with the highest summed head
/// confidence wins (first one on ties). An empty `people` array yields an
/// all-absent frame.
pub fn import_openpose_frame(raw: &[u8], frame_index: usize, source_name: &str) -> Result<PoseFrame> {
    let parsed: RawFrame =
        serde_json::from_slice(raw).map_err(|e| parse_error(source_name, raw, e))?;
    select_person(source_name, frame_index, parsed)
}

/// Parses a consolidated keypoint file (JSON array of per-frame documents).
pub fn import_consolidated(raw: &[u8], source_name: &str) -> Result<Vec<PoseFrame>> {
    let parsed: Vec<RawFrame> =
        serde_json::from_slice(raw).map_err(|e| parse_error(source_name, raw, e))?;
    parsed
        .into_iter()
        .enumerate()
        .map(|(i, f)| select_person(&format!("{source_name}[{i}]"), i, f))
        .collect()
}

/// Lists `*.json` files of a per-frame directory in lexicographic order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads keypoints from either a per-frame directory or a consolidated file.
pub fn load_keypoints(path: &Path) -> Result<Vec<PoseFrame>> {
    if path.is_dir() {
        list_frame_files(path)?
            .iter()
            .enumerate()
            .map(|(i, file)| {
                let raw = fs::read(file).map_err(|e| Error::io(file, e))?;
                import_openpose_frame(&raw, i, &file.display().to_string())
            })
            .collect()
    } else {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        import_consolidated(&raw, &path.display().to_string())
    }
}

/// Serializes frames as a consolidated keypoint file. All-absent frames are
/// written with an empty `people` array.
pub fn write_consolidated(frames: &[PoseFrame]) -> Vec<u8> {
    let flats: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            f.keypoints
                .iter()
                .flat_map(|k| [k.x, k.y, k.confidence])
                .collect()
        })
        .collect();
    let out: Vec<OutFrame> = frames
        .iter()
        .zip(&flats)
        .map(|(frame, flat)| {
            let empty = frame.keypoints.iter().all(|k| *k == Keypoint::ABSENT);
            OutFrame {
                version: 1.3,
                people: if empty {
                    Vec::new()
                } else {
                    vec![OutPerson {
                        pose_keypoints_2d: flat,
                    }]
                },
            }
        })
        .collect();
    let mut bytes = serde_json::to_vec(&out).expect("keypoint serialization cannot fail");
    bytes.push(b'\n');
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_person(offset: f64, head_conf: f64) -> Vec<f64> {
        let mut v = Vec::new();
        for i in 0..25 {
            let c = if [0, 1, 15, 16, 17, 18].contains(&i) {
                head_conf
            } else {
                0.5
            };
            v.extend([offset + i as f64, offset + 100.0 + i as f64, c]);
        }
        v
    }

    #[test]
    fn flat_array_maps_triples_to_slots() {
        // Hand-written fixture: slot i comes from values (3i, 3i+1, 3i+2).
        let values: Vec<String> = (0..75).map(|i| format!("{}.5", i)).collect();
        let doc = format!(
            "{{\"version\":1.3,\"people\":[{{\"person_id\":[-1],\"pose_keypoints_2d\":[{}],\"face_keypoints_2d\":[]}}]}}",
            values.join(",")
        );
        let frame = import_openpose_frame(doc.as_bytes(), 7, "fixture.json").unwrap();
        assert_eq!(frame.frame_index, 7);
        for (i, kp) in frame.keypoints.iter().enumerate() {
            assert_eq!(kp.x, (3 * i) as f64 + 0.5);
            assert_eq!(kp.y, (3 * i + 1) as f64 + 0.5);
            assert_eq!(kp.confidence, (3 * i + 2) as f64 + 0.5);
        }
    }

    #[test]
    fn empty_people_gives_absent_frame() {
        let frame = import_openpose_frame(br#"{"version":1.3,"people":[]}"#, 2, "f").unwrap();
        assert_eq!(frame, PoseFrame::absent(2));
    }

    #[test]
    fn picks_person_with_highest_head_confidence() {
        let a = flat_person(0.0, 0.3);
        let b = flat_person(1000.0, 0.8);
        let doc = serde_json::json!({"people": [{"pose_keypoints_2d": a}, {"pose_keypoints_2d": b}]});
        let frame = import_openpose_frame(doc.to_string().as_bytes(), 0, "f").unwrap();
        assert_eq!(frame.keypoints[0].x, 1000.0);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let raw = b"{\"people\": [\n  {\"pose_keypoints_2d\": [1, 2,, 3]}]}";
        match import_openpose_frame(raw, 0, "broken.json") {
            Err(Error::Parse {
                source_name,
                offset,
                ..
            }) => {
                assert_eq!(source_name, "broken.json");
                assert_eq!(raw[offset - 1], b',');
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn length_not_multiple_of_three_is_format_error() {
        let doc = br#"{"people":[{"pose_keypoints_2d":[1,2,3,4]}]}"#;
        assert!(matches!(
            import_openpose_frame(doc, 0, "f"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn consolidated_round_trip_is_exact() {
        let mut frames = vec![PoseFrame::absent(0), PoseFrame::absent(1)];
        frames[1].keypoints[0] = Keypoint::new(123.456_78_f32 as f64, 0.1_f32 as f64, 0.9_f32 as f64);
        frames[1].keypoints[16] = Keypoint::new(1e-3, 479.999, 0.33);
        let bytes = write_consolidated(&frames);
        let back = import_consolidated(&bytes, "mem").unwrap();
        assert_eq!(back, frames);
    }
}
