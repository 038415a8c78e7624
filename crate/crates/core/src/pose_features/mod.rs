//! Head-keypoint feature representation: ingest pose data, keep the head
//! region, cut stride-sampled windows and rasterize them for the network.

pub mod keypoint;
pub mod manifest;
pub mod openpose;
pub mod raster;
pub mod windows;

pub use keypoint::{filter_head, HeadPart, HeadPose, Keypoint, PoseFrame, BODY_25_LEN, DEFAULT_CONFIDENCE_THRESHOLD};
pub use manifest::{load_manifest, parse_manifest, ClipRecord, FrameSize, Label, Manifest, ManifestDocument, ManifestEntry, MANIFEST_VERSION};
pub use openpose::{import_consolidated, import_openpose_frame, load_keypoints, write_consolidated};
pub use raster::{rasterize, rasterize_frame, CenterMode, RasterClip, RasterSpec};
pub use windows::{center_sequence, load_clip_heads, sample_windows, KeypointSequence, WindowParams, WindowSet};
