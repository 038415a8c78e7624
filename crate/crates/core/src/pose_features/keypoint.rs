use serde::{Deserialize, Serialize};

/// Number of landmarks in the OpenPose BODY_25 layout.
pub const BODY_25_LEN: usize = 25;

/// Default confidence below which a detection counts as absent.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub const ABSENT: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    };

    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Keypoint { x, y, confidence }
    }

    pub fn is_present(&self, threshold: f64) -> bool {
        self.confidence >= threshold && self.confidence > 0.0
    }
}

/// One frame of BODY_25 detections; absent slots are `(0, 0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub frame_index: usize,
    pub keypoints: [Keypoint; BODY_25_LEN],
}

impl PoseFrame {
    pub fn absent(frame_index: usize) -> Self {
        PoseFrame {
            frame_index,
            keypoints: [Keypoint::ABSENT; BODY_25_LEN],
        }
    }

    /// Sum of confidences over the head-region slots.
    pub fn head_confidence(&self) -> f64 {
        HeadPart::ALL
            .iter()
            .map(|p| self.keypoints[p.body25_index()].confidence)
            .sum()
    }
}

/// Head-region landmarks retained by the representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPart {
    Nose,
    Neck,
    RightEye,
    LeftEye,
    RightEar,
    LeftEar,
}

impl HeadPart {
    pub const ALL: [HeadPart; 6] = [
        HeadPart::Nose,
        HeadPart::Neck,
        HeadPart::RightEye,
        HeadPart::LeftEye,
        HeadPart::RightEar,
        HeadPart::LeftEar,
    ];

    /// Skeleton edges drawn between head parts.
    pub const EDGES: [(HeadPart, HeadPart); 5] = [
        (HeadPart::Nose, HeadPart::Neck),
        (HeadPart::Nose, HeadPart::RightEye),
        (HeadPart::Nose, HeadPart::LeftEye),
        (HeadPart::RightEye, HeadPart::RightEar),
        (HeadPart::LeftEye, HeadPart::LeftEar),
    ];

    pub fn body25_index(self) -> usize {
        match self {
            HeadPart::Nose => 0,
            HeadPart::Neck => 1,
            HeadPart::RightEye => 15,
            HeadPart::LeftEye => 16,
            HeadPart::RightEar => 17,
            HeadPart::LeftEar => 18,
        }
    }

    /// Position in [`HeadPart::ALL`].
    pub fn slot(self) -> usize {
        self as usize
    }
}

/// Head-region subset of a [`PoseFrame`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPose {
    pub frame_index: usize,
    /// Indexed by [`HeadPart::slot`].
    pub points: [Option<Keypoint>; 6],
    pub edges: Vec<(HeadPart, HeadPart)>,
}

impl HeadPose {
    pub fn empty(frame_index: usize) -> Self {
        HeadPose {
            frame_index,
            points: [None; 6],
            edges: Vec::new(),
        }
    }

    /// Builds a head pose from explicit points; edges are derived from presence.
    pub fn from_points(frame_index: usize, points: [Option<Keypoint>; 6]) -> Self {
        let mut pose = HeadPose {
            frame_index,
            points,
            edges: Vec::new(),
        };
        pose.rebuild_edges();
        pose
    }

    pub fn get(&self, part: HeadPart) -> Option<&Keypoint> {
        self.points[part.slot()].as_ref()
    }

    pub fn present(&self) -> impl Iterator<Item = (HeadPart, &Keypoint)> {
        HeadPart::ALL
            .iter()
            .filter_map(move |&p| self.points[p.slot()].as_ref().map(|k| (p, k)))
    }

    pub fn present_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }

    /// A frame is usable when at least two head parts were detected.
    pub fn is_valid(&self) -> bool {
        self.present_count() >= 2
    }

    pub fn rebuild_edges(&mut self) {
        self.edges = HeadPart::EDGES
            .iter()
            .copied()
            .filter(|(a, b)| self.points[a.slot()].is_some() && self.points[b.slot()].is_some())
            .collect();
    }

    pub fn map_points(&self, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> HeadPose {
        let mut out = self.clone();
        for kp in out.points.iter_mut().flatten() {
            let (x, y) = f(kp.x, kp.y);
            kp.x = x;
            kp.y = y;
        }
        out
    }
}

/// Keeps the nose, neck, eyes and ears whose confidence reaches `confidence_threshold`.
pub fn filter_head(frame: &PoseFrame, confidence_threshold: f64) -> HeadPose {
    let mut points = [None; 6];
    for part in HeadPart::ALL {
        let kp = frame.keypoints[part.body25_index()];
        if kp.is_present(confidence_threshold) {
            points[part.slot()] = Some(kp);
        }
    }
    HeadPose::from_points(frame.frame_index, points)
}
