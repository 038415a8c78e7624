use std::collections::BTreeSet;
use std::path::PathBuf;

use proptest::prelude::*;

use stimkit::augmentation::{rotate_sequence, zoom_sequence};
use stimkit::evaluation::{confusion, precision_recall_f1, subject_disjoint_folds};
use stimkit::image::GrayImage;
use stimkit::neural::{ConvBlock, InputShape, Model, ModelConfig};
use stimkit::pose_features::{
    center_sequence, ClipRecord, FrameSize, HeadPose, Keypoint, KeypointSequence, Label, RasterClip,
};

const FRAME: FrameSize = FrameSize {
    width: 640.0,
    height: 480.0,
};

fn sequence() -> impl Strategy<Value = KeypointSequence> {
    let point = prop::option::weighted(0.8, (0.0..640.0f64, 0.0..480.0f64));
    let pose = prop::array::uniform6(point);
    prop::collection::vec(pose, 7)
        .prop_filter("needs a present point", |frames| frames.iter().flatten().any(Option::is_some))
        .prop_map(|frames| KeypointSequence {
            clip_id: "c".into(),
            subject_id: "s".into(),
            label: Label::Negative,
            frames: frames
                .into_iter()
                .enumerate()
                .map(|(t, pts)| HeadPose::from_points(t * 5, pts.map(|p| p.map(|(x, y)| Keypoint::new(x, y, 0.9)))))
                .collect(),
            stride: 5,
            origin_frame: 0,
            frame_size: FRAME,
        })
}

fn points(seq: &KeypointSequence) -> Vec<(f64, f64)> {
    seq.frames
        .iter()
        .flat_map(|f| f.present().map(|(_, k)| (k.x, k.y)).collect::<Vec<_>>())
        .collect()
}

fn micro() -> ModelConfig {
    ModelConfig {
        input: InputShape {
            frames: 3,
            height: 8,
            width: 8,
            channels: 1,
        },
        conv_blocks: vec![ConvBlock::new(4)],
        frame_embedding: 8,
        lstm_hidden: 4,
        seed: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centering_cancels_global_translation(seq in sequence(), dx in -300.0..300.0f64, dy in -300.0..300.0f64) {
        let moved = seq.map_points(|_, x, y| (x + dx, y + dy));
        prop_assert_eq!(center_sequence(&moved).unwrap(), center_sequence(&seq).unwrap());
    }

    #[test]
    fn centering_is_idempotent(seq in sequence()) {
        let once = center_sequence(&seq).unwrap();
        prop_assert_eq!(center_sequence(&once).unwrap(), once);
    }

    #[test]
    fn rotation_is_an_isometry(seq in sequence(), theta in -180.0..180.0f64) {
        let a = points(&seq);
        let b = points(&rotate_sequence(&seq, theta));
        prop_assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let da = (a[i].0 - a[j].0).hypot(a[i].1 - a[j].1);
                let db = (b[i].0 - b[j].0).hypot(b[i].1 - b[j].1);
                prop_assert!((da - db).abs() <= 1e-9 * (1.0 + da), "{} vs {}", da, db);
            }
        }
    }

    #[test]
    fn zoom_scales_distances(seq in sequence(), factor in 1.0..2.0f64) {
        let a = points(&seq);
        let b = points(&zoom_sequence(&seq, factor).unwrap());
        for i in 1..a.len() {
            let da = (a[i].0 - a[0].0).hypot(a[i].1 - a[0].1);
            let db = (b[i].0 - b[0].0).hypot(b[i].1 - b[0].1);
            prop_assert!((db - factor * da).abs() <= 1e-9 * (1.0 + db));
        }
    }

    #[test]
    fn metrics_ignore_sample_order(
        pairs in prop::collection::vec((0.0..1.0f64, any::<bool>()), 1..60),
        rotate in 0usize..60,
    ) {
        let (p, l): (Vec<f64>, Vec<Label>) = pairs
            .iter()
            .map(|&(p, pos)| (p, if pos { Label::Positive } else { Label::Negative }))
            .unzip();
        let mut shuffled: Vec<_> = p.iter().copied().zip(l.iter().copied()).collect();
        shuffled.reverse();
        let n = shuffled.len();
        shuffled.rotate_left(rotate % n);
        let (p2, l2): (Vec<f64>, Vec<Label>) = shuffled.into_iter().unzip();
        let a = confusion(&p, &l).unwrap();
        let b = confusion(&p2, &l2).unwrap();
        prop_assert_eq!(a, b);
        let m = precision_recall_f1(&a);
        prop_assert!((0.0..=1.0).contains(&m.f1));
        prop_assert_eq!(a.total(), p.len());
    }

    #[test]
    fn folds_are_subject_disjoint(
        clips in prop::collection::vec((0usize..9, 0usize..5), 3..40),
        k in 2usize..5,
        seed in any::<u64>(),
    ) {
        let records: Vec<ClipRecord> = clips
            .iter()
            .enumerate()
            .map(|(i, &(subject, _))| ClipRecord {
                clip_id: format!("c{i}"),
                subject_id: format!("s{subject}"),
                label: if i % 2 == 0 { Label::Positive } else { Label::Negative },
                fps: 30.0,
                keypoint_source: PathBuf::new(),
                frame_range: (0, 45),
            })
            .collect();
        let counts: Vec<usize> = clips.iter().map(|c| c.1).collect();
        let subjects: BTreeSet<String> = records.iter().map(|r| r.subject_id.clone()).collect();
        match subject_disjoint_folds(&records, &counts, k, seed) {
            Ok(plan) => {
                prop_assert_eq!(plan.assignments.len(), subjects.len());
                let mut seen = BTreeSet::new();
                for f in 0..k {
                    let members = plan.subjects_in(f);
                    prop_assert!(!members.is_empty());
                    for s in members {
                        prop_assert!(seen.insert(s.to_string()));
                    }
                }
                prop_assert_eq!(seen, subjects);
                prop_assert_eq!(subject_disjoint_folds(&records, &counts, k, seed).unwrap(), plan);
            }
            Err(_) => prop_assert!(subjects.len() < k),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_a_probability(seed in any::<u64>(), pixels in prop::collection::vec(0.0..1.0f32, 3 * 64)) {
        let model = Model::<f32>::init(&ModelConfig { seed, ..micro() }).unwrap();
        let clip = RasterClip {
            frames: pixels.chunks(64).map(|c| GrayImage::from_vec(8, 8, c.to_vec()).unwrap()).collect(),
            label: Label::Negative,
            subject_id: String::new(),
        };
        let p = model.predict_clip(&clip).unwrap();
        prop_assert!(p > 0.0 && p < 1.0, "{}", p);
    }
}
