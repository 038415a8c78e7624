//! Subject-disjoint k-fold cross-validation and the F1 metric stack.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::{AugmentSpec, KeypointAugmenter};
use crate::error::{Error, Result};
use crate::neural::{
    classify, train_with_options, ClipAugmenter, Model, ModelCheckpoint, ModelConfig, TrainConfig, TrainHistory, TrainOptions,
};
use crate::pipeline::{rasterize_all, PipelineSettings, PreparedDataset};
use crate::pose_features::{rasterize, ClipRecord, RasterSpec, KeypointSequence, Label};
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Subject id → fold index.
    pub assignments: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignments.get(subject).copied()
    }

    pub fn subjects_in(&self, fold: usize) -> BTreeSet<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Assigns whole subjects to `k` folds, balancing window counts.
///
/// Subjects are shuffled with the seed, then taken in decreasing window
/// count (stable, so the shuffle breaks ties) and each is placed in the fold
/// holding the fewest windows so far; ties go to the fold with fewer
/// subjects, then the lower index. `window_counts[i]` belongs to `clips[i]`.
pub fn subject_disjoint_folds(clips: &[ClipRecord], window_counts: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if window_counts.len() != clips.len() {
        return Err(Error::Validation(format!(
            "{} window counts for {} clips",
            window_counts.len(),
            clips.len()
        )));
    }
    if k < 2 {
        return Err(Error::config("k", format!("need at least 2 folds for a held-out split, got {k}")));
    }
    let mut per_subject: BTreeMap<&str, (usize, bool, bool)> = BTreeMap::new();
    for (clip, &w) in clips.iter().zip(window_counts) {
        let e = per_subject.entry(clip.subject_id.as_str()).or_default();
        e.0 += w;
        if w > 0 {
            match clip.label {
                Label::Positive => e.1 = true,
                Label::Negative => e.2 = true,
            }
        }
    }
    if per_subject.len() < k {
        return Err(Error::config(
            "k",
            format!("{} distinct subjects cannot fill {k} folds", per_subject.len()),
        ));
    }
    let mut subjects: Vec<(&str, usize)> = per_subject.iter().map(|(s, e)| (*s, e.0)).collect();
    subjects.shuffle(&mut derive_rng(seed, "folds", &[]));
    subjects.sort_by(|a, b| b.1.cmp(&a.1));

    let mut windows = vec![0usize; k];
    let mut members = vec![0usize; k];
    let mut assignments = BTreeMap::new();
    for (s, w) in subjects {
        let f = (0..k).min_by_key(|&f| (windows[f], members[f], f)).unwrap();
        windows[f] += w;
        members[f] += 1;
        assignments.insert(s.to_string(), f);
    }

    let mut warnings = Vec::new();
    for f in 0..k {
        if members[f] == 1 {
            warnings.push(format!("fold {f} holds a single subject"));
        }
        let (mut pos, mut neg) = (false, false);
        for (s, e) in &per_subject {
            if assignments[*s] != f {
                pos |= e.1;
                neg |= e.2;
            }
        }
        if !(pos && neg) {
            warnings.push(format!("training split for fold {f} lacks one of the labels"));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted_positive: bool, actual_positive: bool) {
        match (predicted_positive, actual_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Counts predictions at threshold 0.5 (exactly 0.5 counts as negative).
pub fn confusion(predictions: &[f64], labels: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        cm.add(classify(p), l.is_positive());
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio was 0/0 and was reported as 0.
    pub degenerate: bool,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Metrics {
    let mut degenerate = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            degenerate = true;
            0.0
        } else {
            num / den
        }
    };
    let precision = ratio(cm.tp as f64, (cm.tp + cm.fp) as f64);
    let recall = ratio(cm.tp as f64, (cm.tp + cm.fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Metrics {
        precision,
        recall,
        f1,
        degenerate,
    }
}

/// Arithmetic mean of per-fold F1 scores.
pub fn mean_f1(fold_f1: &[f64]) -> f64 {
    if fold_f1.is_empty() {
        return 0.0;
    }
    fold_f1.iter().sum::<f64>() / fold_f1.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

impl LevelResult {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        LevelResult {
            metrics: precision_recall_f1(&confusion),
            confusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub train_windows: usize,
    pub test_windows: usize,
    pub final_train_loss: Option<f64>,
    /// Window-level metrics.
    pub window: LevelResult,
    /// Clip-level metrics by majority vote over a clip's windows.
    pub clip: LevelResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    pub per_fold: Vec<FoldResult>,
    /// Mean of the per-fold window-level F1 scores.
    pub mean_f1: f64,
    pub clip_mean_f1: f64,
    pub warnings: Vec<String>,
}

impl CvReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }

    /// Plain-text per-fold table.
    pub fn table(&self) -> String {
        let mut s = String::from("fold  train  test  precision  recall     F1\n");
        for f in &self.per_fold {
            let m = &f.window.metrics;
            s.push_str(&format!(
                "{:>4}  {:>5}  {:>4}  {:>9.1}%  {:>5.1}%  {:>5.1}%\n",
                f.fold + 1,
                f.train_windows,
                f.test_windows,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1
            ));
        }
        s.push_str(&format!("mean F1 (window level): {:.2}%\n", 100.0 * self.mean_f1));
        s.push_str(&format!("mean F1 (clip level):   {:.2}%\n", 100.0 * self.clip_mean_f1));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub fold: usize,
    pub clip_id: String,
    pub subject_id: String,
    pub origin_frame: usize,
    pub label: Label,
    pub probability: f64,
}

pub fn predictions_csv(preds: &[WindowPrediction]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if preds.is_empty() {
        w.write_record(["fold", "clip_id", "subject_id", "origin_frame", "label", "probability"])
            .expect("in-memory csv write");
    }
    for p in preds {
        w.serialize(p).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is UTF-8")
}

/// Everything a cross-validation run produces.
pub struct CvOutcome {
    pub report: CvReport,
    pub plan: FoldPlan,
    /// One trained model per fold.
    pub checkpoints: Vec<ModelCheckpoint>,
    pub predictions: Vec<WindowPrediction>,
}

#[derive(Serialize)]
struct Fingerprint<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    augment: &'a AugmentSpec,
    pipeline: &'a PipelineSettings,
    k: usize,
    seed: u64,
}

/// Trains a model on keypoint windows, augmenting each epoch unless `augment`
/// is the identity. The checkpoint records `pipeline`.
pub fn fit(
    windows: &[KeypointSequence],
    model: &ModelConfig,
    train: &TrainConfig,
    augment: &AugmentSpec,
    pipeline: &PipelineSettings,
    allow_single_class: bool,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    let train_set = rasterize_all(windows, &pipeline.raster);
    let augmenter = KeypointAugmenter {
        sequences: windows,
        spec: *augment,
        raster: pipeline.raster,
    };
    let use_aug = *augment != AugmentSpec::identity();
    let (mut checkpoint, history) = train_with_options(
        model,
        &train_set,
        train,
        use_aug.then_some(&augmenter as &dyn ClipAugmenter),
        &TrainOptions {
            allow_single_class,
            on_epoch: None,
        },
    )?;
    checkpoint.training_metadata.pipeline = Some(*pipeline);
    Ok((checkpoint, history))
}

/// Probabilities and window/clip-level metrics of a trained model on labelled windows.
#[derive(Debug, Clone)]
pub struct Scored {
    pub probabilities: Vec<f64>,
    pub window: LevelResult,
    /// Majority vote of each clip's windows; a tie counts as negative.
    pub clip: LevelResult,
}

pub fn score_windows(model: &Model<f32>, windows: &[&KeypointSequence], raster: &RasterSpec) -> Result<Scored> {
    let mut window_cm = ConfusionMatrix::default();
    let mut votes: BTreeMap<&str, (usize, usize, Label)> = BTreeMap::new();
    let mut probabilities = Vec::with_capacity(windows.len());
    for w in windows {
        let p = model.predict_clip(&rasterize(w, raster))?;
        window_cm.add(classify(p), w.label.is_positive());
        let v = votes.entry(w.clip_id.as_str()).or_insert((0, 0, w.label));
        v.0 += classify(p) as usize;
        v.1 += 1;
        probabilities.push(p);
    }
    let mut clip_cm = ConfusionMatrix::default();
    for (positive_votes, n, label) in votes.values() {
        clip_cm.add(2 * positive_votes > *n, label.is_positive());
    }
    Ok(Scored {
        probabilities,
        window: LevelResult::from_confusion(window_cm),
        clip: LevelResult::from_confusion(clip_cm),
    })
}

/// Inputs of one cross-validation run.
pub struct CvSetup<'a> {
    pub clips: &'a [ClipRecord],
    pub dataset: &'a PreparedDataset,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub augment: &'a AugmentSpec,
    pub pipeline: &'a PipelineSettings,
    pub k: usize,
    pub seed: u64,
}

/// Trains one model per fold on the other folds' windows (augmented) and
/// scores the held-out windows without augmentation.
///
/// Each fold's model and shuffling seeds derive from `(seed, fold)`.
pub fn cross_validate(setup: &CvSetup<'_>) -> Result<CvOutcome> {
    let CvSetup {
        clips,
        dataset,
        model,
        train,
        augment,
        pipeline,
        k,
        seed,
    } = *setup;
    augment.validate("augment")?;
    train.validate("train")?;
    model.validate("model")?;
    let counts = dataset.window_counts_by_clip(clips.len());
    let plan = subject_disjoint_folds(clips, &counts, k, seed)?;
    let fingerprint = {
        let json = serde_json::to_vec(&Fingerprint {
            model,
            train,
            augment,
            pipeline,
            k,
            seed,
        })
        .expect("fingerprint serializes");
        hex::encode(Sha256::digest(&json))
    };

    let fold_of_window: Vec<usize> = dataset.windows.iter().map(|w| plan.assignments[&w.subject_id]).collect();
    let mut warnings = plan.warnings.clone();
    warnings.extend(dataset.warnings.iter().cloned());
    let mut per_fold = Vec::with_capacity(k);
    let mut checkpoints = Vec::with_capacity(k);
    let mut predictions = Vec::new();

    for fold in 0..k {
        let wrap = |e: Error| Error::Fold {
            fold,
            source: Box::new(e),
        };
        let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
            (0..dataset.windows.len()).partition(|&i| fold_of_window[i] != fold);
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(wrap(Error::Validation(format!(
                "{} training and {} held-out windows",
                train_idx.len(),
                test_idx.len()
            ))));
        }
        let train_seqs: Vec<_> = train_idx.iter().map(|&i| dataset.windows[i].clone()).collect();
        let fold_seed: u64 = derive_rng(seed, "fold", &[fold as u64]).gen();
        log::info!(
            "fold {}/{k}: training on {} windows, testing on {}",
            fold + 1,
            train_idx.len(),
            test_idx.len()
        );
        let (checkpoint, history) = fit(
            &train_seqs,
            &ModelConfig {
                seed: fold_seed,
                ..model.clone()
            },
            &TrainConfig {
                seed: fold_seed,
                ..*train
            },
            augment,
            pipeline,
            true,
        )
        .map_err(wrap)?;
        let trained = checkpoint.model().map_err(wrap)?;

        let test_windows: Vec<&KeypointSequence> = test_idx.iter().map(|&i| &dataset.windows[i]).collect();
        let scored = score_windows(&trained, &test_windows, &pipeline.raster).map_err(wrap)?;
        for (w, &p) in test_windows.iter().zip(&scored.probabilities) {
            predictions.push(WindowPrediction {
                fold,
                clip_id: w.clip_id.clone(),
                subject_id: w.subject_id.clone(),
                origin_frame: w.origin_frame,
                label: w.label,
                probability: p,
            });
        }

        let test_subjects: Vec<String> = plan.subjects_in(fold).into_iter().map(String::from).collect();
        let train_subjects: Vec<String> = plan
            .assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(s, _)| s.clone())
            .collect();
        let result = FoldResult {
            fold,
            train_subjects,
            test_subjects,
            train_windows: train_idx.len(),
            test_windows: test_idx.len(),
            final_train_loss: history.epoch_losses.last().copied(),
            window: scored.window,
            clip: scored.clip,
        };
        log::info!("fold {}/{k}: F1 {:.4}", fold + 1, result.window.metrics.f1);
        per_fold.push(result);
        checkpoints.push(checkpoint);
    }

    let fold_f1: Vec<f64> = per_fold.iter().map(|f| f.window.metrics.f1).collect();
    let clip_f1: Vec<f64> = per_fold.iter().map(|f| f.clip.metrics.f1).collect();
    Ok(CvOutcome {
        report: CvReport {
            k,
            seed,
            config_fingerprint: fingerprint,
            mean_f1: mean_f1(&fold_f1),
            clip_mean_f1: mean_f1(&clip_f1),
            per_fold,
            warnings,
        },
        plan,
        checkpoints,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clips(spec: &[(&str, Label)]) -> Vec<ClipRecord> {
        spec.iter()
            .enumerate()
            .map(|(i, &(s, l))| ClipRecord {
                clip_id: format!("c{i}"),
                subject_id: s.into(),
                label: l,
                fps: 30.0,
                keypoint_source: "k".into(),
                frame_range: (0, 40),
            })
            .collect()
    }

    #[test]
    fn six_equal_subjects_two_per_fold() {
        let names = ["a", "b", "c", "d", "e", "f"];
        let cs = clips(&names.map(|n| (n, Label::Positive)));
        let plan = subject_disjoint_folds(&cs, &[4; 6], 3, 17).unwrap();
        for f in 0..3 {
            assert_eq!(plan.subjects_in(f).len(), 2);
        }
        assert_eq!(plan.assignments.len(), 6);
    }

    #[test]
    fn dominant_subject_alone() {
        let cs = clips(&[
            ("big", Label::Positive),
            ("a", Label::Negative),
            ("b", Label::Negative),
            ("c", Label::Positive),
            ("d", Label::Negative),
        ]);
        let counts = [90, 3, 2, 3, 2];
        for seed in 0..10 {
            let plan = subject_disjoint_folds(&cs, &counts, 3, seed).unwrap();
            let f = plan.fold_of("big").unwrap();
            assert_eq!(plan.subjects_in(f).len(), 1);
            let others: Vec<usize> = (0..3).filter(|&g| g != f).map(|g| plan.subjects_in(g).len()).collect();
            assert_eq!(others, vec![2, 2]);
        }
    }

    #[test]
    fn fold_count_rules() {
        let cs = clips(&[("a", Label::Positive), ("b", Label::Negative)]);
        assert!(matches!(subject_disjoint_folds(&cs, &[1, 1], 1, 0), Err(Error::Config { .. })));
        assert!(matches!(subject_disjoint_folds(&cs, &[1, 1], 3, 0), Err(Error::Config { .. })));
        let plan = subject_disjoint_folds(&cs, &[1, 1], 2, 0).unwrap();
        assert!(!plan.warnings.is_empty());
    }

    #[test]
    fn confusion_examples() {
        let labels = [Label::Positive, Label::Positive, Label::Negative, Label::Negative];
        let cm = confusion(&[0.9, 0.9, 0.2, 0.6], &labels).unwrap();
        assert_eq!(
            cm,
            ConfusionMatrix {
                tp: 2,
                fp: 1,
                fn_: 0,
                tn: 1
            }
        );
        assert_eq!(confusion(&[], &[]).unwrap(), ConfusionMatrix::default());
        let tie = confusion(&[0.5], &[Label::Positive]).unwrap();
        assert_eq!(tie.fn_, 1);
        assert!(confusion(&[0.1], &[]).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = precision_recall_f1(&ConfusionMatrix {
            tp: 3,
            ..Default::default()
        });
        assert_eq!(m.f1, 1.0);
        let m = precision_recall_f1(&ConfusionMatrix {
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 0,
        });
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(!m.degenerate);
        let m = precision_recall_f1(&ConfusionMatrix::default());
        assert_eq!(m.f1, 0.0);
        assert!(m.degenerate);
    }

    #[test]
    fn confusion_serializes_fn_field() {
        let v = serde_json::to_value(ConfusionMatrix::default()).unwrap();
        assert!(v.get("fn").is_some());
    }
}
