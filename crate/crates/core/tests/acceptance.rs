//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 3 4`.
//!
//! Criterion 7 runs on real keypoints when `STIMKIT_PROTOCOL_MANIFEST` names a
//! manifest; otherwise on a synthetic stand-in with the same layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use stimkit::evaluation::{mean_f1, CvReport, WindowPrediction};
use stimkit::image::GrayImage;
use stimkit::neural::gradcheck::{check_conv2d, check_dense, check_lstm, check_maxpool2, grad_check, DEFAULT_EPSILON};
use stimkit::neural::{Activation, ConvBlock, InputShape, ModelConfig};
use stimkit::optical_flow::{farneback_dense, lucas_kanade_grid, FarnebackParams, FlowField, LucasKanadeParams};
use stimkit::pipeline::{windows_from_heads, PipelineSettings};
use stimkit::pose_features::{filter_head, load_manifest, ClipRecord, HeadPose, Label, RasterClip};
use stimkit::rng::derive_rng;
use stimkit::synthgen::{gen_clip, gen_profiles, MotionParams, SynthConfig};

const BIN: &str = env!("CARGO_BIN_EXE_stimkit");

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let m = mean_f1(&[0.833, 0.890, 1.000]);
    check((m - 0.9077).abs() <= 0.00005, format!("mean_f1 = {m:.6}, target 0.9077 +/- 0.00005"))
}

fn criterion_3() -> Outcome {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in 1..=3 {
        worst.push((format!("conv seed {seed}"), check_conv2d(seed, DEFAULT_EPSILON)));
        worst.push((format!("pool seed {seed}"), check_maxpool2(seed, DEFAULT_EPSILON)));
        for act in [Activation::None, Activation::Relu, Activation::Sigmoid] {
            worst.push((format!("dense {act:?} seed {seed}"), check_dense(seed, act, DEFAULT_EPSILON)));
        }
        worst.push((format!("lstm 3 steps seed {seed}"), check_lstm(seed, 3, DEFAULT_EPSILON)));
    }
    let micro = ModelConfig {
        input: InputShape {
            frames: 3,
            height: 8,
            width: 8,
            channels: 1,
        },
        conv_blocks: vec![ConvBlock::new(4)],
        frame_embedding: 8,
        lstm_hidden: 4,
        seed: 21,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sample = RasterClip {
        frames: (0..3)
            .map(|_| GrayImage::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0)))
            .collect(),
        label: Label::Positive,
        subject_id: "s".into(),
    };
    let report = grad_check(&micro, &sample, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    worst.push(("end-to-end micro model".into(), report.max_relative_error));
    let (name, err) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a });
    let all_ok = worst.iter().all(|(_, e)| *e < 1e-4);
    check(
        all_ok,
        format!(
            "{} checks, max relative error {err:.2e} ({name}); end-to-end {:.2e} over {} parameters, {} kink retries",
            worst.len(),
            report.max_relative_error,
            report.checked,
            report.kink_retries
        ),
    )
}

fn texture(w: usize, h: usize, dx: f64, dy: f64) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let (x, y) = (x as f64 - dx, y as f64 - dy);
        (0.5 + 0.15 * (x / 3.1).sin() * (y / 3.7).cos()
            + 0.1 * ((x + 0.6 * y) / 4.3).sin()
            + 0.08 * ((0.8 * x - y) / 2.9).cos()) as f32
    })
}

fn zero_or_invalid(flow: &FlowField) -> bool {
    flow.vectors
        .iter()
        .zip(&flow.valid)
        .all(|(v, &ok)| !ok || (v.0.abs() <= 1e-6 && v.1.abs() <= 1e-6))
}

fn criterion_4() -> Outcome {
    let a = texture(96, 96, 0.0, 0.0);
    let b = texture(96, 96, 2.0, 1.0);
    let lk = lucas_kanade_grid(&a, &b, &LucasKanadeParams::default()).map_err(|e| e.to_string())?;
    let fb = farneback_dense(&a, &b, &FarnebackParams::default()).map_err(|e| e.to_string())?;
    let lk_frac = lk.fraction_within((2.0, 1.0), 0.5);
    let fb_frac = fb.fraction_within((2.0, 1.0), 0.5);
    let lk_same = lucas_kanade_grid(&a, &a, &LucasKanadeParams::default()).map_err(|e| e.to_string())?;
    let fb_same = farneback_dense(&a, &a, &FarnebackParams::default()).map_err(|e| e.to_string())?;
    let zero = zero_or_invalid(&lk_same) && zero_or_invalid(&fb_same);
    check(
        lk_frac >= 0.8 && fb_frac >= 0.8 && zero,
        format!(
            "(2,1) shift within 0.5 px: LK {:.1}% of {} valid, Farneback {:.1}% of {} valid; identical frames zero/invalid: {zero}",
            100.0 * lk_frac,
            lk.valid_count(),
            100.0 * fb_frac,
            fb.valid_count()
        ),
    )
}

fn centroid(pose: &HeadPose) -> Option<(f64, f64)> {
    let n = pose.present_count();
    (n > 0).then(|| {
        let (sx, sy) = pose.present().fold((0.0, 0.0), |a, (_, k)| (a.0 + k.x, a.1 + k.y));
        (sx / n as f64, sy / n as f64)
    })
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Stable clips under camera drift: after centering, how far each frame's
/// head centroid sits from the frame center, relative to the path the camera
/// travelled over the window's frame span.
fn criterion_5() -> Outcome {
    let synth = SynthConfig::default();
    let frame = synth.frame_size();
    let settings = PipelineSettings::default();
    let span = settings.window.span();
    let profiles = gen_profiles(100, &synth, &mut derive_rng(5, "robustness-profiles", &[])).map_err(|e| e.to_string())?;
    let mut ratios = Vec::new();
    let mut literal = Vec::new();
    for (i, profile) in profiles.iter().enumerate() {
        let mut rng = derive_rng(5, "robustness-clip", &[i as u64]);
        let clip = gen_clip(profile, &MotionParams::stable(1.5), synth.n_frames, synth.fps, frame, &mut rng)
            .map_err(|e| e.to_string())?;
        let record = ClipRecord {
            clip_id: format!("stable_{i:03}"),
            subject_id: profile.subject_id.clone(),
            label: Label::Negative,
            fps: synth.fps,
            keypoint_source: PathBuf::new(),
            frame_range: (0, synth.n_frames - 1),
        };
        let heads: Vec<_> = clip.frames.iter().map(|f| filter_head(f, settings.confidence_threshold)).collect();
        let windows = windows_from_heads(&record, frame, &heads, &settings).map_err(|e| e.to_string())?;
        for w in &windows.windows {
            let o = w.origin_frame;
            let drift: f64 = (o + 1..o + span).map(|t| dist(clip.camera_offsets[t], clip.camera_offsets[t - 1])).sum();
            let cents: Vec<_> = w.frames.iter().filter_map(centroid).collect();
            let deviation = cents.iter().map(|&c| dist(c, frame.center())).sum::<f64>() / cents.len() as f64;
            let path: f64 = cents.windows(2).map(|p| dist(p[0], p[1])).sum();
            ratios.push(deviation / drift);
            literal.push(path / drift);
        }
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    let lit = literal.iter().sum::<f64>() / literal.len() as f64;
    check(
        mean < 0.2,
        format!(
            "{} windows from 100 stable clips: mean centroid displacement from frame center / raw drift path = {mean:.4} (max {max:.4}), \
             target < 0.2; inter-frame centroid path / raw drift path = {lit:.3} (unchanged by centering)",
            ratios.len()
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "stimkit {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_config(path: &Path, value: serde_json::Value) -> Result<(), String> {
    std::fs::write(path, serde_json::to_vec_pretty(&value).unwrap()).map_err(|e| e.to_string())
}

struct CvRun {
    dir: PathBuf,
    report: CvReport,
    table: String,
    seconds: f64,
}

fn cv_run(manifest: &Path, out: &Path, extra: serde_json::Value) -> Result<CvRun, String> {
    let mut cfg = json!({ "seed": 1, "manifest": manifest, "output_dir": out });
    if let (Some(c), Some(e)) = (cfg.as_object_mut(), extra.as_object()) {
        c.extend(e.clone());
    }
    let cfg_path = out.with_extension("json");
    write_config(&cfg_path, cfg)?;
    let start = Instant::now();
    let table = run_cli(&["cv", "--config", cfg_path.to_str().unwrap()])?;
    let seconds = start.elapsed().as_secs_f64();
    let raw = std::fs::read(out.join("cv_report.json")).map_err(|e| e.to_string())?;
    let report: CvReport = serde_json::from_slice(&raw).map_err(|e| e.to_string())?;
    Ok(CvRun {
        dir: out.to_path_buf(),
        report,
        table,
        seconds,
    })
}

/// Subject-disjointness of every fold, checked on the report and on the
/// stored per-window predictions.
fn disjointness(run: &CvRun, manifest: &Path) -> Result<(), String> {
    let m = load_manifest(manifest).map_err(|e| e.to_string())?;
    let all: BTreeSet<String> = m.clips.iter().map(|c| c.subject_id.clone()).collect();
    let mut seen = BTreeSet::new();
    for f in &run.report.per_fold {
        let test: BTreeSet<_> = f.test_subjects.iter().cloned().collect();
        let train: BTreeSet<_> = f.train_subjects.iter().cloned().collect();
        if !test.is_disjoint(&train) {
            return Err(format!("fold {}: train and test share subjects", f.fold));
        }
        if !seen.is_disjoint(&test) {
            return Err(format!("fold {}: a subject is tested in two folds", f.fold));
        }
        seen.extend(test);
    }
    if seen != all {
        return Err("held-out subjects do not cover the dataset".into());
    }
    let tested: BTreeMap<usize, BTreeSet<String>> = run
        .report
        .per_fold
        .iter()
        .map(|f| (f.fold, f.test_subjects.iter().cloned().collect()))
        .collect();
    let mut reader = csv::Reader::from_path(run.dir.join("predictions.csv")).map_err(|e| e.to_string())?;
    for row in reader.deserialize::<WindowPrediction>() {
        let p = row.map_err(|e| e.to_string())?;
        if !tested[&p.fold].contains(&p.subject_id) {
            return Err(format!("prediction for {} in fold {} from a training subject", p.clip_id, p.fold));
        }
    }
    Ok(())
}

fn mean_consistent(r: &CvReport) -> bool {
    let f: Vec<f64> = r.per_fold.iter().map(|f| f.window.metrics.f1).collect();
    (f.iter().sum::<f64>() / f.len() as f64 - r.mean_f1).abs() <= 1e-12
}

fn default_dataset(root: &Path) -> Result<PathBuf, String> {
    let data = root.join("synth");
    let printed = run_cli(&["synth", "--seed", "1", "--out", data.to_str().unwrap()])?;
    Ok(PathBuf::from(printed.trim()))
}

fn criterion_2(run: &CvRun, manifest: &Path) -> Outcome {
    disjointness(run, manifest)?;
    let r = &run.report;
    let folds: Vec<String> = r
        .per_fold
        .iter()
        .map(|f| format!("{:.4}", f.window.metrics.f1))
        .collect();
    check(
        r.per_fold.len() == 3 && r.mean_f1 >= 0.95 && mean_consistent(r),
        format!(
            "mean window F1 {:.4} (folds {}), target >= 0.95; subject-disjoint in all folds; {:.0} s (target < 600 s)",
            r.mean_f1,
            folds.join(", "),
            run.seconds
        ),
    )
}

fn criterion_6(first: &CvRun, second: &CvRun) -> Outcome {
    let mut files = vec!["cv_report.json".to_string(), "predictions.csv".to_string()];
    files.extend((0..first.report.k).map(|i| format!("fold_{i}.ckpt")));
    let mut differing = Vec::new();
    for f in &files {
        let a = std::fs::read(first.dir.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(second.dir.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            differing.push(f.clone());
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across two cv runs ({})", files.len(), files.join(", "))
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn criterion_7(root: &Path) -> Outcome {
    let (manifest, source) = match std::env::var_os("STIMKIT_PROTOCOL_MANIFEST") {
        Some(m) => (PathBuf::from(m), "user-supplied keypoints"),
        None => {
            let data = root.join("protocol");
            let cfg = root.join("protocol-synth.json");
            write_config(
                &cfg,
                json!({ "seed": 7, "synth": { "n_subjects": 9, "clips_per_subject": 6, "n_frames": 40 } }),
            )?;
            let printed = run_cli(&["synth", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()])?;
            (PathBuf::from(printed.trim()), "synthetic stand-in")
        }
    };
    let m = load_manifest(&manifest).map_err(|e| e.to_string())?;
    let pos = m.clips.iter().filter(|c| c.label == Label::Positive).count();
    let neg = m.clips.len() - pos;
    let subjects: BTreeSet<_> = m.clips.iter().map(|c| c.subject_id.as_str()).collect();
    if pos != 27 || neg != 27 || subjects.len() < 6 {
        return Err(format!(
            "{source}: manifest has {pos} positive / {neg} negative clips over {} subjects; need 27 / 27 over >= 6",
            subjects.len()
        ));
    }
    let protocol = json!({
        "window": { "frames": 7, "stride": 5 },
        "k": 3,
        "augment": { "rotation_range": [-45.0, 45.0], "zoom_range": [1.0, 2.0] },
        "train": { "learning_rate": 1e-4 }
    });
    let run = cv_run(&manifest, &root.join("protocol-cv"), protocol)?;
    disjointness(&run, &manifest)?;
    let r = &run.report;
    let table_ok = run.table.contains("mean F1") && r.per_fold.iter().all(|f| run.table.contains(&format!("\n{:>4} ", f.fold + 1)));
    let windows: usize = r.per_fold.iter().map(|f| f.test_windows).sum();
    let all_finite = r.per_fold.iter().all(|f| f.final_train_loss.is_some_and(f64::is_finite));
    check(
        r.k == 3 && r.per_fold.len() == 3 && table_ok && mean_consistent(r) && all_finite,
        format!(
            "{source}: 54 clips, {} subjects, {windows} windows; 3 subject-disjoint folds, table emitted, mean F1 {:.4}",
            subjects.len(),
            r.mean_f1
        ),
    )
}

fn main() {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    let mut report = |n: u32, name: &'static str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} [{name}]: {tag} - {detail}");
        results.push((n, name, outcome));
    };

    if wanted(1) {
        report(1, "aggregation", criterion_1());
    }
    if wanted(3) {
        report(3, "gradient integrity", criterion_3());
    }
    if wanted(4) {
        report(4, "flow recovery", criterion_4());
    }
    if wanted(5) {
        report(5, "representation robustness", criterion_5());
    }
    if wanted(2) || wanted(6) {
        let first = default_dataset(root).and_then(|m| Ok((cv_run(&m, &root.join("cv-a"), json!({}))?, m)));
        match &first {
            Ok((run, manifest)) => {
                print!("{}", run.table);
                if wanted(2) {
                    report(2, "synthetic end-to-end", criterion_2(run, manifest));
                }
                if wanted(6) {
                    let second = cv_run(manifest, &root.join("cv-b"), json!({}));
                    report(6, "determinism", second.and_then(|s| criterion_6(run, &s)));
                }
            }
            Err(e) => {
                if wanted(2) {
                    report(2, "synthetic end-to-end", Err(e.clone()));
                }
                if wanted(6) {
                    report(6, "determinism", Err(e.clone()));
                }
            }
        }
    }
    if wanted(7) {
        report(7, "protocol fidelity", criterion_7(root));
    }

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed: {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
