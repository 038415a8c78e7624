use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use stimkit::config::RunConfig;
use stimkit::evaluation::{
    cross_validate, fit, predictions_csv, score_windows, subject_disjoint_folds, CvSetup, LevelResult,
};
use stimkit::image::{load_gray, write_atomic};
use stimkit::neural::ModelCheckpoint;
use stimkit::optical_flow::{
    farneback_dense, flow_to_hsv, lucas_kanade_grid, render_arrows, ArrowStyle, FarnebackParams, LucasKanadeParams,
};
use stimkit::pipeline::{prepare_manifest, windows_from_heads, PipelineSettings};
use stimkit::pose_features::{
    filter_head, load_keypoints, load_manifest, write_consolidated, ClipRecord, FrameSize, Label, Manifest,
    ManifestDocument, ManifestEntry,
};
use stimkit::synthgen::gen_dataset;

#[derive(Parser)]
#[command(name = "stimkit", version, about = "Head-banging detection from head keypoints")]
struct Cli {
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Consolidate OpenPose per-frame JSON directories into a dataset.
    Import {
        /// A directory of per-frame JSON files, or a directory of such directories (one per clip).
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source frame size, e.g. 640x480.
        #[arg(long, value_parser = parse_frame_size)]
        frame_size: FrameSize,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// CSV with a `clip,subject,label` header; unlisted clips get subject and label "UNSET".
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Render optical flow between consecutive frames.
    Flowviz {
        /// Two or more PNG/PGM/PPM frames in order.
        #[arg(required = true, num_args = 2..)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FlowMethod::Lk)]
        method: FlowMethod,
        /// Lattice spacing for Lucas-Kanade.
        #[arg(long, default_value_t = 10)]
        spacing: usize,
        /// Also write each flow field as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic keypoint dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model (optionally holding out a fold).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Subject-disjoint k-fold cross-validation.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-window probabilities as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Predict the clips of a manifest.
        #[arg(long, conflicts_with = "keypoints")]
        manifest: Option<PathBuf>,
        /// Restrict manifest prediction to these clip ids.
        #[arg(long, requires = "manifest")]
        clip: Vec<String>,
        /// A single keypoint file or per-frame directory.
        #[arg(long, requires = "frame_size")]
        keypoints: Option<PathBuf>,
        #[arg(long, value_parser = parse_frame_size)]
        frame_size: Option<FrameSize>,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowMethod {
    /// Sparse Lucas-Kanade on a lattice, drawn as arrows.
    Lk,
    /// Dense Farneback, drawn as an HSV color field.
    Dense,
}

fn parse_frame_size(s: &str) -> Result<FrameSize, String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: f64 = w.trim().parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: f64 = h.trim().parse().map_err(|_| format!("bad height {h:?}"))?;
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err("frame size must be positive".into());
    }
    Ok(FrameSize { width: w, height: h })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<stimkit::Error>().map_or(2, stimkit::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("STIMKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("STIMKIT_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Import {
            input,
            out,
            frame_size,
            fps,
            labels,
        } => cmd_import(&input, &out, frame_size, fps, labels.as_deref()),
        Command::Flowviz {
            frames,
            out,
            method,
            spacing,
            json,
        } => cmd_flowviz(&frames, &out, method, spacing, json),
        Command::Synth { config, seed, out } => {
            let cfg = match (config, seed) {
                (Some(path), seed) => with_overrides(RunConfig::load(&path)?, seed, None)?,
                (None, Some(seed)) => RunConfig::with_seed(seed),
                (None, None) => bail!("synth needs --config or --seed"),
            };
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let manifest = gen_dataset(&cfg.synth, &out, cfg.seed)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train { config, seed, out } => cmd_train(&with_overrides(RunConfig::load(&config)?, seed, out)?),
        Command::Cv { config, seed, out } => cmd_cv(&with_overrides(RunConfig::load(&config)?, seed, out)?),
        Command::Predict {
            checkpoint,
            manifest,
            clip,
            keypoints,
            frame_size,
            fps,
            out,
        } => {
            let source = match (manifest, keypoints, frame_size) {
                (Some(m), None, _) => PredictSource::Manifest(m, clip),
                (None, Some(k), Some(fs)) => PredictSource::Keypoints(k, fs, fps),
                _ => bail!("predict needs --manifest, or --keypoints with --frame-size"),
            };
            cmd_predict(&checkpoint, source, out.as_deref())
        }
    }
}

fn with_overrides(mut cfg: RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<RunConfig> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> stimkit::Result<()> {
    fs::create_dir_all(dir).map_err(|e| stimkit::Error::io(dir, e))
}

#[derive(serde::Deserialize)]
struct LabelRow {
    clip: String,
    subject: String,
    label: String,
}

fn load_labels(path: &Path) -> anyhow::Result<Vec<LabelRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<LabelRow>, _>>()
        .map_err(|e| csv_error(path, e))?;
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> stimkit::Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        let csv::ErrorKind::Io(io) = e.into_kind() else { unreachable!() };
        return stimkit::Error::io(path, io);
    }
    stimkit::Error::Parse {
        source_name: path.display().to_string(),
        offset: e.position().map_or(0, |p| p.byte() as usize),
        message: e.to_string(),
    }
}

fn cmd_import(input: &Path, out: &Path, frame_size: FrameSize, fps: f64, labels: Option<&Path>) -> anyhow::Result<()> {
    if !(fps > 0.0 && fps.is_finite()) {
        bail!("--fps must be positive");
    }
    let entries = fs::read_dir(input).map_err(|e| stimkit::Error::io(input, e))?;
    let mut clip_dirs = Vec::new();
    let mut has_json = false;
    for entry in entries {
        let path = entry.map_err(|e| stimkit::Error::io(input, e))?.path();
        if path.is_dir() {
            clip_dirs.push(path);
        } else if path.extension().is_some_and(|e| e == "json") {
            has_json = true;
        }
    }
    clip_dirs.sort();
    if has_json {
        clip_dirs = vec![input.to_path_buf()];
    }
    let labels = match labels {
        Some(p) => load_labels(p)?,
        None => Vec::new(),
    };

    let kp_dir = out.join("keypoints");
    create_dir(&kp_dir)?;
    let mut clips = Vec::new();
    for dir in &clip_dirs {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into());
        let frames = load_keypoints(dir)?;
        if frames.is_empty() {
            log::warn!("{}: no frame files, skipped", dir.display());
            continue;
        }
        let rel = format!("keypoints/{id}.json");
        write_atomic(&out.join(&rel), &write_consolidated(&frames))?;
        let (subject, label) = labels
            .iter()
            .find(|r| r.clip == id)
            .map(|r| (r.subject.clone(), r.label.clone()))
            .unwrap_or_else(|| ("UNSET".into(), "UNSET".into()));
        println!("{id}: {} frames", frames.len());
        clips.push(ManifestEntry {
            id,
            subject,
            label,
            fps,
            keypoints: rel,
            start_frame: 0,
            end_frame: frames.len() - 1,
        });
    }
    if clips.is_empty() {
        return Err(stimkit::Error::Validation(format!("{}: no clips with frames found", input.display())).into());
    }
    let doc = ManifestDocument {
        version: stimkit::pose_features::MANIFEST_VERSION,
        frame_width: frame_size.width,
        frame_height: frame_size.height,
        clips,
    };
    write_atomic(&out.join("manifest.json"), &doc.to_bytes())?;
    Ok(())
}

fn cmd_flowviz(frames: &[PathBuf], out: &Path, method: FlowMethod, spacing: usize, json: bool) -> anyhow::Result<()> {
    if spacing == 0 {
        bail!("--spacing must be at least 1");
    }
    create_dir(out)?;
    let mut prev = load_gray(&frames[0])?;
    for (i, path) in frames[1..].iter().enumerate() {
        let next = load_gray(path)?;
        let (flow, image) = match method {
            FlowMethod::Lk => {
                let params = LucasKanadeParams {
                    spacing,
                    ..Default::default()
                };
                let flow = lucas_kanade_grid(&prev, &next, &params)?;
                let image = render_arrows(&flow, Some(&prev), &ArrowStyle::default());
                (flow, image)
            }
            FlowMethod::Dense => {
                let flow = farneback_dense(&prev, &next, &FarnebackParams::default())?;
                let image = flow_to_hsv(&flow, None);
                (flow, image)
            }
        };
        let stem = format!("flow_{i:04}");
        image.save(&out.join(format!("{stem}.png")))?;
        if json {
            write_atomic(&out.join(format!("{stem}.json")), &flow.to_json())?;
        }
        println!("{stem}: {} of {} vectors valid", flow.valid_count(), flow.len());
        prev = next;
    }
    Ok(())
}

fn load_run_manifest(cfg: &RunConfig) -> anyhow::Result<Manifest> {
    let path = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| stimkit::Error::config("manifest", "required by this command"))?;
    Ok(load_manifest(path)?)
}

#[derive(Serialize)]
struct TrainHistoryFile<'a> {
    seed: u64,
    train_windows: usize,
    epoch_losses: &'a [f64],
    holdout: Option<Holdout>,
}

#[derive(Serialize)]
struct Holdout {
    fold: usize,
    subjects: Vec<String>,
    windows: usize,
    window: LevelResult,
    clip: LevelResult,
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let manifest = load_run_manifest(cfg)?;
    let pipeline = cfg.pipeline();
    let dataset = prepare_manifest(&manifest, &pipeline)?;
    for w in &dataset.warnings {
        log::warn!("{w}");
    }
    let (train_windows, holdout_windows, holdout_plan) = match cfg.holdout_fold {
        None => (dataset.windows.clone(), Vec::new(), None),
        Some(fold) => {
            let counts = dataset.window_counts_by_clip(manifest.clips.len());
            let plan = subject_disjoint_folds(&manifest.clips, &counts, cfg.k, cfg.seed)?;
            let (test, train): (Vec<_>, Vec<_>) = dataset
                .windows
                .iter()
                .cloned()
                .partition(|w| plan.fold_of(&w.subject_id) == Some(fold));
            (train, test, Some((fold, plan)))
        }
    };
    let (checkpoint, history) = fit(
        &train_windows,
        &cfg.model_config(),
        &cfg.train_config(),
        &cfg.augment,
        &pipeline,
        false,
    )?;

    let holdout = match holdout_plan {
        Some((fold, plan)) if !holdout_windows.is_empty() => {
            let model = checkpoint.model()?;
            let refs: Vec<_> = holdout_windows.iter().collect();
            let scored = score_windows(&model, &refs, &cfg.raster)?;
            println!(
                "holdout fold {fold}: window F1 {:.4}, clip F1 {:.4}",
                scored.window.metrics.f1, scored.clip.metrics.f1
            );
            Some(Holdout {
                fold,
                subjects: plan.subjects_in(fold).into_iter().map(String::from).collect(),
                windows: holdout_windows.len(),
                window: scored.window,
                clip: scored.clip,
            })
        }
        Some((fold, _)) => {
            log::warn!("holdout fold {fold} has no windows");
            None
        }
        None => None,
    };

    create_dir(&cfg.output_dir)?;
    let ckpt_path = cfg.output_dir.join("model.ckpt");
    checkpoint.save(&ckpt_path)?;
    let summary = TrainHistoryFile {
        seed: cfg.seed,
        train_windows: train_windows.len(),
        epoch_losses: &history.epoch_losses,
        holdout,
    };
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write_atomic(&cfg.output_dir.join("history.json"), &json)?;
    if let Some(loss) = history.epoch_losses.last() {
        println!("final training loss {loss:.6}");
    }
    println!("{}", ckpt_path.display());
    Ok(())
}

fn cmd_cv(cfg: &RunConfig) -> anyhow::Result<()> {
    let manifest = load_run_manifest(cfg)?;
    let pipeline = cfg.pipeline();
    let dataset = prepare_manifest(&manifest, &pipeline)?;
    let outcome = cross_validate(&CvSetup {
        clips: &manifest.clips,
        dataset: &dataset,
        model: &cfg.model,
        train: &cfg.train,
        augment: &cfg.augment,
        pipeline: &pipeline,
        k: cfg.k,
        seed: cfg.seed,
    })?;
    for w in &outcome.report.warnings {
        log::warn!("{w}");
    }
    create_dir(&cfg.output_dir)?;
    for (i, ck) in outcome.checkpoints.iter().enumerate() {
        ck.save(&cfg.output_dir.join(format!("fold_{i}.ckpt")))?;
    }
    write_atomic(&cfg.output_dir.join("predictions.csv"), predictions_csv(&outcome.predictions).as_bytes())?;
    write_atomic(&cfg.output_dir.join("cv_report.json"), &outcome.report.to_json())?;
    print!("{}", outcome.report.table());
    Ok(())
}

enum PredictSource {
    Manifest(PathBuf, Vec<String>),
    Keypoints(PathBuf, FrameSize, f64),
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    clip_id: &'a str,
    origin_frame: usize,
    probability: f64,
    positive: bool,
}

fn cmd_predict(checkpoint: &Path, source: PredictSource, out: Option<&Path>) -> anyhow::Result<()> {
    let ck = ModelCheckpoint::load(checkpoint)?;
    let pipeline = ck.training_metadata.pipeline.unwrap_or_else(|| {
        log::warn!("checkpoint carries no preprocessing settings, using defaults");
        PipelineSettings::default()
    });
    let model = ck.model()?;

    let mut jobs: Vec<(ClipRecord, FrameSize, Vec<stimkit::pose_features::HeadPose>)> = Vec::new();
    match source {
        PredictSource::Manifest(path, only) => {
            let manifest = load_manifest(&path)?;
            for id in &only {
                if !manifest.clips.iter().any(|c| &c.clip_id == id) {
                    return Err(stimkit::Error::Validation(format!("clip {id:?} is not in the manifest")).into());
                }
            }
            for clip in manifest.clips {
                if only.is_empty() || only.contains(&clip.clip_id) {
                    let heads = stimkit::pose_features::load_clip_heads(&clip, pipeline.confidence_threshold)?;
                    jobs.push((clip, manifest.frame_size, heads));
                }
            }
        }
        PredictSource::Keypoints(path, frame_size, fps) => {
            let frames = load_keypoints(&path)?;
            let heads: Vec<_> = frames.iter().map(|f| filter_head(f, pipeline.confidence_threshold)).collect();
            let clip_id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "clip".into());
            let clip = ClipRecord {
                clip_id,
                subject_id: String::new(),
                label: Label::Negative,
                fps,
                keypoint_source: path.clone(),
                frame_range: (0, frames.len().saturating_sub(1)),
            };
            if frames.is_empty() {
                log::warn!("{}: no frames", path.display());
            } else {
                jobs.push((clip, frame_size, heads));
            }
        }
    }

    let mut buf = Vec::new();
    for (clip, frame_size, heads) in &jobs {
        let cw = windows_from_heads(clip, *frame_size, heads, &pipeline)?;
        if let Some(w) = &cw.warning {
            log::warn!("{w}");
        }
        for w in &cw.windows {
            let p = model.predict_clip(&stimkit::pose_features::rasterize(w, &pipeline.raster))?;
            let line = PredictionLine {
                clip_id: &clip.clip_id,
                origin_frame: w.origin_frame,
                probability: p,
                positive: stimkit::neural::classify(p),
            };
            serde_json::to_writer(&mut buf, &line)?;
            buf.push(b'\n');
        }
    }
    match out {
        Some(path) => write_atomic(path, &buf)?,
        None => std::io::stdout().lock().write_all(&buf).context("writing predictions")?,
    }
    Ok(())
}
