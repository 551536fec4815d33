use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use vidsynth::data::{
    flow_chw, read_dataset, render_sequence, validity_chw, write_dataset, write_png_gray, write_png_rgb,
    Dataset, PairedSequence, SceneConfig, SourceSequence,
};
use vidsynth::forecast::{forecast_labels, relabel};
use vidsynth::inference::{evaluate, fit_instance_features, tensor_to_frame, EvalReport, Synthesizer};
use vidsynth::trainer::{load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use vidsynth::warp::{masked_l1, warp};
use vidsynth_tensor::{no_grad, Tensor};

use crate::config::RunConfig;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.vsck";
pub const TRAIN_LOG: &str = "train_log.ndjson";
pub const EVAL_REPORT: &str = "eval_report.jsonl";

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("--{what} is required")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("{t:04}.png"))
}

fn sequence_index(dataset: &Dataset, id: Option<&str>) -> Result<usize, CliError> {
    if dataset.is_empty() {
        return Err(vidsynth::Error::Data {
            path: dataset.root.clone(),
            msg: "dataset has no sequences".into(),
        }
        .into());
    }
    match id {
        None => Ok(0),
        Some(id) => dataset.find(id).ok_or_else(|| {
            vidsynth::Error::Data {
                path: dataset.root.clone(),
                msg: format!("no sequence {id:?} in the manifest"),
            }
            .into()
        }),
    }
}

fn scene_seed(base: u64, split: u64, i: usize) -> u64 {
    base.wrapping_mul(0x1_0000_0000).wrapping_add(split << 24).wrapping_add(i as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MakeDataSummary {
    pub train: usize,
    pub val: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub classes: Vec<String>,
}

/// Renders `<out>/train` and `<out>/val`.
pub fn make_data(cfg: &RunConfig) -> Result<MakeDataSummary, CliError> {
    let out = required(&cfg.paths.out, "out")?;
    let d = &cfg.dataset;
    d.scene.validate()?;
    for (split, name, count) in [(0u64, "train", d.train), (1, "val", d.val)] {
        let seqs = (0..count)
            .map(|i| {
                render_sequence(&SceneConfig {
                    seed: scene_seed(d.seed, split, i),
                    ..d.scene.clone()
                })
            })
            .collect::<vidsynth::Result<Vec<_>>>()?;
        write_dataset(&seqs, &out.join(name))?;
    }
    cfg.write_resolved(out)?;
    Ok(MakeDataSummary {
        train: d.train,
        val: d.val,
        width: d.scene.width,
        height: d.scene.height,
        frames: d.scene.num_frames,
        classes: vidsynth::data::ClassTable::default().names,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub step: u64,
    pub finished: bool,
    pub last_total: Option<f64>,
    pub checkpoint: PathBuf,
    pub feature_model: bool,
}

/// Trains on `paths.data` (or resumes `paths.resume`), logging every step and leaving a
/// checkpoint in `paths.out`. `progress` receives a line every `report_every` steps.
pub fn train(cfg: &RunConfig, progress: &mut dyn Write, report_every: u64) -> Result<TrainSummary, CliError> {
    let out = required(&cfg.paths.out, "out")?;
    let data_dir = required(&cfg.paths.data, "data")?;
    create_dir(out)?;
    let data = Arc::new(read_dataset(data_dir)?.load_all()?);
    let (mut trainer, resumed) = match &cfg.paths.resume {
        Some(path) => (Trainer::from_checkpoint(&load_checkpoint(path)?, data.clone())?, true),
        None => (Trainer::new(cfg.train.clone(), data.clone())?, false),
    };
    let mut resolved = cfg.clone();
    resolved.train = trainer.config().clone();
    resolved.command = Some("train".into());
    resolved.write_resolved(out)?;

    let log_path = out.join(TRAIN_LOG);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed)
        .truncate(!resumed)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let started = Instant::now();
    let mut steps_run = 0u64;
    let mut last_total = None;
    let chunk = report_every.max(1);
    while !trainer.is_finished() && cfg.max_steps.is_none_or(|m| steps_run < m) {
        let n = cfg.max_steps.map_or(chunk, |m| chunk.min(m - steps_run));
        let reports = trainer.run(Some(n), &mut log)?;
        if reports.is_empty() {
            break;
        }
        steps_run += reports.len() as u64;
        let last = reports.last().expect("nonempty");
        last_total = Some(last.g_total);
        let _ = writeln!(
            progress,
            "step {:>6}/{} phase {} g_total {:.4} d_image {:.4} ({:.0}s)",
            trainer.progress().step,
            trainer.config().total_steps(),
            last.phase,
            last.g_total,
            last.d_image,
            started.elapsed().as_secs_f64()
        );
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;

    let mut ckpt = trainer.checkpoint();
    let finished = trainer.is_finished();
    if finished && trainer.generator().config().multimodal {
        let f = &cfg.features;
        ckpt.feature_model = Some(fit_instance_features(trainer.generator(), &data, f.components, f.frame_stride, f.seed)?);
    }
    let path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &path)?;
    Ok(TrainSummary {
        steps_run,
        step: trainer.progress().step,
        finished,
        last_total,
        checkpoint: path,
        feature_model: ckpt.feature_model.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferSummary {
    pub sequence: String,
    pub frames: usize,
    pub primed: usize,
    /// Mean ground-truth-flow warp error between consecutive output frames.
    pub flicker: Option<f64>,
    pub frames_dir: PathBuf,
    pub video: Option<PathBuf>,
    pub notice: Option<String>,
}

fn load_generator_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    Ok(load_checkpoint(required(&cfg.paths.checkpoint, "checkpoint")?)?)
}

/// Sliding-window synthesis over a whole sequence. Each output frame is written before the
/// next source step is read, so memory stays flat however long the sequence is.
pub fn infer(cfg: &RunConfig) -> Result<InferSummary, CliError> {
    let out = required(&cfg.paths.out, "out")?;
    let ckpt = load_generator_checkpoint(cfg)?;
    let generator = ckpt.build_generator()?;
    let gcfg = generator.config().clone();
    if cfg.infer.multimodal && !gcfg.multimodal {
        return Err(CliError::Usage("--multimodal needs a checkpoint trained with multimodal features".into()));
    }
    let dataset = read_dataset(required(&cfg.paths.data, "data")?)?;
    let index = sequence_index(&dataset, cfg.infer.sequence.as_deref())?;
    let entry = dataset.entry(index)?.clone();
    if entry.height % gcfg.height != 0 || entry.width * gcfg.height != entry.height * gcfg.width {
        return Err(CliError::Usage(format!(
            "sequence is {}x{} but the checkpoint generates {}x{}",
            entry.width, entry.height, gcfg.width, gcfg.height
        )));
    }
    let factor = entry.height / gcfg.height;
    let prime = cfg.infer.prime.min(entry.num_frames);
    if prime > gcfg.window {
        return Err(CliError::Usage(format!("--prime {prime} exceeds the generator window {}", gcfg.window)));
    }
    let frames_dir = out.join("frames");
    create_dir(&frames_dir)?;
    let mut resolved = cfg.clone();
    resolved.command = Some("infer".into());
    resolved.write_resolved(out)?;

    let mut syn = Synthesizer::new(
        &generator,
        ckpt.feature_model.as_ref(),
        dataset.manifest.classes.clone(),
        (entry.height, entry.width),
        cfg.infer.feature_seed,
    )?;
    let (h, w) = (gcfg.height, gcfg.width);
    let mut prev: Option<Tensor<f32>> = None;
    let mut flicker = 0.0;
    for t in 0..entry.num_frames {
        let (labels, instances) = dataset.source_step(index, t)?;
        let x = if t < prime {
            syn.prime(&dataset.frame(index, t)?, &labels, &instances)?
        } else {
            syn.step(&labels, &instances)?
        };
        let path = frame_path(&frames_dir, t);
        write_png_rgb(&path, &tensor_to_frame(&x)?)?;
        if let Some(p) = &prev {
            let (flow, valid) = dataset.flow_step(index, t - 1)?;
            let flow = Tensor::from_vec(flow_chw::<f32>(&flow, factor)?, &[1, 2, h, w])?;
            let valid = Tensor::from_vec(validity_chw::<f32>(&valid, factor)?, &[1, 1, h, w])?;
            let warped = no_grad(|| warp(p, &flow))?;
            flicker += masked_l1(&warped, &x, &valid)?;
        }
        prev = Some(x);
    }
    let transitions = entry.num_frames.saturating_sub(1);
    let (video, notice) = if cfg.infer.video {
        assemble_video(&frames_dir, &out.join("video.mp4"))
    } else {
        (None, None)
    };
    let summary = InferSummary {
        sequence: entry.id.clone(),
        frames: entry.num_frames,
        primed: prime,
        flicker: (transitions > 0).then(|| flicker / transitions as f64),
        frames_dir,
        video,
        notice,
    };
    write_json(&out.join("infer_summary.json"), &summary)?;
    Ok(summary)
}

/// Encodes numbered PNGs with ffmpeg when it is installed. Never fails: problems come back
/// as a notice.
fn assemble_video(frames: &Path, target: &Path) -> (Option<PathBuf>, Option<String>) {
    let available = Command::new("ffmpeg")
        .arg("-version")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .is_ok_and(|s| s.success());
    if !available {
        return (None, Some("ffmpeg not found; wrote frames only".into()));
    }
    let status = Command::new("ffmpeg")
        .args(["-y", "-loglevel", "error", "-framerate", "10", "-i"])
        .arg(frames.join("%04d.png"))
        .args(["-pix_fmt", "yuv420p"])
        .arg(target)
        .status();
    match status {
        Ok(s) if s.success() => (Some(target.to_path_buf()), None),
        Ok(s) => (None, Some(format!("ffmpeg exited with {s}; wrote frames only"))),
        Err(e) => (None, Some(format!("could not run ffmpeg ({e}); wrote frames only"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub step: u64,
    pub ablation: String,
    pub generator_size: [usize; 2],
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Scores the checkpoint on `paths.data` and appends one JSON line to the report file.
pub fn eval(cfg: &RunConfig) -> Result<EvalRecord, CliError> {
    let ckpt = load_generator_checkpoint(cfg)?;
    let generator = ckpt.build_generator()?;
    let data_dir = required(&cfg.paths.data, "data")?;
    let dataset = read_dataset(data_dir)?;
    let n = cfg.eval.limit.map_or(dataset.len(), |l| l.min(dataset.len()));
    let seqs = (0..n).map(|i| dataset.load(i)).collect::<vidsynth::Result<Vec<PairedSequence>>>()?;
    let report = evaluate(&generator, ckpt.feature_model.as_ref(), &seqs, &cfg.eval.options)?;
    let record = EvalRecord {
        checkpoint: required(&cfg.paths.checkpoint, "checkpoint")?.to_path_buf(),
        data: data_dir.to_path_buf(),
        step: ckpt.progress.step,
        ablation: ckpt.config.ablation.name(),
        generator_size: [generator.config().height, generator.config().width],
        report,
    };
    let report_path = match (&cfg.paths.report, &cfg.paths.out) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) => out.join(EVAL_REPORT),
        (None, None) => return Err(CliError::Usage("eval needs --report or --out".into())),
    };
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
        let mut resolved = cfg.clone();
        resolved.command = Some("eval".into());
        resolved.paths.report = Some(report_path.clone());
        resolved.write_resolved(cfg.paths.out.as_deref().unwrap_or(dir))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&report_path)
        .map_err(|e| CliError::io(&report_path, e))?;
    let line = serde_json::to_string(&record).expect("record serializes");
    writeln!(file, "{line}").map_err(|e| CliError::io(&report_path, e))?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManipulateSummary {
    pub sequences: usize,
    pub changed_pixels: usize,
}

/// Copies a dataset with its label maps rewritten through the class map; instance ids and
/// background masks follow the new classes. Target frames and flows are copied unchanged.
pub fn manipulate(cfg: &RunConfig) -> Result<ManipulateSummary, CliError> {
    let out = required(&cfg.paths.out, "out")?;
    let dataset = read_dataset(required(&cfg.paths.data, "data")?)?;
    let mut map = BTreeMap::new();
    for &[from, to] in &cfg.manipulate.map {
        if map.insert(from, to).is_some_and(|prev| prev != to) {
            return Err(CliError::Usage(format!("class {from} is mapped twice")));
        }
    }
    let mut seqs = Vec::with_capacity(dataset.len());
    let mut changed = 0;
    for i in 0..dataset.len() {
        let mut seq = dataset.load(i)?;
        let new = relabel(&seq.source, &map)?;
        changed += count_changes(&seq.source, &new);
        seq.source = new;
        seqs.push(seq);
    }
    write_dataset(&seqs, out)?;
    let mut resolved = cfg.clone();
    resolved.command = Some("manipulate".into());
    resolved.write_resolved(out)?;
    Ok(ManipulateSummary {
        sequences: seqs.len(),
        changed_pixels: changed,
    })
}

fn count_changes(a: &SourceSequence, b: &SourceSequence) -> usize {
    a.labels
        .iter()
        .zip(&b.labels)
        .map(|(x, y)| x.data.iter().zip(&y.data).filter(|(p, q)| p != q).count())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictSummary {
    pub sequence: String,
    pub observed: usize,
    pub horizon: usize,
    pub frames_dir: PathBuf,
}

/// Forecasts future label maps from the observed prefix, then synthesizes them primed with
/// the last observed real frames. Writes `horizon` frames and their forecast labels.
pub fn predict_future(cfg: &RunConfig) -> Result<PredictSummary, CliError> {
    let out = required(&cfg.paths.out, "out")?;
    let p = &cfg.predict;
    let ckpt = load_generator_checkpoint(cfg)?;
    let generator = ckpt.build_generator()?;
    let dataset = read_dataset(required(&cfg.paths.data, "data")?)?;
    let index = sequence_index(&dataset, p.sequence.as_deref())?;
    let seq = dataset.load(index)?;
    if p.observed > seq.len() {
        return Err(CliError::Usage(format!("{} observed frames requested, sequence has {}", p.observed, seq.len())));
    }
    let observed = SourceSequence {
        labels: seq.source.labels[..p.observed].to_vec(),
        instances: seq.source.instances[..p.observed].to_vec(),
        classes: seq.source.classes.clone(),
    };
    let future = forecast_labels(&observed, p.horizon)?;

    let frames_dir = out.join("frames");
    let labels_dir = out.join("labels");
    create_dir(&frames_dir)?;
    create_dir(&labels_dir)?;
    let mut resolved = cfg.clone();
    resolved.command = Some("predict-future".into());
    resolved.write_resolved(out)?;

    let mut syn = Synthesizer::new(
        &generator,
        ckpt.feature_model.as_ref(),
        seq.source.classes.clone(),
        (seq.height(), seq.width()),
        p.feature_seed,
    )?;
    let window = generator.config().window;
    for t in p.observed.saturating_sub(window)..p.observed {
        syn.prime(&seq.frames[t], &seq.source.labels[t], &seq.source.instances[t])?;
    }
    for k in 0..p.horizon {
        let x = syn.step(&future.labels[k], &future.instances[k])?;
        write_png_rgb(&frame_path(&frames_dir, k), &tensor_to_frame(&x)?)?;
        write_png_gray(&frame_path(&labels_dir, k), &future.labels[k])?;
    }
    let summary = PredictSummary {
        sequence: dataset.entry(index)?.id.clone(),
        observed: p.observed,
        horizon: p.horizon,
        frames_dir,
    };
    write_json(&out.join("predict_summary.json"), &summary)?;
    Ok(summary)
}
