//! Command-line front end: dataset generation, training, inference, evaluation, label-map
//! manipulation and future prediction.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;
use vidsynth::ErrorKind;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] vidsynth::Error),
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<vidsynth_tensor::TensorError> for CliError {
    fn from(e: vidsynth_tensor::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vidsynth", version, about = "Video-to-video synthesis on a synthetic moving-shapes world")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the command's random choices (dataset, training, or appearance sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    NoFgBg,
    NoVideoDisc,
    NoFlowWarp,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Render paired train/val sequences with ground-truth flow.
    MakeData {
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        /// Frame width and height.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train (or resume) over the progressive schedule.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, value_enum)]
        ablation: Vec<AblationArg>,
        /// Condition on per-instance appearance features.
        #[arg(long)]
        multimodal: bool,
    },
    /// Synthesize a video for one source sequence, streaming frames to disk.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequence: Option<String>,
        /// Real frames to prime the window with.
        #[arg(long)]
        prime: Option<usize>,
        #[arg(long)]
        multimodal: bool,
        /// Also write an mp4 if ffmpeg is available.
        #[arg(long)]
        video: bool,
    },
    /// Video FID and flicker against real sequences; appends to a JSON-lines report.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        prime: Option<usize>,
    },
    /// Copy a dataset with class ids remapped, e.g. `--map 1=2 --map 3=0`.
    Manipulate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "map", value_parser = parse_pair)]
        map: Vec<[u8; 2]>,
    },
    /// Forecast label maps past the observed frames and synthesize them.
    PredictFuture {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequence: Option<String>,
        #[arg(long)]
        observed: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
}

fn parse_pair(s: &str) -> Result<[u8; 2], String> {
    let (a, b) = s.split_once('=').ok_or_else(|| format!("expected FROM=TO, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<u8>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(a)?, p(b)?])
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

/// Loads the config file (if any) and applies the flags on top.
pub fn resolve(cli: Cli) -> Result<(RunConfig, Cmd), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set_opt(&mut cfg.paths.out, cli.out);
    match &cli.command {
        Cmd::MakeData { train, val, size, frames } => {
            cfg.command = Some("make-data".into());
            set(&mut cfg.dataset.seed, cli.seed);
            set(&mut cfg.dataset.train, *train);
            set(&mut cfg.dataset.val, *val);
            if let Some(s) = size {
                cfg.dataset.scene.width = *s;
                cfg.dataset.scene.height = *s;
            }
            set(&mut cfg.dataset.scene.num_frames, *frames);
        }
        Cmd::Train { data, resume, max_steps, ablation, multimodal } => {
            cfg.command = Some("train".into());
            set(&mut cfg.train.seed, cli.seed);
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.resume, resume.clone());
            set_opt(&mut cfg.max_steps, *max_steps);
            for a in ablation {
                match a {
                    AblationArg::NoFgBg => cfg.train.ablation.no_fg_bg = true,
                    AblationArg::NoVideoDisc => cfg.train.ablation.no_video_disc = true,
                    AblationArg::NoFlowWarp => cfg.train.ablation.no_flow_warp = true,
                }
            }
            cfg.train.generator.multimodal |= *multimodal;
        }
        Cmd::Infer { data, checkpoint, sequence, prime, multimodal, video } => {
            cfg.command = Some("infer".into());
            set(&mut cfg.infer.feature_seed, cli.seed);
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.checkpoint, checkpoint.clone());
            set_opt(&mut cfg.infer.sequence, sequence.clone());
            set(&mut cfg.infer.prime, *prime);
            cfg.infer.multimodal |= *multimodal;
            cfg.infer.video |= *video;
        }
        Cmd::Eval { data, checkpoint, report, limit, prime } => {
            cfg.command = Some("eval".into());
            set(&mut cfg.eval.options.feature_seed, cli.seed);
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.checkpoint, checkpoint.clone());
            set_opt(&mut cfg.paths.report, report.clone());
            set_opt(&mut cfg.eval.limit, *limit);
            set_opt(&mut cfg.eval.options.prime, *prime);
        }
        Cmd::Manipulate { data, map } => {
            cfg.command = Some("manipulate".into());
            set_opt(&mut cfg.paths.data, data.clone());
            if !map.is_empty() {
                cfg.manipulate.map = map.clone();
            }
        }
        Cmd::PredictFuture { data, checkpoint, sequence, observed, horizon } => {
            cfg.command = Some("predict-future".into());
            set(&mut cfg.predict.feature_seed, cli.seed);
            set_opt(&mut cfg.paths.data, data.clone());
            set_opt(&mut cfg.paths.checkpoint, checkpoint.clone());
            set_opt(&mut cfg.predict.sequence, sequence.clone());
            set(&mut cfg.predict.observed, *observed);
            set(&mut cfg.predict.horizon, *horizon);
        }
    }
    Ok((cfg, cli.command))
}

fn print_json(out: &mut dyn Write, value: &impl serde::Serialize) {
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

/// Runs one command; summaries go to `out`, progress and errors to `err`.
pub fn execute(cfg: &RunConfig, cmd: &Cmd, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Cmd::MakeData { .. } => print_json(out, &commands::make_data(cfg)?),
        Cmd::Train { .. } => print_json(out, &commands::train(cfg, err, 25)?),
        Cmd::Infer { .. } => {
            let s = commands::infer(cfg)?;
            if let Some(n) = &s.notice {
                let _ = writeln!(err, "notice: {n}");
            }
            print_json(out, &s);
        }
        Cmd::Eval { .. } => print_json(out, &commands::eval(cfg)?),
        Cmd::Manipulate { .. } => print_json(out, &commands::manipulate(cfg)?),
        Cmd::PredictFuture { .. } => print_json(out, &commands::predict_future(cfg)?),
    }
    Ok(())
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = resolve(cli).and_then(|(cfg, cmd)| execute(&cfg, &cmd, out, err));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
