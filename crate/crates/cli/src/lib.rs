//! The `segvid` command line: training stages, long generation, evaluation,
//! compression-plan inspection and attention cost benchmarks.
//!
//! [`run`] is the whole program; `main` only forwards process arguments and
//! the exit code. Every file written is announced as an `ARTIFACT <path>`
//! line on stdout, followed by a one-line summary.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use segvid_core::dit::Task;

pub use config::{RunConfig, OUT_ENV};

/// Failures surfaced by the command line, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config files, or missing prerequisites (exit 1).
    #[error("{0}")]
    Config(String),
    /// Failures while executing a valid request (exit 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<segvid_core::Error> for CliError {
    fn from(e: segvid_core::Error) -> Self {
        use segvid_core::Error as E;
        match e {
            E::Config(_) | E::Spec(_) | E::Prerequisite(_) | E::Domain(_) | E::Layout(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "segvid", version, about = "Segment-wise long video generation with compressed history")]
pub struct Cli {
    /// TOML config file layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config file and LOVIC_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for training, sampling and benchmarking.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage; stage 2 needs stage 1 and stage 3 needs stage 2.
    Train(TrainArgs),
    /// Sample segments for one task layout from trained checkpoints.
    Generate(GenerateArgs),
    /// Held-out reconstruction error and history ablation.
    Eval(EvalArgs),
    /// Show how a strategy distributes query tokens over a grid.
    Plan(PlanArgs),
    /// Analytic attention cost table, optionally timed.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Compression strategy, e.g. `uniform:8`, `linear:16:1`, `log:16:1`.
    #[arg(long)]
    pub strategy: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub task: Task,
    /// Segments to generate (prediction and multishot only).
    #[arg(long)]
    pub segments: Option<usize>,
    /// Euler steps per segment.
    #[arg(long)]
    pub sample_steps: Option<usize>,
    /// Held-out clip supplying captions, context and ground truth.
    #[arg(long)]
    pub clip: Option<usize>,
    /// Diffusion checkpoint; defaults to the stage-2 file in the output directory.
    #[arg(long)]
    pub dit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    /// Diffusion checkpoint; defaults to the stage-2 file in the output directory.
    #[arg(long)]
    pub dit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub strategy: String,
    /// Segment grid as `TxHxW`.
    #[arg(long)]
    pub grid: String,
    /// Treat the segment as future context (far end first).
    #[arg(long)]
    pub future: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Largest number of segments in the table.
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub seg_tokens: Option<usize>,
    /// Shorthand for `--strategy uniform:<ratio>`.
    #[arg(long, conflicts_with = "strategy")]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Timing repetitions per point; 0 skips the microbenchmark.
    #[arg(long)]
    pub reps: Option<usize>,
}

/// Runs the program with `LOVIC_OUT` taken from the process environment.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_env(args, std::env::var_os(OUT_ENV), out, err)
}

/// Runs the program with an explicit `LOVIC_OUT` value.
pub fn run_with_env<I, T>(args: I, env_out: Option<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match resolve(&cli, env_out).and_then(|cfg| commands::execute(&cli, &cfg, out)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Applies defaults, then the config file, then `LOVIC_OUT`, then flags.
pub fn resolve(cli: &Cli, env_out: Option<OsString>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        config::load_file(&mut cfg, path)?;
    }
    if let Some(dir) = env_out.filter(|d| !d.is_empty()) {
        cfg.out_dir = PathBuf::from(dir);
    }
    if let Some(dir) = &cli.out {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.generate.seed = seed;
    }
    match &cli.command {
        Command::Train(a) => {
            cfg.train.stage = a.stage;
            cfg.train.steps = a.steps.unwrap_or(cfg.train.steps);
            cfg.train.batch = a.batch.unwrap_or(cfg.train.batch);
            cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
            if let Some(s) = &a.strategy {
                cfg.train.strategy = config::parse_strategy(s)?;
            }
            cfg.train.validate()?;
        }
        Command::Generate(a) => {
            cfg.generate.segments = a.segments.unwrap_or(cfg.generate.segments);
            cfg.generate.sample_steps = a.sample_steps.unwrap_or(cfg.generate.sample_steps);
            cfg.generate.clip = a.clip.unwrap_or(cfg.generate.clip);
        }
        Command::Eval(a) => {
            cfg.eval.clips = a.clips.unwrap_or(cfg.eval.clips);
            cfg.eval.sample_steps = a.sample_steps.unwrap_or(cfg.eval.sample_steps);
        }
        Command::Plan(_) => {}
        Command::Bench(a) => {
            let b = &mut cfg.bench;
            b.segments = a.segments.unwrap_or(b.segments);
            b.seg_tokens = a.seg_tokens.unwrap_or(b.seg_tokens);
            b.reps = a.reps.unwrap_or(b.reps);
            if let Some(r) = a.ratio {
                b.strategy = config::parse_strategy(&format!("uniform:{r}"))?;
            }
            if let Some(s) = &a.strategy {
                b.strategy = config::parse_strategy(s)?;
            }
        }
    }
    Ok(cfg)
}
