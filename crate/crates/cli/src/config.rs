//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line flags. Unknown keys anywhere in the file are rejected.
//!
//! ```toml
//! out_dir = "runs/a"
//!
//! [model]
//! segment = "4x4x4"
//! query_mode = "interpolated-single"
//!
//! [train]
//! steps = 500
//! strategy = "linear:8:1"
//! task_weights = [1.0, 1.0, 1.0, 3.0]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use segvid_core::compression::{CompressionStrategy, Grid};
use segvid_core::flexformer::QueryMode;
use segvid_core::pipeline::{ModelConfig, SampleSettings, TrainConfig};

use crate::CliError;

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "LOVIC_OUT";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    out_dir: Option<PathBuf>,
    model: Option<ModelSection>,
    train: Option<TrainSection>,
    generate: Option<GenerateSection>,
    eval: Option<EvalSection>,
    bench: Option<BenchSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    segment: Option<String>,
    segments_per_clip: Option<usize>,
    token_dim: Option<usize>,
    flex_d_model: Option<usize>,
    flex_heads: Option<usize>,
    enc_blocks: Option<usize>,
    dec_blocks: Option<usize>,
    query_mode: Option<String>,
    dit_d_model: Option<usize>,
    dit_heads: Option<usize>,
    dit_blocks: Option<usize>,
    rope_base: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    steps: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    strategy: Option<String>,
    seed: Option<u64>,
    task_weights: Option<[f64; 4]>,
    gap: Option<usize>,
    train_clips: Option<usize>,
    data_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateSection {
    segments: Option<usize>,
    sample_steps: Option<usize>,
    clip: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    clips: Option<usize>,
    seeds: Option<Vec<u64>>,
    sample_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchSection {
    segments: Option<usize>,
    seg_tokens: Option<usize>,
    strategy: Option<String>,
    d_model: Option<usize>,
    blocks: Option<usize>,
    reps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub segments: usize,
    pub sample_steps: usize,
    /// Held-out clip supplying prompts and ground truth.
    pub clip: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub clips: usize,
    pub seeds: Vec<u64>,
    pub sample_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub segments: usize,
    pub seg_tokens: usize,
    pub strategy: CompressionStrategy,
    pub d_model: usize,
    pub blocks: usize,
    pub reps: usize,
}

/// Fully resolved settings for every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            out_dir: PathBuf::from("out"),
            generate: GenerateConfig { segments: 3, sample_steps: 16, clip: 0, seed: 0 },
            eval: EvalConfig { clips: 32, seeds: vec![0, 1, 2], sample_steps: 16 },
            bench: BenchConfig {
                segments: 8,
                seg_tokens: 128,
                strategy: CompressionStrategy::uniform(8.0).expect("valid strategy"),
                d_model: 48,
                blocks: 4,
                reps: 3,
            },
            train,
        }
    }
}

impl RunConfig {
    pub fn sample_settings(&self, steps: usize) -> SampleSettings {
        SampleSettings { strategy: self.train.strategy, steps, gap: self.train.gap }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn parse_strategy(s: &str) -> Result<CompressionStrategy, CliError> {
    s.parse().map_err(|e: segvid_core::Error| config_err(e.to_string()))
}

pub fn parse_grid(s: &str) -> Result<Grid, CliError> {
    s.parse().map_err(|e: segvid_core::Error| config_err(e.to_string()))
}

pub fn parse_query_mode(s: &str) -> Result<QueryMode, CliError> {
    match s {
        "interpolated-single" => Ok(QueryMode::InterpolatedSingle),
        "text-single" => Ok(QueryMode::TextStyleSingle),
        "text-multiple" => Ok(QueryMode::TextStyleMultiple),
        other => Err(config_err(format!(
            "unknown query_mode {other:?} (expected interpolated-single, text-single or text-multiple)"
        ))),
    }
}

fn apply_model(m: &mut ModelConfig, s: ModelSection) -> Result<(), CliError> {
    if let Some(v) = s.segment {
        m.segment = parse_grid(&v)?;
    }
    if let Some(v) = s.query_mode {
        m.query_mode = parse_query_mode(&v)?;
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = s.$f { m.$f = v; } )* };
    }
    set!(segments_per_clip, token_dim, flex_d_model, flex_heads, enc_blocks, dec_blocks, dit_d_model, dit_heads, dit_blocks, rope_base);
    Ok(())
}

fn apply_train(t: &mut TrainConfig, s: TrainSection) -> Result<(), CliError> {
    if let Some(v) = s.strategy {
        t.strategy = parse_strategy(&v)?;
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = s.$f { t.$f = v; } )* };
    }
    set!(steps, batch, lr, seed, task_weights, gap, train_clips, data_seed);
    Ok(())
}

/// Parses TOML text and layers it over `base`.
pub fn apply_text(base: &mut RunConfig, text: &str) -> Result<(), CliError> {
    let file: FileConfig = toml::from_str(text).map_err(|e| config_err(format!("config file: {e}")))?;
    if let Some(d) = file.out_dir {
        base.out_dir = d;
    }
    if let Some(m) = file.model {
        apply_model(&mut base.train.model, m)?;
    }
    if let Some(t) = file.train {
        apply_train(&mut base.train, t)?;
    }
    if let Some(g) = file.generate {
        let c = &mut base.generate;
        c.segments = g.segments.unwrap_or(c.segments);
        c.sample_steps = g.sample_steps.unwrap_or(c.sample_steps);
        c.clip = g.clip.unwrap_or(c.clip);
        c.seed = g.seed.unwrap_or(c.seed);
    }
    if let Some(e) = file.eval {
        let c = &mut base.eval;
        c.clips = e.clips.unwrap_or(c.clips);
        c.seeds = e.seeds.unwrap_or_else(|| c.seeds.clone());
        c.sample_steps = e.sample_steps.unwrap_or(c.sample_steps);
    }
    if let Some(b) = file.bench {
        let c = &mut base.bench;
        if let Some(s) = b.strategy {
            c.strategy = parse_strategy(&s)?;
        }
        c.segments = b.segments.unwrap_or(c.segments);
        c.seg_tokens = b.seg_tokens.unwrap_or(c.seg_tokens);
        c.d_model = b.d_model.unwrap_or(c.d_model);
        c.blocks = b.blocks.unwrap_or(c.blocks);
        c.reps = b.reps.unwrap_or(c.reps);
    }
    Ok(())
}

pub fn load_file(base: &mut RunConfig, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    apply_text(base, &text)
}
