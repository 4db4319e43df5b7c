//! Three-stage training: autoencoder reconstruction, then flow matching with
//! a frozen autoencoder, then flow matching with multi-shot layouts mixed in.

use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{make_clip, split_clip, ClipDistribution};
use crate::compression::{plan_queries, CompressionPlan, CompressionStrategy, Grid, Orientation};
use crate::dit::{flow_pair, Dit, DitConfig, Task, TaskLayout};
use crate::error::{Error, Result};
use crate::flexformer::{ContextBundle, ContextChunk, FlexConfig, FlexFormer, QueryMode, Segment};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::positional::DEFAULT_ROPE_BASE;

/// Loss above which training aborts.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Offset separating held-out clip seeds from training clip seeds.
pub const HELDOUT_SEED_BASE: u64 = 1 << 40;

/// Architecture and data geometry shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// `(T, H, W)` of one segment.
    pub segment: Grid,
    pub segments_per_clip: usize,
    pub token_dim: usize,
    pub flex_d_model: usize,
    pub flex_heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub query_mode: QueryMode,
    pub dit_d_model: usize,
    pub dit_heads: usize,
    pub dit_blocks: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            segment: Grid::new(4, 4, 4),
            segments_per_clip: 3,
            token_dim: 4,
            flex_d_model: 48,
            flex_heads: 4,
            enc_blocks: 4,
            dec_blocks: 4,
            query_mode: QueryMode::InterpolatedSingle,
            dit_d_model: 48,
            dit_heads: 4,
            dit_blocks: 4,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

impl ModelConfig {
    pub fn clip_grid(&self) -> Grid {
        Grid::new(self.segment.t * self.segments_per_clip, self.segment.h, self.segment.w)
    }

    pub fn clip_distribution(&self) -> ClipDistribution {
        ClipDistribution::new(self.clip_grid(), self.token_dim)
    }

    pub fn flex_config(&self) -> FlexConfig {
        FlexConfig {
            token_dim: self.token_dim,
            d_model: self.flex_d_model,
            heads: self.flex_heads,
            enc_blocks: self.enc_blocks,
            dec_blocks: self.dec_blocks,
            query_mode: self.query_mode,
            max_queries: self.segment.tokens(),
            rope_base: self.rope_base,
        }
    }

    pub fn dit_config(&self) -> DitConfig {
        DitConfig {
            rope_base: self.rope_base,
            ..DitConfig::new(self.token_dim, self.dit_d_model, self.dit_heads, self.dit_blocks, self.flex_d_model)
        }
    }

    pub fn build_flex(&self, seed: u64) -> Result<FlexFormer> {
        FlexFormer::new(self.flex_config(), seed)
    }

    pub fn build_dit(&self, seed: u64) -> Result<Dit> {
        Dit::new(self.dit_config(), seed)
    }
}

/// Settings of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub strategy: CompressionStrategy,
    pub seed: u64,
    /// Sampling weights in [`Task::ALL`] order. Stage 2 ignores multishot.
    pub task_weights: [f64; 4],
    pub gap: usize,
    pub model: ModelConfig,
    /// Size of the training clip pool.
    pub train_clips: usize,
    /// First seed of the training clip pool.
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 500,
            batch: 8,
            lr: 1e-3,
            strategy: CompressionStrategy::linear(8.0, 1.0).expect("valid strategy"),
            seed: 0,
            task_weights: [1.0, 1.0, 1.0, 3.0],
            gap: 20,
            model: ModelConfig::default(),
            train_clips: 512,
            data_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.batch == 0 || self.train_clips == 0 {
            return Err(Error::Config("batch and train_clips must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.task_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("task weights must be non-negative".into()));
        }
        let active = if self.stage == 3 { 4 } else { 3 };
        if self.stage > 1 && self.task_weights[..active].iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("at least one task needs positive weight".into()));
        }
        if self.model.segments_per_clip < 3 {
            return Err(Error::Config("clips need at least three segments".into()));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ u64::from(self.stage))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: u8,
    pub task: String,
    pub loss: f64,
}

/// Renders a loss log as CSV with header `step,stage,task,loss`.
pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,stage,task,loss\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.stage, r.task, r.loss));
    }
    s
}

/// Means of the first and last `window` values.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if losses.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(losses.len());
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

/// Split training clips, drawn once from the configured seed range.
pub fn training_pool(cfg: &TrainConfig) -> Result<Vec<Vec<Segment>>> {
    let dist = cfg.model.clip_distribution();
    (0..cfg.train_clips as u64)
        .map(|i| split_clip(&make_clip(&dist.sample(cfg.data_seed.wrapping_add(i))?)?, cfg.model.segments_per_clip))
        .collect()
}

/// Split held-out clips; their seeds never overlap the training range.
pub fn heldout_clips(model: &ModelConfig, n: usize) -> Result<Vec<Vec<Segment>>> {
    let dist = model.clip_distribution();
    (0..n as u64)
        .map(|i| split_clip(&make_clip(&dist.sample(HELDOUT_SEED_BASE + i)?)?, model.segments_per_clip))
        .collect()
}

/// Stage 1: minimizes reconstruction loss of randomly oriented segments.
pub fn train_flexformer(cfg: &TrainConfig, ff: &mut FlexFormer) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let pool = training_pool(cfg)?;
    let grid = cfg.model.segment;
    let plans: [CompressionPlan; 2] = [
        plan_queries(grid, &cfg.strategy, Orientation::PastContext),
        plan_queries(grid, &cfg.strategy, Orientation::FutureContext),
    ];
    let mut rng = cfg.rng();
    let mut adam = Adam::new(ff.params(), cfg.adam());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let clip = &pool[rng.gen_range(0..pool.len())];
            let seg = &clip[rng.gen_range(0..clip.len())];
            let plan = &plans[rng.gen_range(0..2)];
            let mut tape = Tape::new();
            let loss = ff.autoencode_loss_on_tape(&mut tape, seg, plan)?;
            let grads = tape.backward(loss)?;
            total += tape.value(loss).data()[0];
            ff.params_mut().accumulate(&tape, &grads, 1.0 / cfg.batch as f64);
        }
        let loss = total / cfg.batch as f64;
        check_finite(step, loss)?;
        adam.step(ff.params_mut());
        log.push(LossRecord { step, stage: 1, task: "reconstruction".into(), loss });
    }
    Ok(log)
}

/// Mean reconstruction MSE over every segment of `clips` (past orientation).
pub fn evaluate_reconstruction(
    ff: &FlexFormer,
    strategy: &CompressionStrategy,
    clips: &[Vec<Segment>],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for seg in clips.iter().flatten() {
        let chunk = ff.encode_segment(seg, strategy, Orientation::PastContext)?;
        let rec = ff.decode_segment(&chunk)?;
        total += crate::flexformer::reconstruction_loss(&rec, seg)?;
        n += 1;
    }
    Ok(total / n as f64)
}

/// One flow-matching training example before noise is drawn.
#[derive(Debug, Clone)]
pub struct Example {
    pub layout: TaskLayout,
    pub bundle: ContextBundle,
    pub target: Segment,
}

/// Frozen-encoder chunks keyed by (clip, segment, orientation).
#[derive(Default)]
struct ChunkCache {
    chunks: HashMap<(usize, usize, bool), ContextChunk>,
}

impl ChunkCache {
    fn get(
        &mut self,
        ff: &FlexFormer,
        strategy: &CompressionStrategy,
        pool: &[Vec<Segment>],
        key: (usize, usize),
        o: Orientation,
    ) -> Result<ContextChunk> {
        let k = (key.0, key.1, o == Orientation::PastContext);
        if let Some(c) = self.chunks.get(&k) {
            return Ok(c.clone());
        }
        let c = ff.encode_segment(&pool[key.0][key.1], strategy, o)?;
        self.chunks.insert(k, c.clone());
        Ok(c)
    }
}

/// Picks the (history, current) segment indices of a single-clip task.
fn single_clip_task(task: Task, n_seg: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, usize, TaskLayout)> {
    Ok(match task {
        Task::Prediction => {
            let n_ctx = rng.gen_range(1..n_seg);
            let start = rng.gen_range(0..n_seg - n_ctx);
            let hist = (start..start + n_ctx).collect();
            (hist, start + n_ctx, TaskLayout::prediction(n_ctx, 1)?)
        }
        Task::Retrodiction => {
            let n_ctx = rng.gen_range(1..n_seg);
            let cur = rng.gen_range(0..n_seg - n_ctx);
            let hist = (cur + 1..cur + 1 + n_ctx).collect();
            (hist, cur, TaskLayout::retrodiction(n_ctx, 1)?)
        }
        Task::Interpolation => {
            let cur = rng.gen_range(1..n_seg - 1);
            (vec![cur - 1, cur + 1], cur, TaskLayout::interpolation(1, 1, 1)?)
        }
        Task::Multishot => unreachable!("multishot examples are built from shot sets"),
    })
}

/// Rescales a unit-length layout to segments of `seg_len` frames.
fn scale_layout(unit: &TaskLayout, seg_len: usize) -> Result<TaskLayout> {
    let n = unit.context_spans().len();
    match unit.task() {
        Task::Prediction => TaskLayout::prediction(n, seg_len),
        Task::Retrodiction => TaskLayout::retrodiction(n, seg_len),
        Task::Interpolation => TaskLayout::interpolation(1, 1, seg_len),
        Task::Multishot => TaskLayout::multishot(n, seg_len, unit.gap()),
    }
}

/// Shots sharing radius and amplitude but with fresh positions and motion.
pub fn make_shots(model: &ModelConfig, n: usize, seed: u64) -> Result<Vec<Segment>> {
    let dist = ClipDistribution::new(model.segment, model.token_dim);
    let first = dist.sample(seed)?;
    (0..n as u64)
        .map(|i| {
            let spec = dist.sample(seed.wrapping_add(i * 0x9e37))?;
            let spec = crate::pipeline::ClipSpec { radius: first.radius, amplitude: first.amplitude, ..spec };
            let clip = make_clip(&spec)?;
            Segment::new(model.segment, clip.video, Some(clip.text))
        })
        .collect()
}

/// Stages 2 and 3: flow matching on current segments conditioned on frozen
/// autoencoder chunks of their history.
pub fn train_dit(cfg: &TrainConfig, ff: &FlexFormer, dit: &mut Dit) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if cfg.stage == 1 {
        return Err(Error::Config("the diffusion model trains in stage 2 or 3".into()));
    }
    let pool = training_pool(cfg)?;
    let mut weights = cfg.task_weights;
    if cfg.stage == 2 {
        weights[3] = 0.0;
    }
    let chooser = WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
    let grid = cfg.model.segment;
    let mut cache = ChunkCache::default();
    let mut rng = cfg.rng();
    let mut adam = Adam::new(dit.params(), cfg.adam());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let task = Task::ALL[chooser.sample(&mut rng)];
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let ex = if task == Task::Multishot {
                let n_prior = rng.gen_range(1..cfg.model.segments_per_clip);
                let shots = make_shots(&cfg.model, n_prior + 1, rng.gen())?;
                let layout = TaskLayout::multishot(n_prior, grid.t, cfg.gap)?;
                let hist: Vec<(&Segment, Orientation)> =
                    shots[..n_prior].iter().enumerate().map(|(i, s)| (s, layout.orientation(i))).collect();
                let bundle = ff.encode_history(&hist, &cfg.strategy)?;
                Example { layout, bundle, target: shots[n_prior].clone() }
            } else {
                let c = rng.gen_range(0..pool.len());
                let (hist, cur, unit) = single_clip_task(task, pool[c].len(), &mut rng)?;
                let layout = scale_layout(&unit, grid.t)?;
                let chunks = hist
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| cache.get(ff, &cfg.strategy, &pool, (c, s), layout.orientation(i)))
                    .collect::<Result<_>>()?;
                Example { layout, bundle: ContextBundle { chunks }, target: pool[c][cur].clone() }
            };
            let t: f64 = rng.gen_range(0.0..=1.0);
            let eps = Tensor::randn(ex.target.video().shape(), 1.0, &mut rng);
            let state = flow_pair(ex.target.video(), &eps, t)?;
            let mut tape = Tape::new();
            let loss = dit.flow_loss_on_tape(&mut tape, &state, ex.target.text(), &ex.bundle, &ex.layout, grid)?;
            let grads = tape.backward(loss)?;
            total += tape.value(loss).data()[0];
            dit.params_mut().accumulate(&tape, &grads, 1.0 / cfg.batch as f64);
        }
        let loss = total / cfg.batch as f64;
        check_finite(step, loss)?;
        adam.step(dit.params_mut());
        log.push(LossRecord { step, stage: cfg.stage, task: task.to_string(), loss });
    }
    Ok(log)
}
