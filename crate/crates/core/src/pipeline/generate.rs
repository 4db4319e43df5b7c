//! Segment-wise long generation and history-ablation evaluation.

use rand::SeedableRng;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::data::concat_segments;
use super::metrics::{freeze_last_frame, psnr, ssim};
use super::train::{heldout_clips, ModelConfig};
use crate::compression::{CompressionStrategy, Grid, Orientation};
use crate::dit::{Dit, Task, TaskLayout};
use crate::error::{Error, Result};
use crate::flexformer::{ContextBundle, FlexFormer, Segment};
use crate::numerics::Tensor;

/// Peak signal value of the synthetic clips (amplitudes never exceed 1).
pub const PEAK: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSettings {
    pub strategy: CompressionStrategy,
    /// Euler steps per segment.
    pub steps: usize,
    /// Empty temporal indices between shots.
    pub gap: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self { strategy: CompressionStrategy::linear(8.0, 1.0).expect("valid strategy"), steps: 16, gap: 20 }
    }
}

/// Generated segments plus the context size each one was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct LongVideo {
    pub segments: Vec<Segment>,
    pub context_tokens: Vec<usize>,
}

impl LongVideo {
    pub fn video(&self) -> Result<Tensor> {
        concat_segments(&self.segments)
    }
}

/// Encodes `history` under `layout` and samples the current segment.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_history(
    ff: &FlexFormer,
    dit: &Dit,
    history: &[&Segment],
    layout: &TaskLayout,
    text: Option<&Tensor>,
    grid: Grid,
    settings: &SampleSettings,
    seed: u64,
) -> Result<(Tensor, ContextBundle)> {
    let hist: Vec<(&Segment, Orientation)> =
        history.iter().enumerate().map(|(i, s)| (*s, layout.orientation(i))).collect();
    let bundle = ff.encode_history(&hist, &settings.strategy)?;
    let z = dit.sample_segment(&bundle, layout, grid, text, settings.steps, seed)?;
    Ok((z, bundle))
}

/// Generates `prompts.len()` segments one after another. The first is
/// unconditional; each later one sees all earlier segments as compressed
/// history.
pub fn generate_long(
    ff: &FlexFormer,
    dit: &Dit,
    settings: &SampleSettings,
    prompts: &[Tensor],
    grid: Grid,
    task: Task,
    seed: u64,
) -> Result<LongVideo> {
    if prompts.is_empty() {
        return Err(Error::Config("need at least one segment".into()));
    }
    if !matches!(task, Task::Prediction | Task::Multishot) {
        return Err(Error::Config(format!("long generation supports prediction and multishot, not {task}")));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LongVideo { segments: Vec::new(), context_tokens: Vec::new() };
    for (i, prompt) in prompts.iter().enumerate() {
        let layout = match task {
            Task::Multishot => TaskLayout::multishot(i, grid.t, settings.gap)?,
            _ => TaskLayout::prediction(i, grid.t)?,
        };
        let history: Vec<&Segment> = out.segments.iter().collect();
        let (z, bundle) =
            sample_with_history(ff, dit, &history, &layout, Some(prompt), grid, settings, seeds.next_u64())?;
        out.context_tokens.push(bundle.n_tokens());
        out.segments.push(Segment::new(grid, z, Some(prompt.clone()))?);
    }
    Ok(out)
}

/// Scores of one held-out clip under one sampling seed.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityRow {
    pub clip: usize,
    pub seed: u64,
    pub psnr_true: f64,
    pub psnr_shuffled: f64,
    pub psnr_freeze: f64,
    pub ssim_true: f64,
    pub ssim_shuffled: f64,
    pub ssim_freeze: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityReport {
    pub rows: Vec<UtilityRow>,
}

impl UtilityReport {
    fn mean(&self, f: impl Fn(&UtilityRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_psnr_true(&self) -> f64 {
        self.mean(|r| r.psnr_true)
    }

    pub fn mean_psnr_shuffled(&self) -> f64 {
        self.mean(|r| r.psnr_shuffled)
    }

    pub fn mean_psnr_freeze(&self) -> f64 {
        self.mean(|r| r.psnr_freeze)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,seed,psnr_true,psnr_shuffled,psnr_freeze,ssim_true,ssim_shuffled,ssim_freeze\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.clip, r.seed, r.psnr_true, r.psnr_shuffled, r.psnr_freeze, r.ssim_true, r.ssim_shuffled, r.ssim_freeze
            ));
        }
        s
    }
}

/// Predicts the last segment of each held-out clip from (a) its own earlier
/// segments, (b) the earlier segments of the next clip in the list, and
/// (c) a frozen copy of its previous frame.
pub fn context_utility(
    ff: &FlexFormer,
    dit: &Dit,
    model: &ModelConfig,
    settings: &SampleSettings,
    n_clips: usize,
    seeds: &[u64],
) -> Result<UtilityReport> {
    if n_clips < 2 || seeds.is_empty() {
        return Err(Error::Config("need at least two clips and one seed".into()));
    }
    let clips = heldout_clips(model, n_clips)?;
    let grid = model.segment;
    let k = model.segments_per_clip;
    let layout = TaskLayout::prediction(k - 1, grid.t)?;
    let mut rows = Vec::with_capacity(n_clips * seeds.len());
    for (i, clip) in clips.iter().enumerate() {
        let truth = &clip[k - 1];
        let own: Vec<&Segment> = clip[..k - 1].iter().collect();
        let other: Vec<&Segment> = clips[(i + 1) % n_clips][..k - 1].iter().collect();
        let freeze = freeze_last_frame(clip[k - 2].video(), grid, grid.t)?;
        for &seed in seeds {
            let (zt, _) = sample_with_history(ff, dit, &own, &layout, truth.text(), grid, settings, seed)?;
            let (zs, _) = sample_with_history(ff, dit, &other, &layout, truth.text(), grid, settings, seed)?;
            rows.push(UtilityRow {
                clip: i,
                seed,
                psnr_true: psnr(&zt, truth.video(), PEAK)?,
                psnr_shuffled: psnr(&zs, truth.video(), PEAK)?,
                psnr_freeze: psnr(&freeze, truth.video(), PEAK)?,
                ssim_true: ssim(&zt, truth.video(), grid, PEAK)?,
                ssim_shuffled: ssim(&zs, truth.video(), grid, PEAK)?,
                ssim_freeze: ssim(&freeze, truth.video(), grid, PEAK)?,
            });
        }
    }
    Ok(UtilityReport { rows })
}
