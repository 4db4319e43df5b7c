//! Context-conditioned diffusion transformer trained with flow matching.
//!
//! Noisy current-segment tokens follow the straight path
//! `z_t = t*z0 + (1-t)*eps`; the network regresses `eps - z0`. Compressed
//! history tokens join every self-attention layer as extra keys and values
//! only, so the residual stream holds current tokens alone.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compression::{Grid, Orientation};
use crate::error::{Error, Result};
use crate::flexformer::ContextBundle;
use crate::numerics::{BlockConfig, Init, Linear, ParamSet, Parameter, Tape, Tensor, TransformerBlock, Var};
use crate::positional::{grid_positions, text_positions, Position3D, PositionLayout, DEFAULT_ROPE_BASE};

/// One point on the noise interpolation path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub z_t: Tensor,
    pub target: Tensor,
}

/// `z_t = t*z0 + (1-t)*eps` with regression target `eps - z0`.
pub fn flow_pair(z0: &Tensor, eps: &Tensor, t: f64) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
    }
    let z_t = z0.zip_map(eps, |a, e| t * a + (1.0 - t) * e)?;
    let target = eps.sub(z0)?;
    Ok(FlowState { z0: z0.clone(), eps: eps.clone(), t, z_t, target })
}

/// Mean squared error between a predicted velocity and the flow target.
pub fn flow_loss(pred: &Tensor, state: &FlowState) -> Result<f64> {
    pred.expect_same_shape(&state.target).map_err(|e| Error::Contract(e.to_string()))?;
    let sum: f64 = pred.data().iter().zip(state.target.data()).map(|(p, g)| (g - p) * (g - p)).sum();
    Ok(sum / pred.numel() as f64)
}

/// Integrates `dz/dt = -u(z, t)` from `t = 0` to `t = 1` with `steps` Euler
/// steps.
pub fn euler_integrate<F>(mut z: Tensor, steps: usize, mut velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let u = velocity(&z, k as f64 * dt)?;
        z = z.zip_map(&u, |a, b| a - dt * b)?;
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Prediction,
    Interpolation,
    Retrodiction,
    Multishot,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Prediction, Task::Interpolation, Task::Retrodiction, Task::Multishot];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Prediction => "prediction",
            Task::Interpolation => "interpolation",
            Task::Retrodiction => "retrodiction",
            Task::Multishot => "multishot",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Half-open temporal range `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

/// Temporal placement of context segments and the generated segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLayout {
    task: Task,
    context_spans: Vec<Span>,
    current: Span,
    gap: usize,
}

impl TaskLayout {
    pub fn new(task: Task, context_spans: Vec<Span>, current: Span, gap: usize) -> Result<Self> {
        let layout = Self { task, context_spans, current, gap };
        layout.validate()?;
        Ok(layout)
    }

    /// `n_ctx` segments of `seg_len` frames, then the current segment.
    pub fn prediction(n_ctx: usize, seg_len: usize) -> Result<Self> {
        let spans = (0..n_ctx).map(|i| Span::new(i * seg_len, seg_len)).collect();
        Self::new(Task::Prediction, spans, Span::new(n_ctx * seg_len, seg_len), 0)
    }

    /// The current segment first, then `n_ctx` later segments.
    pub fn retrodiction(n_ctx: usize, seg_len: usize) -> Result<Self> {
        let spans = (0..n_ctx).map(|i| Span::new((i + 1) * seg_len, seg_len)).collect();
        Self::new(Task::Retrodiction, spans, Span::new(0, seg_len), 0)
    }

    /// `before` segments, the current segment, then `after` segments.
    pub fn interpolation(before: usize, after: usize, seg_len: usize) -> Result<Self> {
        let spans = (0..before)
            .chain(before + 1..before + 1 + after)
            .map(|i| Span::new(i * seg_len, seg_len))
            .collect();
        Self::new(Task::Interpolation, spans, Span::new(before * seg_len, seg_len), 0)
    }

    /// `n_prior` earlier shots, each separated from the next by `gap` empty
    /// temporal indices.
    pub fn multishot(n_prior: usize, seg_len: usize, gap: usize) -> Result<Self> {
        let stride = seg_len + gap;
        let spans = (0..n_prior).map(|i| Span::new(i * stride, seg_len)).collect();
        Self::new(Task::Multishot, spans, Span::new(n_prior * stride, seg_len), gap)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn context_spans(&self) -> &[Span] {
        &self.context_spans
    }

    pub fn current(&self) -> Span {
        self.current
    }

    pub fn gap(&self) -> usize {
        self.gap
    }

    fn validate(&self) -> Result<()> {
        let mut all: Vec<Span> = self.context_spans.clone();
        all.push(self.current);
        if all.iter().any(|s| s.len == 0) {
            return Err(Error::Layout("spans must be non-empty".into()));
        }
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                if a.overlaps(b) {
                    return Err(Error::Layout(format!("spans {a:?} and {b:?} overlap")));
                }
            }
        }
        let before = self.context_spans.iter().filter(|s| s.end() <= self.current.start).count();
        let after = self.context_spans.len() - before;
        let ok = match self.task {
            Task::Prediction => after == 0 && self.gap == 0,
            Task::Retrodiction => before == 0 && self.gap == 0,
            Task::Interpolation => self.gap == 0,
            Task::Multishot => {
                all.sort_by_key(|s| s.start);
                after == 0 && all.windows(2).all(|w| w[1].start == w[0].end() + self.gap)
            }
        };
        if !ok {
            return Err(Error::Layout(format!("spans do not form a {} layout", self.task)));
        }
        Ok(())
    }

    /// Which end of context segment `i` touches the current segment.
    pub fn orientation(&self, i: usize) -> Orientation {
        if self.context_spans[i].end() <= self.current.start {
            Orientation::PastContext
        } else {
            Orientation::FutureContext
        }
    }

    /// One past the largest temporal index any span covers.
    pub fn horizon(&self) -> usize {
        self.context_spans.iter().chain([&self.current]).map(Span::end).max().unwrap_or(0)
    }
}

/// Rotary positions of every token the diffusion model sees.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignedPositions {
    pub context: Vec<Position3D>,
    pub video: Vec<Position3D>,
    pub text: Vec<Position3D>,
}

impl AssignedPositions {
    /// Current tokens (video then text) followed by context tokens.
    pub fn all(&self) -> PositionLayout {
        self.video.iter().chain(&self.text).chain(&self.context).copied().collect()
    }
}

/// Places context tokens at their plan positions shifted to their segment's
/// span, current video on the lattice of the current span, and current text
/// after the last temporal index of the layout.
pub fn assign_positions(
    layout: &TaskLayout,
    bundle: &ContextBundle,
    current: Grid,
    n_text: usize,
) -> Result<AssignedPositions> {
    if bundle.chunks.len() != layout.context_spans.len() {
        return Err(Error::Layout(format!(
            "{} context chunks for {} context spans",
            bundle.chunks.len(),
            layout.context_spans.len()
        )));
    }
    if current.t != layout.current.len {
        return Err(Error::Layout(format!(
            "current grid of {} frames in a span of {}",
            current.t, layout.current.len
        )));
    }
    let mut context = Vec::with_capacity(bundle.n_tokens());
    for (chunk, span) in bundle.chunks.iter().zip(&layout.context_spans) {
        if chunk.source_grid.t != span.len {
            return Err(Error::Layout(format!(
                "chunk of {} frames in a span of {}",
                chunk.source_grid.t, span.len
            )));
        }
        context.extend(chunk.plan.positions.iter().map(|p| p.shifted_t(span.start as f64)));
    }
    let video = grid_positions(current.as_tuple(), layout.current.start as f64);
    let text = text_positions(n_text, (layout.horizon(), current.h, current.w));
    Ok(AssignedPositions { context, video, text })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitConfig {
    pub token_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Width of incoming context tokens.
    pub context_dim: usize,
    /// Number of sinusoidal timestep features (even).
    pub time_features: usize,
    pub rope_base: f64,
}

impl DitConfig {
    pub fn new(token_dim: usize, d_model: usize, heads: usize, blocks: usize, context_dim: usize) -> Self {
        Self { token_dim, d_model, heads, blocks, context_dim, time_features: 16, rope_base: DEFAULT_ROPE_BASE }
    }

    fn block(&self) -> BlockConfig {
        BlockConfig { rope_base: self.rope_base, ..BlockConfig::new(self.d_model, self.heads) }
    }
}

/// Sinusoidal features of a timestep in `[0, 1]`.
pub fn timestep_features(t: f64, n: usize) -> Tensor {
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..half {
        let w = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out.push((1000.0 * t * w).sin());
    }
    for i in 0..half {
        let w = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out.push((1000.0 * t * w).cos());
    }
    Tensor::from_parts(vec![1, n], out)
}

/// Velocity network.
#[derive(Debug, Clone)]
pub struct Dit {
    cfg: DitConfig,
    params: ParamSet,
    in_video: Linear,
    in_text: Linear,
    ctx_proj: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<TransformerBlock>,
    out: Linear,
}

impl Dit {
    pub fn new(cfg: DitConfig, seed: u64) -> Result<Self> {
        if cfg.d_model % 6 != 0 || cfg.token_dim == 0 || cfg.context_dim == 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of 6; token and context widths positive",
                cfg.d_model
            )));
        }
        if cfg.time_features == 0 || cfg.time_features % 2 != 0 {
            return Err(Error::Config("time_features must be positive and even".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (c, d) = (cfg.token_dim, cfg.d_model);
        let in_video = Linear::new(&mut p, "dit.in_video", c, d, true, Init::FanIn, &mut rng)?;
        let in_text = Linear::new(&mut p, "dit.in_text", c, d, true, Init::FanIn, &mut rng)?;
        let ctx_proj = Linear::new(&mut p, "dit.ctx_proj", cfg.context_dim, d, true, Init::FanIn, &mut rng)?;
        let time_fc1 = Linear::new(&mut p, "dit.time.fc1", cfg.time_features, d, true, Init::FanIn, &mut rng)?;
        let time_fc2 = Linear::new(&mut p, "dit.time.fc2", d, d, true, Init::FanIn, &mut rng)?;
        let block = cfg.block();
        let blocks = (0..cfg.blocks)
            .map(|i| TransformerBlock::new(&mut p, &format!("dit.block.{i}"), block, &mut rng))
            .collect::<Result<_>>()?;
        let out = Linear::new(&mut p, "dit.out", d, c, true, Init::Zeros, &mut rng)?;
        Ok(Self { cfg, params: p, in_video, in_text, ctx_proj, time_fc1, time_fc2, blocks, out })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Copy of this model with parameter values taken from `params` by name.
    pub fn with_params(&self, params: &ParamSet) -> Result<Self> {
        let mut m = self.clone();
        let values: Vec<Parameter> = params.iter().cloned().collect();
        m.params.load_from(&values)?;
        Ok(m)
    }

    /// Records one velocity evaluation; returns `[THW x token_dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        z_t: &Tensor,
        t: f64,
        text: Option<&Tensor>,
        bundle: &ContextBundle,
        layout: &TaskLayout,
        grid: Grid,
    ) -> Result<Var> {
        if z_t.shape() != [grid.tokens(), self.cfg.token_dim] {
            return Err(Error::Config(format!(
                "noisy tokens of shape {:?} for grid {grid} and width {}",
                z_t.shape(),
                self.cfg.token_dim
            )));
        }
        if let Some(c) = bundle.chunks.first() {
            if c.tokens.cols() != self.cfg.context_dim {
                return Err(Error::Config(format!(
                    "context width {} but model expects {}",
                    c.tokens.cols(),
                    self.cfg.context_dim
                )));
            }
        }
        let n_text = text.map_or(0, Tensor::rows);
        let pos = assign_positions(layout, bundle, grid, n_text)?;

        let z = tape.constant(z_t.clone());
        let mut parts = vec![self.in_video.forward(tape, &self.params, z)?];
        if let Some(tx) = text {
            if tx.cols() != self.cfg.token_dim {
                return Err(Error::Config(format!("text width {} but model expects {}", tx.cols(), self.cfg.token_dim)));
            }
            let tx = tape.constant(tx.clone());
            parts.push(self.in_text.forward(tape, &self.params, tx)?);
        }
        let cur = tape.concat_rows(&parts)?;
        let tf = tape.constant(timestep_features(t, self.cfg.time_features));
        let temb = self.time_fc1.forward(tape, &self.params, tf)?;
        let temb = tape.gelu(temb);
        let temb = self.time_fc2.forward(tape, &self.params, temb)?;
        let mut x = tape.add_row(cur, temb)?;

        let context = match bundle.stacked() {
            Some(c) => {
                let c = tape.constant(c);
                let c = tape.layer_norm(c);
                Some(self.ctx_proj.forward(tape, &self.params, c)?)
            }
            None => None,
        };
        let block = self.cfg.block();
        let q_pos: Vec<Position3D> = pos.video.iter().chain(&pos.text).copied().collect();
        let q_rope = block.rotary_table(&q_pos)?;
        let kv_rope = if context.is_some() { block.rotary_table(&pos.all())? } else { q_rope.clone() };
        for b in &self.blocks {
            x = b.forward_with_context(tape, &self.params, x, &q_rope, context, &kv_rope)?;
        }
        let v = tape.slice_rows(x, 0, grid.tokens())?;
        let v = tape.layer_norm(v);
        self.out.forward(tape, &self.params, v)
    }

    pub fn predict_velocity(
        &self,
        z_t: &Tensor,
        t: f64,
        text: Option<&Tensor>,
        bundle: &ContextBundle,
        layout: &TaskLayout,
        grid: Grid,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.predict_on_tape(&mut tape, z_t, t, text, bundle, layout, grid)?;
        Ok(tape.value(v).clone())
    }

    /// Records prediction plus flow loss for one training pair.
    pub fn flow_loss_on_tape(
        &self,
        tape: &mut Tape,
        state: &FlowState,
        text: Option<&Tensor>,
        bundle: &ContextBundle,
        layout: &TaskLayout,
        grid: Grid,
    ) -> Result<Var> {
        let pred = self.predict_on_tape(tape, &state.z_t, state.t, text, bundle, layout, grid)?;
        let target = tape.constant(state.target.clone());
        tape.mse(pred, target)
    }

    /// Euler sampling from seeded Gaussian noise; returns the `z0` estimate.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_segment(
        &self,
        bundle: &ContextBundle,
        layout: &TaskLayout,
        grid: Grid,
        text: Option<&Tensor>,
        steps: usize,
        seed: u64,
    ) -> Result<Tensor> {
        if steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Tensor::randn(&[grid.tokens(), self.cfg.token_dim], 1.0, &mut rng);
        euler_integrate(eps, steps, |z, t| self.predict_velocity(z, t, text, bundle, layout, grid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::CompressionStrategy;
    use crate::flexformer::{FlexConfig, FlexFormer, Segment};
    use crate::numerics::{attention, grad_check};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn flow_pair_endpoints() {
        let z0 = rand_tensor(&[4, 3], 1);
        let eps = rand_tensor(&[4, 3], 2);
        assert_eq!(flow_pair(&z0, &eps, 1.0).unwrap().z_t, z0);
        assert_eq!(flow_pair(&z0, &eps, 0.0).unwrap().z_t, eps);
        let same = flow_pair(&z0, &z0, 0.37).unwrap();
        assert!(same.z_t.max_abs_diff(&z0).unwrap() < 1e-15);
        assert!(same.target.data().iter().all(|&v| v == 0.0));
        assert!(matches!(flow_pair(&z0, &eps, 1.01), Err(Error::Domain(_))));
        assert!(matches!(flow_pair(&z0, &eps, -0.01), Err(Error::Domain(_))));
    }

    #[test]
    fn flow_loss_oracles() {
        let z0 = rand_tensor(&[5, 2], 3);
        let eps = rand_tensor(&[5, 2], 4);
        let s = flow_pair(&z0, &eps, 0.5).unwrap();
        assert_eq!(flow_loss(&s.target, &s).unwrap(), 0.0);
        let zero = Tensor::zeros(&[5, 2]);
        let mean_sq = s.target.data().iter().map(|v| v * v).sum::<f64>() / 10.0;
        assert!((flow_loss(&zero, &s).unwrap() - mean_sq).abs() < 1e-15);
        let pred = rand_tensor(&[5, 2], 5);
        let mut acc = 0.0;
        for i in 0..10 {
            let d = s.target.data()[i] - pred.data()[i];
            acc += d * d;
        }
        assert!((flow_loss(&pred, &s).unwrap() - acc / 10.0).abs() < 1e-12);
        assert!(matches!(flow_loss(&Tensor::zeros(&[2, 5]), &s), Err(Error::Contract(_))));
    }

    #[test]
    fn euler_recovers_target_for_constant_velocity() {
        let z0 = rand_tensor(&[6, 2], 6);
        let eps = rand_tensor(&[6, 2], 7);
        let v = eps.sub(&z0).unwrap();
        for k in [1, 2, 7, 16, 100] {
            let z = euler_integrate(eps.clone(), k, |_, _| Ok(v.clone())).unwrap();
            assert!(z.max_abs_diff(&z0).unwrap() < 1e-12, "K={k}");
        }
        assert!(matches!(euler_integrate(eps, 0, |_, _| Ok(v.clone())), Err(Error::Config(_))));
    }

    #[test]
    fn layouts_follow_the_stated_rules() {
        let p = TaskLayout::prediction(2, 4).unwrap();
        assert_eq!(p.context_spans(), &[Span::new(0, 4), Span::new(4, 4)]);
        assert_eq!(p.current(), Span::new(8, 4));
        assert_eq!(p.orientation(1), Orientation::PastContext);

        let m = TaskLayout::multishot(2, 4, 20).unwrap();
        assert_eq!(m.context_spans()[1].start, m.context_spans()[0].end() + 20);
        assert_eq!(m.current().start, m.context_spans()[1].end() + 20);

        let r = TaskLayout::retrodiction(2, 4).unwrap();
        assert_eq!(r.orientation(0), Orientation::FutureContext);
        // Mirroring time maps the prediction spans onto the retrodiction spans.
        let total = p.horizon();
        let mirror = |s: &Span| Span::new(total - s.end(), s.len);
        let mut mirrored: Vec<Span> = p.context_spans().iter().map(mirror).collect();
        mirrored.sort_by_key(|s| s.start);
        assert_eq!(mirrored, r.context_spans());
        assert_eq!(mirror(&p.current()), r.current());

        let i = TaskLayout::interpolation(1, 1, 4).unwrap();
        assert_eq!(i.orientation(0), Orientation::PastContext);
        assert_eq!(i.orientation(1), Orientation::FutureContext);
        assert_eq!(i.current(), Span::new(4, 4));
    }

    #[test]
    fn invalid_layouts_are_rejected() {
        let overlap = TaskLayout::new(Task::Prediction, vec![Span::new(0, 4)], Span::new(3, 4), 0);
        assert!(matches!(overlap, Err(Error::Layout(_))));
        let wrong_side = TaskLayout::new(Task::Prediction, vec![Span::new(8, 4)], Span::new(0, 4), 0);
        assert!(wrong_side.is_err());
        let bad_gap = TaskLayout::new(Task::Multishot, vec![Span::new(0, 4)], Span::new(5, 4), 20);
        assert!(bad_gap.is_err());
        let gap_single = TaskLayout::new(Task::Prediction, vec![Span::new(0, 4)], Span::new(24, 4), 20);
        assert!(gap_single.is_err());
        assert_eq!("multishot".parse::<Task>().unwrap(), Task::Multishot);
        assert!("sideways".parse::<Task>().is_err());
    }

    fn tiny_flex() -> FlexFormer {
        FlexFormer::new(FlexConfig::new(3, 12, 2, 1), 1).unwrap()
    }

    fn tiny_dit(seed: u64) -> Dit {
        let mut cfg = DitConfig::new(3, 12, 2, 1, 12);
        cfg.time_features = 4;
        Dit::new(cfg, seed).unwrap()
    }

    fn seg(grid: Grid, seed: u64) -> Segment {
        Segment::new(grid, rand_tensor(&[grid.tokens(), 3], seed), Some(rand_tensor(&[2, 3], seed + 100))).unwrap()
    }

    fn bundle_for(layout: &TaskLayout, grid: Grid, strat: &str) -> ContextBundle {
        let ff = tiny_flex();
        let segs: Vec<Segment> = (0..layout.context_spans().len()).map(|i| seg(grid, i as u64)).collect();
        let hist: Vec<(&Segment, Orientation)> =
            segs.iter().enumerate().map(|(i, s)| (s, layout.orientation(i))).collect();
        ff.encode_history(&hist, &strat.parse().unwrap()).unwrap()
    }

    #[test]
    fn positions_for_prediction() {
        let grid = Grid::new(4, 2, 2);
        let layout = TaskLayout::prediction(2, 4).unwrap();
        let bundle = bundle_for(&layout, grid, "uniform:8");
        let pos = assign_positions(&layout, &bundle, grid, 2).unwrap();
        assert_eq!(pos.context.len(), 4);
        assert_eq!(pos.context.iter().map(|p| p.t).collect::<Vec<_>>(), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(pos.video.first().unwrap().t, 8.0);
        assert_eq!(pos.text, vec![Position3D::new(12.0, 0.0, 0.0), Position3D::new(13.0, 0.0, 0.0)]);
        let wrong = TaskLayout::prediction(1, 4).unwrap();
        assert!(matches!(assign_positions(&wrong, &bundle, grid, 0), Err(Error::Layout(_))));
    }

    #[test]
    fn fresh_head_predicts_zero_velocity() {
        let dit = tiny_dit(2);
        let grid = Grid::new(2, 2, 1);
        let layout = TaskLayout::prediction(1, 2).unwrap();
        let bundle = bundle_for(&layout, grid, "uniform:2");
        let v = dit
            .predict_velocity(&rand_tensor(&[4, 3], 9), 0.3, None, &bundle, &layout, grid)
            .unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_bundle_runs_unconditionally() {
        let mut dit = tiny_dit(3);
        perturb(dit.params_mut(), 4);
        let grid = Grid::new(2, 1, 2);
        let layout = TaskLayout::prediction(0, 2).unwrap();
        let v = dit
            .predict_velocity(&rand_tensor(&[4, 3], 1), 0.5, Some(&rand_tensor(&[2, 3], 2)), &ContextBundle::default(), &layout, grid)
            .unwrap();
        assert!(v.data().iter().all(|x| x.is_finite()));
        assert!(v.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn context_width_mismatch_is_config_error() {
        let mut cfg = DitConfig::new(3, 12, 2, 1, 6);
        cfg.time_features = 4;
        let dit = Dit::new(cfg, 0).unwrap();
        let grid = Grid::new(2, 1, 1);
        let layout = TaskLayout::prediction(1, 2).unwrap();
        let bundle = bundle_for(&layout, grid, "uniform:1");
        let r = dit.predict_velocity(&rand_tensor(&[2, 3], 1), 0.5, None, &bundle, &layout, grid);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn perturb(ps: &mut ParamSet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in ps.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn duplicated_keys_act_as_log_two_bias() {
        let q = rand_tensor(&[3, 6], 10);
        let kx = rand_tensor(&[4, 6], 11);
        let kc = rand_tensor(&[2, 6], 12);
        let vx = rand_tensor(&[4, 6], 13);
        let vc = rand_tensor(&[2, 6], 14);
        let scale = 0.4;
        let doubled = attention(
            &q,
            &Tensor::concat_rows(&[&kx, &kc, &kc]).unwrap(),
            &Tensor::concat_rows(&[&vx, &vc, &vc]).unwrap(),
            scale,
        )
        .unwrap();
        // Oracle: single copy of the context keys with logits raised by ln 2.
        let keys = Tensor::concat_rows(&[&kx, &kc]).unwrap();
        let vals = Tensor::concat_rows(&[&vx, &vc]).unwrap();
        for i in 0..3 {
            let logits: Vec<f64> = (0..6)
                .map(|j| {
                    let s: f64 = q.row(i).iter().zip(keys.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
                    if j >= 4 { s + 2f64.ln() } else { s }
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..6 {
                let o: f64 = (0..6).map(|j| w[j] / z * vals.row(j)[c]).sum();
                assert!((o - doubled.row(i)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repeated_chunk_stays_finite_and_deterministic() {
        let mut dit = tiny_dit(5);
        perturb(dit.params_mut(), 6);
        let grid = Grid::new(2, 2, 1);
        let one = TaskLayout::prediction(1, 2).unwrap();
        let bundle = bundle_for(&one, grid, "uniform:2");
        let mut doubled = bundle.clone();
        doubled.chunks.push(bundle.chunks[0].clone());
        let layout2 = TaskLayout::new(Task::Prediction, vec![Span::new(0, 2), Span::new(0, 2)], Span::new(2, 2), 0);
        // Identical spans overlap, so the layout itself refuses them.
        assert!(layout2.is_err());
        let two = TaskLayout::prediction(2, 2).unwrap();
        let z = rand_tensor(&[4, 3], 7);
        let a = dit.predict_velocity(&z, 0.4, None, &doubled, &two, grid).unwrap();
        let b = dit.predict_velocity(&z, 0.4, None, &doubled, &two, grid).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn sampling_is_seeded() {
        let mut dit = tiny_dit(8);
        perturb(dit.params_mut(), 9);
        let grid = Grid::new(2, 1, 1);
        let layout = TaskLayout::prediction(0, 2).unwrap();
        let empty = ContextBundle::default();
        let a = dit.sample_segment(&empty, &layout, grid, None, 4, 11).unwrap();
        let b = dit.sample_segment(&empty, &layout, grid, None, 4, 11).unwrap();
        let c = dit.sample_segment(&empty, &layout, grid, None, 4, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(dit.sample_segment(&empty, &layout, grid, None, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn velocity_gradients_match_finite_differences() {
        let mut dit = tiny_dit(10);
        perturb(dit.params_mut(), 11);
        assert!(dit.params().numel() <= 5000);
        let grid = Grid::new(2, 1, 2);
        let layout = TaskLayout::interpolation(1, 1, 2).unwrap();
        let bundle = bundle_for(&layout, grid, "linear:2:1");
        let state = flow_pair(&rand_tensor(&[4, 3], 12), &rand_tensor(&[4, 3], 13), 0.6).unwrap();
        let text = rand_tensor(&[2, 3], 14);
        let report = grad_check(dit.params(), 1e-5, |tape, ps| {
            let mut m = dit.clone();
            m.params = ps.clone();
            m.flow_loss_on_tape(tape, &state, Some(&text), &bundle, &layout, grid)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn context_never_collides_with_current_tokens(
            task in 0usize..4, n in 0usize..3, seg_len in 1usize..4, gap in 0usize..5,
            hw in 1usize..3, ratio in 1.0f64..6.0,
        ) {
            let layout = match task {
                0 => TaskLayout::prediction(n, seg_len),
                1 => TaskLayout::retrodiction(n, seg_len),
                2 => TaskLayout::interpolation(n, 1, seg_len),
                _ => TaskLayout::multishot(n, seg_len, gap),
            }.unwrap();
            let grid = Grid::new(seg_len, hw, hw);
            let strat = CompressionStrategy::linear(ratio, 1.0).unwrap();
            let chunks = (0..layout.context_spans().len()).map(|i| {
                let plan = crate::compression::plan_queries(grid, &strat, layout.orientation(i));
                crate::flexformer::ContextChunk {
                    tokens: Tensor::zeros(&[plan.n_queries, 1]),
                    plan,
                    source_grid: grid,
                    source_text: 0,
                }
            }).collect();
            let bundle = ContextBundle { chunks };
            let pos = assign_positions(&layout, &bundle, grid, 2).unwrap();
            for c in &pos.context {
                prop_assert!(!pos.video.contains(c));
                prop_assert!(!pos.text.contains(c));
            }
        }
    }
}
