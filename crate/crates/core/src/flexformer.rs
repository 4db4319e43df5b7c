//! Compression autoencoder over (video, text) segment pairs.
//!
//! The encoder appends `N` copies of one learnable query token to the
//! segment's video and text tokens, runs self-attention blocks, and keeps the
//! outputs at the query slots as context tokens. The decoder does the
//! reverse with one replicated query token per modality. Query tokens carry
//! interpolated 3D positions from the compression plan, so they live in the
//! same rotary coordinate frame as the video lattice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compression::{plan_queries, CompressionPlan, CompressionStrategy, Grid, Orientation};
use crate::error::{Error, Result};
use crate::numerics::{BlockConfig, Init, Linear, ParamId, ParamSet, Parameter, Tape, Tensor, TransformerBlock, Var};
use crate::positional::{grid_positions, text_positions, Position3D, DEFAULT_ROPE_BASE};

/// One (video, text) pair. Video rows are in `t, h, w` raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    grid: Grid,
    video: Tensor,
    text: Option<Tensor>,
}

impl Segment {
    pub fn new(grid: Grid, video: Tensor, text: Option<Tensor>) -> Result<Self> {
        if video.shape().len() != 2 || video.rows() != grid.tokens() {
            return Err(Error::Dimension(format!(
                "video of shape {:?} for grid {grid}",
                video.shape()
            )));
        }
        if let Some(t) = &text {
            if t.shape().len() != 2 || t.cols() != video.cols() {
                return Err(Error::Dimension(format!(
                    "text of shape {:?} next to video width {}",
                    t.shape(),
                    video.cols()
                )));
            }
        }
        Ok(Self { grid, video, text })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn video(&self) -> &Tensor {
        &self.video
    }

    pub fn text(&self) -> Option<&Tensor> {
        self.text.as_ref()
    }

    pub fn n_text(&self) -> usize {
        self.text.as_ref().map_or(0, Tensor::rows)
    }

    pub fn token_dim(&self) -> usize {
        self.video.cols()
    }
}

/// Where encoder query tokens sit and whether they share one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// One replicated query at interpolated plan positions.
    InterpolatedSingle,
    /// One replicated query at 1D text-style positions after the text.
    TextStyleSingle,
    /// A distinct learnable query per slot at 1D text-style positions.
    TextStyleMultiple,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlexConfig {
    pub token_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub query_mode: QueryMode,
    /// Slots available to [`QueryMode::TextStyleMultiple`].
    pub max_queries: usize,
    pub rope_base: f64,
}

impl FlexConfig {
    pub fn new(token_dim: usize, d_model: usize, heads: usize, blocks: usize) -> Self {
        Self {
            token_dim,
            d_model,
            heads,
            enc_blocks: blocks,
            dec_blocks: blocks,
            query_mode: QueryMode::InterpolatedSingle,
            max_queries: 0,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }

    fn block(&self) -> BlockConfig {
        BlockConfig { rope_base: self.rope_base, ..BlockConfig::new(self.d_model, self.heads) }
    }
}

/// Compressed tokens of one segment together with the plan that placed them.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextChunk {
    pub tokens: Tensor,
    pub plan: CompressionPlan,
    pub source_grid: Grid,
    pub source_text: usize,
}

impl ContextChunk {
    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }
}

/// Context chunks of a whole history, in segment order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextBundle {
    pub chunks: Vec<ContextChunk>,
}

impl ContextBundle {
    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.chunks.iter().map(ContextChunk::n_tokens).sum()
    }

    /// All chunk tokens stacked in order, or `None` for an empty bundle.
    pub fn stacked(&self) -> Option<Tensor> {
        if self.chunks.is_empty() {
            return None;
        }
        let parts: Vec<&Tensor> = self.chunks.iter().map(|c| &c.tokens).collect();
        Some(Tensor::concat_rows(&parts).expect("chunks share a width"))
    }
}

/// Encoder/decoder parameters and structure.
#[derive(Debug, Clone)]
pub struct FlexFormer {
    cfg: FlexConfig,
    params: ParamSet,
    in_video: Linear,
    in_text: Linear,
    out_video: Linear,
    out_text: Linear,
    q_enc: ParamId,
    q_vid: ParamId,
    q_txt: ParamId,
    encoder: Vec<TransformerBlock>,
    decoder: Vec<TransformerBlock>,
}

impl FlexFormer {
    pub fn new(cfg: FlexConfig, seed: u64) -> Result<Self> {
        if cfg.d_model % 6 != 0 || cfg.token_dim == 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of 6 and token_dim positive",
                cfg.d_model
            )));
        }
        if cfg.query_mode == QueryMode::TextStyleMultiple && cfg.max_queries == 0 {
            return Err(Error::Config("multiple-query mode needs max_queries > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (c, d) = (cfg.token_dim, cfg.d_model);
        let in_video = Linear::new(&mut params, "flex.in_video", c, d, true, Init::FanIn, &mut rng)?;
        let in_text = Linear::new(&mut params, "flex.in_text", c, d, true, Init::FanIn, &mut rng)?;
        let out_video = Linear::new(&mut params, "flex.out_video", d, c, true, Init::FanIn, &mut rng)?;
        let out_text = Linear::new(&mut params, "flex.out_text", d, c, true, Init::FanIn, &mut rng)?;
        let enc_rows = match cfg.query_mode {
            QueryMode::TextStyleMultiple => cfg.max_queries,
            _ => 1,
        };
        let q_enc = params.add("flex.q_enc", Tensor::randn(&[enc_rows, d], 1.0, &mut rng))?;
        let q_vid = params.add("flex.q_vid", Tensor::randn(&[1, d], 1.0, &mut rng))?;
        let q_txt = params.add("flex.q_txt", Tensor::randn(&[1, d], 1.0, &mut rng))?;
        let block = cfg.block();
        let encoder = (0..cfg.enc_blocks)
            .map(|i| TransformerBlock::new(&mut params, &format!("flex.enc.{i}"), block, &mut rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.dec_blocks)
            .map(|i| TransformerBlock::new(&mut params, &format!("flex.dec.{i}"), block, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, params, in_video, in_text, out_video, out_text, q_enc, q_vid, q_txt, encoder, decoder })
    }

    pub fn config(&self) -> &FlexConfig {
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

    fn check_segment(&self, seg: &Segment) -> Result<()> {
        if seg.token_dim() != self.cfg.token_dim {
            return Err(Error::Config(format!(
                "segment token width {} but model expects {}",
                seg.token_dim(),
                self.cfg.token_dim
            )));
        }
        Ok(())
    }

    /// Positions of the query (context) slots under the configured mode.
    pub fn query_positions(&self, plan: &CompressionPlan, n_text: usize) -> Vec<Position3D> {
        match self.cfg.query_mode {
            QueryMode::InterpolatedSingle => plan.positions.clone(),
            QueryMode::TextStyleSingle | QueryMode::TextStyleMultiple => {
                let t0 = (plan.grid.t + n_text) as f64;
                (0..plan.n_queries).map(|i| Position3D::new(t0 + i as f64, 0.0, 0.0)).collect()
            }
        }
    }

    fn embed_inputs(&self, tape: &mut Tape, seg: &Segment) -> Result<Vec<Var>> {
        let v = tape.constant(seg.video.clone());
        let mut parts = vec![self.in_video.forward(tape, &self.params, v)?];
        if let Some(t) = &seg.text {
            let t = tape.constant(t.clone());
            parts.push(self.in_text.forward(tape, &self.params, t)?);
        }
        Ok(parts)
    }

    /// Records the encoder on `tape`; returns the `[N x d_model]` context.
    pub fn encode_on_tape(&self, tape: &mut Tape, seg: &Segment, plan: &CompressionPlan) -> Result<Var> {
        self.check_segment(seg)?;
        let n = plan.n_queries;
        let q = tape.param(&self.params, self.q_enc);
        let queries = match self.cfg.query_mode {
            QueryMode::TextStyleMultiple => {
                if n > self.cfg.max_queries {
                    return Err(Error::Config(format!(
                        "{n} queries exceed the {} learned slots",
                        self.cfg.max_queries
                    )));
                }
                tape.slice_rows(q, 0, n)?
            }
            _ => tape.repeat_rows(q, n)?,
        };
        let mut parts = self.embed_inputs(tape, seg)?;
        parts.push(queries);
        let mut x = tape.concat_rows(&parts)?;

        let g = seg.grid.as_tuple();
        let mut pos = grid_positions(g, 0.0);
        pos.extend(text_positions(seg.n_text(), g));
        pos.extend(self.query_positions(plan, seg.n_text()));
        let rope = self.cfg.block().rotary_table(&pos)?;
        for b in &self.encoder {
            x = b.forward(tape, &self.params, x, &rope)?;
        }
        tape.slice_rows(x, seg.grid.tokens() + seg.n_text(), n)
    }

    /// Records the decoder; returns model-space hidden states of the video
    /// and text query slots.
    fn decode_hidden(
        &self,
        tape: &mut Tape,
        context: Var,
        plan: &CompressionPlan,
        grid: Grid,
        n_text: usize,
    ) -> Result<(Var, Option<Var>)> {
        let qv = tape.param(&self.params, self.q_vid);
        let mut parts = vec![context, tape.repeat_rows(qv, grid.tokens())?];
        if n_text > 0 {
            let qt = tape.param(&self.params, self.q_txt);
            parts.push(tape.repeat_rows(qt, n_text)?);
        }
        let mut x = tape.concat_rows(&parts)?;
        let mut pos = self.query_positions(plan, n_text);
        pos.extend(grid_positions(grid.as_tuple(), 0.0));
        pos.extend(text_positions(n_text, grid.as_tuple()));
        let rope = self.cfg.block().rotary_table(&pos)?;
        for b in &self.decoder {
            x = b.forward(tape, &self.params, x, &rope)?;
        }
        let n = plan.n_queries;
        let video = tape.slice_rows(x, n, grid.tokens())?;
        let text = if n_text > 0 { Some(tape.slice_rows(x, n + grid.tokens(), n_text)?) } else { None };
        Ok((video, text))
    }

    /// Records the decoder and output heads; returns `[THW x token_dim]`
    /// video and optional `[L x token_dim]` text reconstructions.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        context: Var,
        plan: &CompressionPlan,
        grid: Grid,
        n_text: usize,
    ) -> Result<(Var, Option<Var>)> {
        if tape.value(context).cols() != self.cfg.d_model || tape.value(context).rows() != plan.n_queries {
            return Err(Error::Config(format!(
                "context of shape {:?} for {} queries of width {}",
                tape.value(context).shape(),
                plan.n_queries,
                self.cfg.d_model
            )));
        }
        let (v, t) = self.decode_hidden(tape, context, plan, grid, n_text)?;
        let v = tape.layer_norm(v);
        let v = self.out_video.forward(tape, &self.params, v)?;
        let t = match t {
            Some(t) => {
                let t = tape.layer_norm(t);
                Some(self.out_text.forward(tape, &self.params, t)?)
            }
            None => None,
        };
        Ok((v, t))
    }

    pub fn plan(&self, seg: &Segment, strategy: &CompressionStrategy, orientation: Orientation) -> CompressionPlan {
        plan_queries(seg.grid, strategy, orientation)
    }

    pub fn encode_segment(
        &self,
        seg: &Segment,
        strategy: &CompressionStrategy,
        orientation: Orientation,
    ) -> Result<ContextChunk> {
        let plan = self.plan(seg, strategy, orientation);
        let mut tape = Tape::new();
        let ctx = self.encode_on_tape(&mut tape, seg, &plan)?;
        Ok(ContextChunk {
            tokens: tape.value(ctx).clone(),
            plan,
            source_grid: seg.grid,
            source_text: seg.n_text(),
        })
    }

    pub fn decode_segment(&self, chunk: &ContextChunk) -> Result<Segment> {
        let mut tape = Tape::new();
        let ctx = tape.constant(chunk.tokens.clone());
        let (v, t) = self.decode_on_tape(&mut tape, ctx, &chunk.plan, chunk.source_grid, chunk.source_text)?;
        Segment::new(chunk.source_grid, tape.value(v).clone(), t.map(|t| tape.value(t).clone()))
    }

    /// Encodes each segment independently; chunks keep the input order.
    pub fn encode_history(
        &self,
        history: &[(&Segment, Orientation)],
        strategy: &CompressionStrategy,
    ) -> Result<ContextBundle> {
        let chunks = history
            .iter()
            .map(|(seg, o)| self.encode_segment(seg, strategy, *o))
            .collect::<Result<_>>()?;
        Ok(ContextBundle { chunks })
    }

    /// Records encode, decode and the reconstruction loss for one segment.
    pub fn autoencode_loss_on_tape(
        &self,
        tape: &mut Tape,
        seg: &Segment,
        plan: &CompressionPlan,
    ) -> Result<Var> {
        let ctx = self.encode_on_tape(tape, seg, plan)?;
        let (v, t) = self.decode_on_tape(tape, ctx, plan, seg.grid, seg.n_text())?;
        let target_v = tape.constant(seg.video.clone());
        match (t, &seg.text) {
            (Some(t), Some(tt)) => {
                let target_t = tape.constant(tt.clone());
                let (nv, nt) = (seg.video.numel() as f64, tt.numel() as f64);
                let lv = tape.mse(v, target_v)?;
                let lt = tape.mse(t, target_t)?;
                let lv = tape.scale(lv, nv / (nv + nt));
                let lt = tape.scale(lt, nt / (nv + nt));
                tape.add(lv, lt)
            }
            _ => tape.mse(v, target_v),
        }
    }
}

/// Mean squared error over every video and text coordinate.
pub fn reconstruction_loss(recon: &Segment, target: &Segment) -> Result<f64> {
    if recon.grid != target.grid || recon.n_text() != target.n_text() {
        return Err(Error::Contract(format!(
            "reconstruction {} + {} text does not match target {} + {} text",
            recon.grid,
            recon.n_text(),
            target.grid,
            target.n_text()
        )));
    }
    recon.video.expect_same_shape(&target.video).map_err(|e| Error::Contract(e.to_string()))?;
    let mut sum: f64 = recon.video.sub(&target.video)?.data().iter().map(|d| d * d).sum();
    let mut count = recon.video.numel();
    if let (Some(a), Some(b)) = (&recon.text, &target.text) {
        sum += a.sub(b)?.data().iter().map(|d| d * d).sum::<f64>();
        count += a.numel();
    }
    Ok(sum / count as f64)
}
