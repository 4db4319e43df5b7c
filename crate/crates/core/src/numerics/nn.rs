//! Attention, projections and the pre-norm transformer block.

use std::rc::Rc;

use rand::Rng;

use super::param::{ParamId, ParamSet};
use super::tape::{attention_forward, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::positional::{Position3D, RotaryConfig, RotaryTable, DEFAULT_ROPE_BASE};

/// Single-head scaled dot-product attention on plain tensors.
///
/// Every output row is a convex combination of the rows of `values`.
pub fn attention(queries: &Tensor, keys: &Tensor, values: &Tensor, scale: f64) -> Result<Tensor> {
    if queries.cols() == 0 {
        return Err(Error::Dimension("attention width must be positive".into()));
    }
    attention_forward(queries, keys, values, 1, scale).map(|(out, _)| out)
}

/// Weight initialization for a projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 1/fan_in)`
    FanIn,
    Zeros,
}

/// Affine map `x W + b` with `W` of shape `[in x out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            Init::FanIn => params.add_linear_weight(format!("{name}.w"), fan_in, fan_out, rng)?,
            Init::Zeros => params.add_zeros(format!("{name}.w"), &[fan_in, fan_out])?,
        };
        let b = if bias { Some(params.add_zeros(format!("{name}.b"), &[fan_out])?) } else { None };
        Ok(Self { w, b })
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(params, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
}

impl BlockConfig {
    pub fn new(d_model: usize, heads: usize) -> Self {
        Self { d_model, heads, mlp_ratio: 4, rope_base: DEFAULT_ROPE_BASE }
    }

    /// Rotary configuration of one attention head.
    pub fn rotary(&self) -> Result<RotaryConfig> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        RotaryConfig::new(self.d_model / self.heads, self.rope_base)
    }

    pub fn rotary_table(&self, positions: &[Position3D]) -> Result<Rc<RotaryTable>> {
        Ok(Rc::new(RotaryTable::new(positions, self.rotary()?)?))
    }
}

/// Pre-normalization residual block:
/// `x + attn(norm(x))`, then `+ mlp(norm(.))` with a GELU hidden layer.
///
/// Rotary embeddings rotate queries and keys only. Output projections start
/// at zero, so a fresh block is the identity map.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    cfg: BlockConfig,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.rotary()?;
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        Ok(Self {
            cfg,
            wq: Linear::new(params, &format!("{prefix}.attn.q"), d, d, false, Init::FanIn, rng)?,
            wk: Linear::new(params, &format!("{prefix}.attn.k"), d, d, false, Init::FanIn, rng)?,
            wv: Linear::new(params, &format!("{prefix}.attn.v"), d, d, false, Init::FanIn, rng)?,
            wo: Linear::new(params, &format!("{prefix}.attn.o"), d, d, true, Init::Zeros, rng)?,
            fc1: Linear::new(params, &format!("{prefix}.mlp.fc1"), d, hidden, true, Init::FanIn, rng)?,
            fc2: Linear::new(params, &format!("{prefix}.mlp.fc2"), hidden, d, true, Init::Zeros, rng)?,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    /// Self-attention over `x` with `rope` giving one position per row.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        rope: &Rc<RotaryTable>,
    ) -> Result<Var> {
        self.forward_with_context(tape, params, x, rope, None, rope)
    }

    /// Attention where queries come from `x` and keys/values from
    /// `x ++ context`. `kv_rope` covers the concatenated key rows.
    pub fn forward_with_context(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        q_rope: &Rc<RotaryTable>,
        context: Option<Var>,
        kv_rope: &Rc<RotaryTable>,
    ) -> Result<Var> {
        let h = tape.layer_norm(x);
        let kv_in = match context {
            Some(c) => tape.concat_rows(&[h, c])?,
            None => h,
        };
        let q = self.wq.forward(tape, params, h)?;
        let k = self.wk.forward(tape, params, kv_in)?;
        let v = self.wv.forward(tape, params, kv_in)?;
        let q = tape.rope(q, q_rope.clone())?;
        let k = tape.rope(k, kv_rope.clone())?;
        let head_dim = self.cfg.d_model / self.cfg.heads;
        let a = tape.attention(q, k, v, self.cfg.heads, 1.0 / (head_dim as f64).sqrt())?;
        let a = self.wo.forward(tape, params, a)?;
        let x = tape.add(x, a)?;

        let h = tape.layer_norm(x);
        let m = self.fc1.forward(tape, params, h)?;
        let m = tape.gelu(m);
        let m = self.fc2.forward(tape, params, m)?;
        tape.add(x, m)
    }

    /// Evaluates the block on plain tensors.
    pub fn apply(&self, params: &ParamSet, tokens: &Tensor, positions: &[Position3D]) -> Result<Tensor> {
        if positions.len() != tokens.rows() {
            return Err(Error::Layout(format!(
                "{} positions for {} tokens",
                positions.len(),
                tokens.rows()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let rope = self.cfg.rotary_table(positions)?;
        let y = self.forward(&mut tape, params, x, &rope)?;
        Ok(tape.value(y).clone())
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Checks every parameter coordinate of `params` against central finite
/// differences. Relative error uses `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Domain(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, ps)?;
        let value = tape.value(loss);
        if !value.is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                value.shape()
            )));
        }
        Ok(value.data()[0])
    };

    let mut analytic = params.clone();
    analytic.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, params)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                tape.value(loss).shape()
            )));
        }
        let grads = tape.backward(loss)?;
        analytic.accumulate(&tape, &grads, 1.0);
    }

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    for id in params.ids() {
        for i in 0..params.value(id).numel() {
            let orig = params.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let exact = analytic.get(id).grad.data()[i];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
