//! Reverse-mode differentiation over a flat, append-only tape.
//!
//! Every operation pushes one node holding its forward value. `backward`
//! walks the tape in reverse and accumulates vector-Jacobian products into a
//! per-node gradient slot. Nodes that cannot reach a parameter leaf are
//! skipped. Accumulation order is fixed by node order, so gradients are
//! bit-reproducible.

use std::rc::Rc;

use super::param::{ParamId, ParamSet};
use super::tensor::{dot, matmul_acc_at, matmul_acc_bt, Tensor};
use crate::error::{Error, Result};
use crate::positional::RotaryTable;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    RepeatRows(Var),
    Rope { x: Var, table: Rc<RotaryTable> },
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: f64, probs: Vec<f64> },
    MeanSquaredError(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used by gradient checks on inputs).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter as a differentiable leaf.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let v = self.push(params.value(id).clone(), Op::Leaf, true);
        self.bindings.push((v, id));
        v
    }

    /// Binds a parameter as a constant; its gradient is never computed.
    pub fn frozen(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.constant(params.value(id).clone())
    }

    pub(crate) fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds a length-`m` vector to every row of an `[n x m]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.numel() != x.cols() {
            return Err(Error::Dimension(format!(
                "bias of {} values for rows of width {}",
                b.numel(),
                x.cols()
            )));
        }
        let mut value = x.clone();
        let m = x.cols();
        for row in value.data_mut().chunks_exact_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let m = input.cols();
        let mut value = input.clone();
        let mut rstd = Vec::with_capacity(input.rows());
        for row in value.data_mut().chunks_exact_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let ng = self.ng(x);
        self.push(value, Op::LayerNorm { x, rstd }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceRows { x, start }, ng))
    }

    /// Replicates a single token (any shape with `numel == d`) into `[n x d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Dimension("repeat count must be positive".into()));
        }
        let src = self.value(x);
        let d = src.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![n, d], data), Op::RepeatRows(x), ng))
    }

    /// Applies a rotary table to every head slice of each row.
    pub fn rope(&mut self, x: Var, table: Rc<RotaryTable>) -> Result<Var> {
        let input = self.value(x);
        let (n, width) = (input.rows(), input.cols());
        if table.len() != n {
            return Err(Error::Layout(format!(
                "{} positions for {n} tokens",
                table.len()
            )));
        }
        if width % table.head_dim() != 0 {
            return Err(Error::Config(format!(
                "row width {width} is not a multiple of rotary width {}",
                table.head_dim()
            )));
        }
        let mut value = input.clone();
        table.rotate_rows(value.data_mut(), width, false);
        let ng = self.ng(x);
        Ok(self.push(value, Op::Rope { x, table }, ng))
    }

    /// Multi-head scaled dot-product attention without masking.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let (out, probs) =
            attention_forward(self.value(q), self.value(k), self.value(v), heads, scale)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, scale, probs }, ng))
    }

    /// Mean over all coordinates of `(a - b)^2`, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_same_shape(y)?;
        let s = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / x.numel() as f64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::MeanSquaredError(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match slots[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut slots);
            slots[idx] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn propagate(&self, node: &Node, g: &Tensor, slots: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    matmul_acc_bt(gd, bv.data(), self.slot(slots, *a), n, k, m);
                }
                if self.ng(*b) {
                    matmul_acc_at(av.data(), gd, self.slot(slots, *b), n, k, m);
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(slots, *a, gd, 1.0);
                self.acc_scaled(slots, *b, gd, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(slots, *a, gd, 1.0);
                self.acc_scaled(slots, *b, gd, -1.0);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    for ((o, &gi), &bi) in self.slot(slots, *a).iter_mut().zip(gd).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    for ((o, &gi), &ai) in self.slot(slots, *b).iter_mut().zip(gd).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                self.acc_scaled(slots, *a, gd, 1.0);
                if self.ng(*bias) {
                    let m = g.cols();
                    let out = self.slot(slots, *bias);
                    for row in gd.chunks_exact(m) {
                        for (o, &gi) in out.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.acc_scaled(slots, *a, gd, *s),
            Op::LayerNorm { x, rstd } => {
                if self.ng(*x) {
                    let y = node.value.data();
                    let m = g.cols();
                    let out = self.slot(slots, *x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gr, yr) = (&gd[r * m..(r + 1) * m], &y[r * m..(r + 1) * m]);
                        let mean_g = gr.iter().sum::<f64>() / m as f64;
                        let mean_gy = dot(gr, yr) / m as f64;
                        for j in 0..m {
                            out[r * m + j] += rs * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x).data();
                    let out = self.slot(slots, *x);
                    for ((o, &gi), &v) in out.iter_mut().zip(gd).zip(xv) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *o += gi * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let m = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).rows() * m;
                    self.acc_scaled(slots, p, &gd[offset..offset + len], 1.0);
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let m = g.cols();
                    let out = self.slot(slots, *x);
                    for (o, &gi) in out[start * m..start * m + gd.len()].iter_mut().zip(gd) {
                        *o += gi;
                    }
                }
            }
            Op::RepeatRows(x) => {
                if self.ng(*x) {
                    let d = g.cols();
                    let out = self.slot(slots, *x);
                    for row in gd.chunks_exact(d) {
                        for (o, &gi) in out.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Rope { x, table } => {
                if self.ng(*x) {
                    let mut back = gd.to_vec();
                    table.rotate_rows(&mut back, g.cols(), true);
                    self.acc_scaled(slots, *x, &back, 1.0);
                }
            }
            Op::Attention { q, k, v, heads, scale, probs } => {
                self.attention_backward(slots, gd, *q, *k, *v, *heads, *scale, probs);
            }
            Op::MeanSquaredError(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * gd[0] / av.len() as f64;
                let diff: Vec<f64> = av.iter().zip(bv).map(|(p, q)| c * (p - q)).collect();
                self.acc_scaled(slots, *a, &diff, 1.0);
                self.acc_scaled(slots, *b, &diff, -1.0);
            }
            Op::Sum(x) => {
                if self.ng(*x) {
                    let g0 = gd[0];
                    for o in self.slot(slots, *x).iter_mut() {
                        *o += g0;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        slots: &mut [Option<Tensor>],
        gd: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: &[f64],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, nk, d) = (qv.rows(), kv.rows(), qv.cols());
        let hd = d / heads;
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut dp = vec![0.0; nk];
        for h in 0..heads {
            let c0 = h * hd;
            let p_head = &probs[h * nq * nk..(h + 1) * nq * nk];
            for i in 0..nq {
                let go = &gd[i * d + c0..i * d + c0 + hd];
                let p_row = &p_head[i * nk..(i + 1) * nk];
                let mut weighted = 0.0;
                for j in 0..nk {
                    dp[j] = dot(go, &vv.data()[j * d + c0..j * d + c0 + hd]);
                    weighted += dp[j] * p_row[j];
                }
                let qi = &qv.data()[i * d + c0..i * d + c0 + hd];
                for j in 0..nk {
                    let pij = p_row[j];
                    let ds = pij * (dp[j] - weighted) * scale;
                    let kj = &kv.data()[j * d + c0..j * d + c0 + hd];
                    let dq_row = &mut dq[i * d + c0..i * d + c0 + hd];
                    for t in 0..hd {
                        dq_row[t] += ds * kj[t];
                    }
                    let dk_row = &mut dk[j * d + c0..j * d + c0 + hd];
                    for t in 0..hd {
                        dk_row[t] += ds * qi[t];
                    }
                    let dv_row = &mut dv[j * d + c0..j * d + c0 + hd];
                    for t in 0..hd {
                        dv_row[t] += pij * go[t];
                    }
                }
            }
        }
        self.acc_scaled(slots, q, &dq, 1.0);
        self.acc_scaled(slots, k, &dk, 1.0);
        self.acc_scaled(slots, v, &dv, 1.0);
    }

    fn slot<'s>(&self, slots: &'s mut [Option<Tensor>], v: Var) -> &'s mut [f64] {
        slots[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.value(v).shape()))
            .data_mut()
    }

    fn acc_scaled(&self, slots: &mut [Option<Tensor>], v: Var, g: &[f64], s: f64) {
        if !self.ng(v) {
            return;
        }
        let out = self.slot(slots, v);
        if s == 1.0 {
            for (o, &gi) in out.iter_mut().zip(g) {
                *o += gi;
            }
        } else {
            for (o, &gi) in out.iter_mut().zip(g) {
                *o += s * gi;
            }
        }
    }
}

/// Forward kernel shared by the tape op and the plain-tensor entry point.
/// Returns the output and the per-head probability matrices.
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    if k.cols() != d || v.cols() != d || v.rows() != nk {
        return Err(Error::Dimension(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
    }
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("attention scale {scale} must be positive")));
    }
    let hd = d / heads;
    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; heads * nq * nk];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for h in 0..heads {
        let c0 = h * hd;
        for i in 0..nq {
            let qi = &qd[i * d + c0..i * d + c0 + hd];
            let p_row = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let mut max = f64::NEG_INFINITY;
            for j in 0..nk {
                let s = scale * dot(qi, &kd[j * d + c0..j * d + c0 + hd]);
                p_row[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for p in p_row.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            let out_row = &mut out[i * d + c0..i * d + c0 + hd];
            for (j, p) in p_row.iter_mut().enumerate() {
                *p /= z;
                let vj = &vd[j * d + c0..j * d + c0 + hd];
                for t in 0..hd {
                    out_row[t] += *p * vj[t];
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![nq, d], out), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` with respect to every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += eps;
                let mut m = x.clone();
                m.data_mut()[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    /// Runs a unary graph builder and checks d(sum(out * w))/dx.
    fn check_unary(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eval = |input: &Tensor, grad: bool| {
            let mut tape = Tape::new();
            let xv = if grad { tape.variable(input.clone()) } else { tape.constant(input.clone()) };
            let y = build(&mut tape, xv);
            (tape, xv, y)
        };
        let (tape, _, y) = eval(&x, false);
        let w = Tensor::randn(tape.value(y).shape(), 1.0, &mut rng);
        let loss_of = |input: &Tensor| {
            let (mut tape, _, y) = eval(input, false);
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv).unwrap();
            let s = tape.sum(p);
            tape.value(s).data()[0]
        };
        let (mut tape, xv, y) = eval(&x, true);
        let wv = tape.constant(w.clone());
        let p = tape.mul(y, wv).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        let analytic = grads.get(xv).unwrap().data().to_vec();
        assert_close(&analytic, &numeric_grad(&x, loss_of), 1e-6);
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn layer_norm_gradient() {
        check_unary(rand_tensor(&[3, 6], 1), |t, x| t.layer_norm(x));
    }

    #[test]
    fn gelu_gradient() {
        check_unary(rand_tensor(&[4, 5], 2), |t, x| t.gelu(x));
    }

    #[test]
    fn matmul_gradient_both_sides() {
        let b = rand_tensor(&[5, 3], 3);
        check_unary(rand_tensor(&[4, 5], 4), |t, x| {
            let bv = t.constant(b.clone());
            t.matmul(x, bv).unwrap()
        });
        let a = rand_tensor(&[4, 5], 5);
        check_unary(b, |t, x| {
            let av = t.constant(a.clone());
            t.matmul(av, x).unwrap()
        });
    }

    #[test]
    fn structural_ops_gradient() {
        check_unary(rand_tensor(&[1, 6], 6), |t, x| t.repeat_rows(x, 4).unwrap());
        check_unary(rand_tensor(&[5, 3], 7), |t, x| {
            let s = t.slice_rows(x, 1, 3).unwrap();
            let c = t.concat_rows(&[x, s]).unwrap();
            t.scale(c, -1.5)
        });
        let bias = rand_tensor(&[3], 8);
        check_unary(rand_tensor(&[4, 3], 9), |t, x| {
            let b = t.constant(bias.clone());
            t.add_row(x, b).unwrap()
        });
        check_unary(rand_tensor(&[3], 10), |t, x| {
            let a = t.constant(rand_tensor(&[4, 3], 11));
            t.add_row(a, x).unwrap()
        });
    }

    #[test]
    fn attention_gradient_each_input() {
        let (q, k, v) = (rand_tensor(&[3, 8], 12), rand_tensor(&[5, 8], 13), rand_tensor(&[5, 8], 14));
        let scale = 0.5;
        {
            let (k, v) = (k.clone(), v.clone());
            check_unary(q.clone(), move |t, x| {
                let (kv, vv) = (t.constant(k.clone()), t.constant(v.clone()));
                t.attention(x, kv, vv, 2, scale).unwrap()
            });
        }
        {
            let (q, v) = (q.clone(), v.clone());
            check_unary(k.clone(), move |t, x| {
                let (qv, vv) = (t.constant(q.clone()), t.constant(v.clone()));
                t.attention(qv, x, vv, 2, scale).unwrap()
            });
        }
        check_unary(v, move |t, x| {
            let (qv, kv) = (t.constant(q.clone()), t.constant(k.clone()));
            t.attention(qv, kv, x, 2, scale).unwrap()
        });
    }

    #[test]
    fn rope_gradient() {
        use crate::positional::{Position3D, RotaryConfig};
        let cfg = RotaryConfig::with_default_base(6).unwrap();
        let ps = vec![
            Position3D::new(0.5, 1.0, 2.0),
            Position3D::new(3.0, -0.5, 0.25),
            Position3D::new(9.0, 2.0, 1.0),
        ];
        let table = Rc::new(RotaryTable::new(&ps, cfg).unwrap());
        check_unary(rand_tensor(&[3, 12], 15), move |t, x| t.rope(x, table.clone()).unwrap());
    }

    #[test]
    fn mse_gradient_and_value() {
        let target = rand_tensor(&[2, 3], 16);
        check_unary(rand_tensor(&[2, 3], 17), move |t, x| {
            let y = t.constant(target.clone());
            t.mse(x, y).unwrap()
        });
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 2], 3.0));
        let b = tape.constant(Tensor::full(&[2, 2], 1.0));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_surface() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(tape.attention(a, b, b, 1, 1.0), Err(Error::Dimension(_))));
    }
}
