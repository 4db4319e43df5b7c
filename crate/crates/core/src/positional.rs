//! Rotary position embeddings: 1D RoPE, the per-axis 3D variant, and the
//! position conventions used for video, text and query tokens.
//!
//! Pairs are rotated interleaved: `(x[2i], x[2i+1])` turns by `theta_i(p)`.
//! In the 3D variant the vector is split into three equal subvectors
//! `x_t ++ x_h ++ x_w`, each rotated by its own axis coordinate.

use std::ops::Deref;

use crate::error::{Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// A real-valued `(t, h, w)` token position. Fractional values are allowed,
/// interpolated query tokens sit between lattice points.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Position3D {
    pub t: f64,
    pub h: f64,
    pub w: f64,
}

impl Position3D {
    pub const ORIGIN: Position3D = Position3D { t: 0.0, h: 0.0, w: 0.0 };

    pub fn new(t: f64, h: f64, w: f64) -> Self {
        Self { t, h, w }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.h.is_finite() && self.w.is_finite()
    }

    pub fn shifted_t(self, dt: f64) -> Self {
        Self { t: self.t + dt, ..self }
    }

    fn axis(&self, a: usize) -> f64 {
        match a {
            0 => self.t,
            1 => self.h,
            _ => self.w,
        }
    }
}

/// One position per token of a sequence, in sequence order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PositionLayout(Vec<Position3D>);

impl PositionLayout {
    pub fn new(positions: Vec<Position3D>) -> Self {
        Self(positions)
    }

    pub fn push(&mut self, p: Position3D) {
        self.0.push(p);
    }

    pub fn extend(&mut self, ps: impl IntoIterator<Item = Position3D>) {
        self.0.extend(ps);
    }

    pub fn concat(parts: &[&PositionLayout]) -> Self {
        Self(parts.iter().flat_map(|p| p.0.iter().copied()).collect())
    }

    pub fn into_inner(self) -> Vec<Position3D> {
        self.0
    }

    /// Largest temporal coordinate, or `None` for an empty layout.
    pub fn max_t(&self) -> Option<f64> {
        self.0.iter().map(|p| p.t).reduce(f64::max)
    }
}

impl Deref for PositionLayout {
    type Target = [Position3D];
    fn deref(&self) -> &[Position3D] {
        &self.0
    }
}

impl FromIterator<Position3D> for PositionLayout {
    fn from_iter<I: IntoIterator<Item = Position3D>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Width and frequency base of a 3D rotary embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotaryConfig {
    dim: usize,
    base: f64,
}

impl RotaryConfig {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 6 != 0 {
            return Err(Error::Config(format!(
                "rotary width {dim} must be a positive multiple of 6"
            )));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::Config(format!("rotary base {base} must exceed 1")));
        }
        Ok(Self { dim, base })
    }

    pub fn with_default_base(dim: usize) -> Result<Self> {
        Self::new(dim, DEFAULT_ROPE_BASE)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Width of each per-axis subvector.
    pub fn axis_dim(&self) -> usize {
        self.dim / 3
    }
}

/// `angle_i = p / base^(2i / d_axis)` for `i in 0..d_axis/2`.
pub fn rope_angles(p: f64, d_axis: usize, base: f64) -> Result<Vec<f64>> {
    if d_axis == 0 || d_axis % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary axis width {d_axis} must be even and positive"
        )));
    }
    Ok((0..d_axis / 2)
        .map(|i| p / base.powf(2.0 * i as f64 / d_axis as f64))
        .collect())
}

/// Rotates each interleaved pair of `x` by its angle at position `p`.
pub fn apply_rope_1d(x: &[f64], p: f64, base: f64) -> Result<Vec<f64>> {
    let angles = rope_angles(p, x.len(), base)?;
    let mut out = x.to_vec();
    for (i, theta) in angles.into_iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = a * c - b * s;
        out[2 * i + 1] = a * s + b * c;
    }
    Ok(out)
}

/// Rotates the temporal, height and width subvectors by their own coordinates.
pub fn apply_rope_3d(x: &[f64], pos: Position3D, cfg: &RotaryConfig) -> Result<Vec<f64>> {
    if x.len() != cfg.dim() {
        return Err(Error::Config(format!(
            "vector width {} does not match rotary width {}",
            x.len(),
            cfg.dim()
        )));
    }
    let da = cfg.axis_dim();
    let mut out = Vec::with_capacity(x.len());
    for axis in 0..3 {
        out.extend(apply_rope_1d(&x[axis * da..(axis + 1) * da], pos.axis(axis), cfg.base())?);
    }
    Ok(out)
}

/// Text token `j` of a sequence following a `(T, H, W)` video sits at
/// `(T + j, 0, 0)`: a single-pixel frame after the video block.
pub fn text_positions(n_text: usize, video_extent: (usize, usize, usize)) -> Vec<Position3D> {
    let t0 = video_extent.0 as f64;
    (0..n_text)
        .map(|j| Position3D::new(t0 + j as f64, 0.0, 0.0))
        .collect()
}

/// Integer lattice positions of a `(T, H, W)` video grid in `t, h, w` order,
/// with the temporal axis shifted by `t_offset`.
pub fn grid_positions(grid: (usize, usize, usize), t_offset: f64) -> Vec<Position3D> {
    let (t, h, w) = grid;
    let mut out = Vec::with_capacity(t * h * w);
    for f in 0..t {
        for a in 0..h {
            for b in 0..w {
                out.push(Position3D::new(f as f64 + t_offset, a as f64, b as f64));
            }
        }
    }
    out
}

/// Precomputed per-token cosines and sines for rotating multi-head rows.
///
/// Every head of a token shares the token's position, so the table stores
/// `head_dim / 2` angles per token and is applied to each head slice.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    cfg: RotaryConfig,
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(positions: &[Position3D], cfg: RotaryConfig) -> Result<Self> {
        let half = cfg.dim() / 2;
        let per_axis = half / 3;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        let axis_freqs = rope_angles(1.0, cfg.axis_dim(), cfg.base())?;
        for p in positions {
            if !p.is_finite() {
                return Err(Error::Layout(format!("non-finite position {p:?}")));
            }
            for j in 0..half {
                let theta = p.axis(j / per_axis) * axis_freqs[j % per_axis];
                let (s, c) = theta.sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(Self { cfg, n: positions.len(), cos, sin })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn head_dim(&self) -> usize {
        self.cfg.dim()
    }

    /// Rotates rows of `x` (`[n x heads*head_dim]`) in place; `inverse`
    /// applies the transpose rotation, which is the backward map.
    pub(crate) fn rotate_rows(&self, x: &mut [f64], width: usize, inverse: bool) {
        let hd = self.cfg.dim();
        let half = hd / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for r in 0..self.n {
            let cs = &self.cos[r * half..(r + 1) * half];
            let sn = &self.sin[r * half..(r + 1) * half];
            let row = &mut x[r * width..(r + 1) * width];
            for head in row.chunks_exact_mut(hd) {
                for j in 0..half {
                    let (a, b) = (head[2 * j], head[2 * j + 1]);
                    let s = sign * sn[j];
                    head[2 * j] = a * cs[j] - b * s;
                    head[2 * j + 1] = a * s + b * cs[j];
                }
            }
        }
    }
}
