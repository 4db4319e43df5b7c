//! Query-token planning: how many compressed tokens a segment gets and where
//! each one sits in `(t, h, w)` space.
//!
//! A strategy maps the normalized temporal distance `delta` of a frame from
//! the generated segment (0 = adjacent, 1 = farthest) to a local compression
//! ratio. Each frame receives `H*W / ratio(delta)` queries, rounded by largest
//! remainder so the total is exact, laid out on a centered sub-grid of the
//! frame.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::positional::Position3D;

/// A `(T, H, W)` token grid extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn frame_tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.t, self.h, self.w)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

impl FromStr for Grid {
    type Err = Error;

    /// Parses `TxHxW`.
    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("grid {s:?} is not TxHxW")))?;
        match dims.as_slice() {
            &[t, h, w] if t > 0 && h > 0 && w > 0 => Ok(Self::new(t, h, w)),
            _ => Err(Error::Config(format!("grid {s:?} needs three positive extents"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Uniform,
    Linear,
    Log,
}

/// Rule mapping temporal distance to a local compression ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionStrategy {
    kind: StrategyKind,
    r_far: f64,
    r_near: f64,
}

impl CompressionStrategy {
    pub fn new(kind: StrategyKind, r_far: f64, r_near: f64) -> Result<Self> {
        if !(r_near >= 1.0) || !(r_far >= r_near) || !r_far.is_finite() {
            return Err(Error::Config(format!(
                "ratios must satisfy r_far >= r_near >= 1, got {r_far} and {r_near}"
            )));
        }
        if kind == StrategyKind::Uniform && r_far != r_near {
            return Err(Error::Config("uniform strategy needs r_far == r_near".into()));
        }
        Ok(Self { kind, r_far, r_near })
    }

    pub fn uniform(ratio: f64) -> Result<Self> {
        Self::new(StrategyKind::Uniform, ratio, ratio)
    }

    pub fn linear(r_far: f64, r_near: f64) -> Result<Self> {
        Self::new(StrategyKind::Linear, r_far, r_near)
    }

    pub fn log(r_far: f64, r_near: f64) -> Result<Self> {
        Self::new(StrategyKind::Log, r_far, r_near)
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn r_far(&self) -> f64 {
        self.r_far
    }

    pub fn r_near(&self) -> f64 {
        self.r_near
    }

    /// Local ratio at normalized distance `delta` in `[0, 1]`.
    pub fn ratio_at(&self, delta: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::Domain(format!("distance {delta} outside [0, 1]")));
        }
        Ok(match self.kind {
            StrategyKind::Uniform => self.r_far,
            StrategyKind::Linear => self.r_near + (self.r_far - self.r_near) * delta,
            StrategyKind::Log => self.r_near * (self.r_far / self.r_near).powf(delta),
        })
    }

    /// Overall ratio in the limit of infinitely many frames:
    /// the harmonic mean of `ratio_at` over `delta`.
    pub fn continuous_ratio(&self) -> f64 {
        let rho = self.r_far / self.r_near;
        if rho == 1.0 {
            return self.r_far;
        }
        match self.kind {
            StrategyKind::Uniform => self.r_far,
            StrategyKind::Linear => (self.r_far - self.r_near) / rho.ln(),
            StrategyKind::Log => self.r_near * rho.ln() / (1.0 - 1.0 / rho),
        }
    }
}

impl fmt::Display for CompressionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            StrategyKind::Uniform => write!(f, "uniform:{}", self.r_far),
            StrategyKind::Linear => write!(f, "linear:{}:{}", self.r_far, self.r_near),
            StrategyKind::Log => write!(f, "log:{}:{}", self.r_far, self.r_near),
        }
    }
}

impl FromStr for CompressionStrategy {
    type Err = Error;

    /// Grammar: `kind[:r_far[:r_near]]`, e.g. `uniform:8`, `linear:16:1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad ratio {p:?} in strategy {s:?}")))
        };
        let kind = match parts[0].trim() {
            "uniform" => StrategyKind::Uniform,
            "linear" => StrategyKind::Linear,
            "log" => StrategyKind::Log,
            other => return Err(Error::Config(format!("unknown strategy kind {other:?}"))),
        };
        match (kind, &parts[1..]) {
            (StrategyKind::Uniform, [r]) => Self::uniform(num(r)?),
            (_, [far, near]) => Self::new(kind, num(far)?, num(near)?),
            _ => Err(Error::Config(format!("strategy {s:?} does not match kind[:r_far:r_near]"))),
        }
    }
}

/// Which end of a context segment touches the generated segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Context precedes the generated segment; its last frame is adjacent.
    PastContext,
    /// Context follows the generated segment; its first frame is adjacent.
    FutureContext,
}

impl Orientation {
    /// Normalized distance of frame `f` out of `t` from the generated segment.
    pub fn delta(self, f: usize, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        let steps = match self {
            Orientation::PastContext => t - 1 - f,
            Orientation::FutureContext => f,
        };
        steps as f64 / (t - 1) as f64
    }
}

/// Number and placement of query tokens for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionPlan {
    pub grid: Grid,
    pub n_queries: usize,
    pub positions: Vec<Position3D>,
    pub per_frame_counts: Vec<usize>,
}

impl CompressionPlan {
    /// `T*H*W / N`.
    pub fn overall_ratio(&self) -> f64 {
        self.grid.tokens() as f64 / self.n_queries as f64
    }

    /// One line per query: `index p_t p_h p_w`, using shortest round-trip
    /// float formatting.
    pub fn to_diagnostic_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.positions.iter().enumerate() {
            s.push_str(&format!("{i} {} {} {}\n", p.t, p.h, p.w));
        }
        s
    }

    pub fn parse_diagnostic_text(text: &str) -> Result<Vec<Position3D>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(expect, line)| {
                let fields: Vec<&str> = line.split_whitespace().collect();
                let bad = || Error::Format(format!("malformed plan line {line:?}"));
                if fields.len() != 4 || fields[0].parse::<usize>().ok() != Some(expect) {
                    return Err(bad());
                }
                let v = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
                Ok(Position3D::new(v(1)?, v(2)?, v(3)?))
            })
            .collect()
    }
}

/// Splits `n` queries into an `n_h x n_w` sub-grid whose aspect best matches
/// `h / w`; ties prefer the taller factorization.
pub fn factor_frame(n: usize, h: usize, w: usize) -> (usize, usize) {
    let target = h as f64 / w as f64;
    let mut best = (n, 1);
    let mut best_err = f64::INFINITY;
    for nh in (1..=n).rev() {
        if n % nh != 0 {
            continue;
        }
        let nw = n / nh;
        let err = (nh as f64 / nw as f64 - target).abs();
        if err < best_err {
            best = (nh, nw);
            best_err = err;
        }
    }
    best
}

/// Builds the query plan for a segment grid.
pub fn plan_queries(grid: Grid, strategy: &CompressionStrategy, orientation: Orientation) -> CompressionPlan {
    assert!(grid.t > 0 && grid.h > 0 && grid.w > 0, "grid extents must be positive");
    let hw = grid.frame_tokens() as f64;
    let deltas: Vec<f64> = (0..grid.t).map(|f| orientation.delta(f, grid.t)).collect();
    let raw: Vec<f64> = deltas
        .iter()
        .map(|&d| hw / strategy.ratio_at(d).expect("delta lies in [0, 1]"))
        .collect();

    let total = raw.iter().sum::<f64>().round() as usize;
    let n = total.clamp(1, grid.tokens());
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();

    // Largest remainder, ties toward the nearer frame.
    let mut order: Vec<usize> = (0..grid.t).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.partial_cmp(&ra)
            .expect("finite remainders")
            .then(deltas[a].partial_cmp(&deltas[b]).expect("finite deltas"))
            .then(a.cmp(&b))
    });
    for &f in order.iter().take(n.saturating_sub(assigned)) {
        counts[f] += 1;
    }

    let mut positions = Vec::with_capacity(n);
    for (f, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let (nh, nw) = factor_frame(c, grid.h, grid.w);
        let (sh, sw) = (grid.h as f64 / nh as f64, grid.w as f64 / nw as f64);
        for a in 0..nh {
            for b in 0..nw {
                positions.push(Position3D::new(
                    f as f64,
                    (a as f64 + 0.5) * sh - 0.5,
                    (b as f64 + 0.5) * sw - 0.5,
                ));
            }
        }
    }
    CompressionPlan { grid, n_queries: n, positions, per_frame_counts: counts }
}
