//! Attention cost of one denoising step: full history in one window versus
//! current tokens attending to compressed history.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compression::{plan_queries, CompressionStrategy, Grid, Orientation};
use crate::dit::{Dit, DitConfig, TaskLayout};
use crate::error::{Error, Result};
use crate::flexformer::{ContextBundle, ContextChunk};
use crate::numerics::Tensor;

/// Analytic (and optionally measured) cost for `n_frames` of history plus
/// the current segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CostPoint {
    pub n_frames: usize,
    pub seq_vanilla: usize,
    pub seq_compressed: usize,
    pub flops_vanilla: u128,
    pub flops_compressed: u128,
    pub mem_vanilla: u128,
    pub mem_compressed: u128,
    pub time_vanilla_ms: Option<f64>,
    pub time_compressed_ms: Option<f64>,
}

pub const CSV_HEADER: &str = "n_frames,seq_vanilla,seq_compressed,flops_vanilla,flops_compressed,mem_vanilla,mem_compressed,time_vanilla_ms,time_compressed_ms";

/// `(flops, bytes)` of `blocks` attention layers over `l` tokens of width `d`:
/// flops `B*(4*L*d^2 + 2*L^2*d)`, bytes `B*2*L*d*8` for 64-bit keys and values.
pub fn attention_cost(l: usize, d: usize, blocks: usize) -> (u128, u128) {
    let (l, d, b) = (l as u128, d as u128, blocks as u128);
    (b * (4 * l * d * d + 2 * l * l * d), b * 2 * l * d * 8)
}

/// Grid used for a segment of `tokens` tokens: `(tokens/16, 4, 4)` when
/// divisible, otherwise `(tokens, 1, 1)`.
pub fn segment_grid_for_tokens(tokens: usize) -> Grid {
    if tokens % 16 == 0 && tokens > 0 {
        Grid::new(tokens / 16, 4, 4)
    } else {
        Grid::new(tokens.max(1), 1, 1)
    }
}

/// Costs for `n = 1..=max_segments`: vanilla attends over `n*S` tokens,
/// compressed over `S + sum_{i<n} N_i`.
pub fn scaling_table(
    segment: Grid,
    strategy: &CompressionStrategy,
    max_segments: usize,
    d: usize,
    blocks: usize,
) -> Vec<CostPoint> {
    let s = segment.tokens();
    let per_segment = plan_queries(segment, strategy, Orientation::PastContext).n_queries;
    (1..=max_segments)
        .map(|n| {
            let seq_vanilla = n * s;
            let seq_compressed = s + (n - 1) * per_segment;
            let (fv, mv) = attention_cost(seq_vanilla, d, blocks);
            let (fc, mc) = attention_cost(seq_compressed, d, blocks);
            CostPoint {
                n_frames: n * segment.t,
                seq_vanilla,
                seq_compressed,
                flops_vanilla: fv,
                flops_compressed: fc,
                mem_vanilla: mv,
                mem_compressed: mc,
                time_vanilla_ms: None,
                time_compressed_ms: None,
            }
        })
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

/// Fills measured times: the median over `repetitions` of one velocity
/// evaluation with random weights, for each point of `points` (the output of
/// [`scaling_table`] for the same `segment` and `strategy`).
pub fn microbench(
    cfg: DitConfig,
    segment: Grid,
    strategy: &CompressionStrategy,
    points: &mut [CostPoint],
    repetitions: usize,
    seed: u64,
) -> Result<()> {
    if repetitions == 0 {
        return Err(Error::Config("microbench needs at least one repetition".into()));
    }
    let dit = Dit::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan_queries(segment, strategy, Orientation::PastContext);
    for p in points.iter_mut() {
        let n = p.seq_vanilla / segment.tokens();
        let long = Grid::new(n * segment.t, segment.h, segment.w);
        let z_long = Tensor::randn(&[long.tokens(), cfg.token_dim], 1.0, &mut rng);
        let long_layout = TaskLayout::prediction(0, long.t)?;
        let empty = ContextBundle::default();
        p.time_vanilla_ms = Some(time_ms(repetitions, || {
            dit.predict_velocity(&z_long, 0.5, None, &empty, &long_layout, long).map(|_| ())
        })?);

        let chunks = (1..n)
            .map(|_| ContextChunk {
                tokens: Tensor::randn(&[plan.n_queries, cfg.context_dim], 1.0, &mut rng),
                plan: plan.clone(),
                source_grid: segment,
                source_text: 0,
            })
            .collect();
        let bundle = ContextBundle { chunks };
        let layout = TaskLayout::prediction(n - 1, segment.t)?;
        let z = Tensor::randn(&[segment.tokens(), cfg.token_dim], 1.0, &mut rng);
        p.time_compressed_ms = Some(time_ms(repetitions, || {
            dit.predict_velocity(&z, 0.5, None, &bundle, &layout, segment).map(|_| ())
        })?);
    }
    Ok(())
}

/// CSV with [`CSV_HEADER`]; unmeasured times are empty cells.
pub fn to_csv(points: &[CostPoint]) -> String {
    let opt = |t: Option<f64>| t.map(|v| format!("{v:.4}")).unwrap_or_default();
    let mut s = format!("{CSV_HEADER}\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.n_frames,
            p.seq_vanilla,
            p.seq_compressed,
            p.flops_vanilla,
            p.flops_compressed,
            p.mem_vanilla,
            p.mem_compressed,
            opt(p.time_vanilla_ms),
            opt(p.time_compressed_ms)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent count: per block, Q/K/V/O projections are four
    /// `[L x d] x [d x d]` products; scores `Q K^T` and `P V` are two
    /// `[L x d] x [d x L]`-shaped products.
    fn oracle_flops(l: u128, d: u128, b: u128) -> u128 {
        let projection = l * d * d;
        let scores = l * l * d;
        let mix = l * l * d;
        b * (projection * 4 + scores + mix)
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(attention_cost(1, 48, 4).0, 4 * (4 * 48 * 48 + 2 * 48));
        assert_eq!(attention_cost(64, 48, 4).0, oracle_flops(64, 48, 4));
        assert_eq!(attention_cost(64, 48, 4).1, 4 * 2 * 64 * 48 * 8);
    }

    #[test]
    fn plan_arithmetic_example() {
        let t = scaling_table(segment_grid_for_tokens(128), &CompressionStrategy::uniform(8.0).unwrap(), 3, 48, 4);
        assert_eq!(t[2].seq_compressed, 160);
        assert_eq!(t[2].seq_vanilla, 384);
        assert_eq!(t[0].seq_vanilla, t[0].seq_compressed);
        assert_eq!(t[0].flops_vanilla, t[0].flops_compressed);
    }

    #[test]
    fn segment_grids() {
        assert_eq!(segment_grid_for_tokens(128), Grid::new(8, 4, 4));
        assert_eq!(segment_grid_for_tokens(10), Grid::new(10, 1, 1));
    }

    #[test]
    fn csv_layout() {
        let t = scaling_table(Grid::new(2, 2, 2), &CompressionStrategy::uniform(2.0).unwrap(), 2, 6, 1);
        let csv = to_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",,"));
    }

    #[test]
    fn microbench_fills_every_row() {
        let seg = Grid::new(2, 2, 2);
        let strat = CompressionStrategy::uniform(2.0).unwrap();
        let mut t = scaling_table(seg, &strat, 3, 12, 1);
        let mut cfg = DitConfig::new(4, 12, 2, 1, 12);
        cfg.time_features = 4;
        microbench(cfg, seg, &strat, &mut t, 1, 0).unwrap();
        assert!(t.iter().all(|p| p.time_vanilla_ms.is_some() && p.time_compressed_ms.is_some()));
        assert!(microbench(cfg, seg, &strat, &mut t, 0, 0).is_err());
    }

    #[test]
    fn median_of_samples() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
    }

    proptest! {
        #[test]
        fn flops_match_oracle_and_are_superlinear(l in 1usize..500, d in 1usize..128, b in 1usize..8) {
            let (f, _) = attention_cost(l, d, b);
            prop_assert_eq!(f, oracle_flops(l as u128, d as u128, b as u128));
            prop_assert!(attention_cost(2 * l, d, b).0 > 2 * f);
        }

        #[test]
        fn compressed_dominates_and_advantage_grows(
            t in 1usize..6, hw in 1usize..5, ratio in 1.5f64..16.0, linear in any::<bool>(),
            d in 6usize..96, b in 1usize..6,
        ) {
            let seg = Grid::new(t, hw, hw);
            let strat = if linear {
                CompressionStrategy::linear(ratio, 1.0).unwrap()
            } else {
                CompressionStrategy::uniform(ratio).unwrap()
            };
            let n_q = plan_queries(seg, &strat, Orientation::PastContext).n_queries;
            prop_assume!(n_q < seg.tokens());
            let table = scaling_table(seg, &strat, 8, d, b);
            for p in &table[1..] {
                prop_assert!(p.flops_compressed < p.flops_vanilla);
                prop_assert!(p.mem_compressed < p.mem_vanilla);
            }
            let ratios: Vec<f64> = table.iter().map(|p| p.flops_vanilla as f64 / p.flops_compressed as f64).collect();
            for w in ratios[1..].windows(2) {
                prop_assert!(w[1] > w[0]);
            }
        }
    }
}
