//! End-to-end checks across modules on a tiny model.

use std::fs;

use segvid_core::compression::{plan_queries, CompressionPlan, CompressionStrategy, Grid, Orientation};
use segvid_core::costmodel::{scaling_table, to_csv, CSV_HEADER};
use segvid_core::dit::{assign_positions, Task, TaskLayout};
use segvid_core::numerics::checkpoint::decode;
use segvid_core::pipeline::generate::SampleSettings;
use segvid_core::pipeline::run::{load_dit, load_flex, run_training, save_tokens, DIT_CHECKPOINT, FLEX_CHECKPOINT};
use segvid_core::pipeline::train::heldout_clips;
use segvid_core::pipeline::{context_utility, generate_long, ModelConfig, TrainConfig};

fn tiny() -> TrainConfig {
    TrainConfig {
        steps: 4,
        batch: 2,
        train_clips: 4,
        strategy: CompressionStrategy::uniform(2.0).unwrap(),
        gap: 3,
        model: ModelConfig {
            segment: Grid::new(2, 2, 2),
            flex_d_model: 12,
            flex_heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            dit_d_model: 12,
            dit_heads: 2,
            dit_blocks: 1,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn three_stages_then_generation_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    for stage in 1..=3 {
        let files = run_training(&TrainConfig { stage, ..tiny() }, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.is_file()));
    }
    let cfg = tiny();
    let ff = load_flex(&cfg.model, &dir.path().join(FLEX_CHECKPOINT)).unwrap();
    let dit = load_dit(&cfg.model, &dir.path().join(DIT_CHECKPOINT)).unwrap();
    let settings = SampleSettings { strategy: cfg.strategy, steps: 3, gap: cfg.gap };

    let clips = heldout_clips(&cfg.model, 2).unwrap();
    let prompts: Vec<_> = (0..3).map(|i| clips[i % 2][0].text().unwrap().clone()).collect();
    for task in [Task::Prediction, Task::Multishot] {
        let a = generate_long(&ff, &dit, &settings, &prompts, cfg.model.segment, task, 4).unwrap();
        let b = generate_long(&ff, &dit, &settings, &prompts, cfg.model.segment, task, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.video().unwrap().shape(), &[3 * 8, cfg.model.token_dim]);
        assert_eq!(a.context_tokens[0], 0);
        assert!(a.context_tokens.windows(2).all(|w| w[1] > w[0]));
    }
    assert!(generate_long(&ff, &dit, &settings, &prompts, cfg.model.segment, Task::Retrodiction, 4).is_err());

    let report = context_utility(&ff, &dit, &cfg.model, &settings, 3, &[0, 1]).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert!(report.rows.iter().all(|r| r.psnr_true.is_finite() && r.ssim_true <= 1.0));
    assert_eq!(report.to_csv().lines().count(), 7);
}

#[test]
fn token_grids_round_trip_through_the_checkpoint_format() {
    let dir = tempfile::tempdir().unwrap();
    let clips = heldout_clips(&tiny().model, 1).unwrap();
    let grids: Vec<(String, _)> = clips[0].iter().enumerate().map(|(i, s)| (format!("segment.{i}"), s.video())).collect();
    let path = dir.path().join("clip.tokens");
    save_tokens(&path, &grids).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"LVCK");
    let back = decode(&bytes).unwrap();
    assert_eq!(back.len(), 3);
    for ((name, t), (n, s)) in back.iter().zip(&grids) {
        assert_eq!(name, n);
        assert_eq!(t, *s);
    }
}

#[test]
fn plan_diagnostics_feed_the_layout() {
    let grid = Grid::new(4, 3, 3);
    let strategy: CompressionStrategy = "linear:4:1".parse().unwrap();
    let plan: CompressionPlan = plan_queries(grid, &strategy, Orientation::PastContext);
    let parsed = CompressionPlan::parse_diagnostic_text(&plan.to_diagnostic_text()).unwrap();
    assert_eq!(parsed, plan.positions);

    let model = ModelConfig { segment: grid, flex_d_model: 12, flex_heads: 2, enc_blocks: 1, dec_blocks: 1, ..ModelConfig::default() };
    let ff = model.build_flex(0).unwrap();
    let clips = heldout_clips(&model, 1).unwrap();
    let layout = TaskLayout::prediction(2, grid.t).unwrap();
    let hist: Vec<_> = clips[0][..2].iter().enumerate().map(|(i, s)| (s, layout.orientation(i))).collect();
    let bundle = ff.encode_history(&hist, &strategy).unwrap();
    let assigned = assign_positions(&layout, &bundle, grid, 2).unwrap();
    assert_eq!(assigned.context.len(), 2 * plan.n_queries);
    // Second chunk sits one segment later than the first.
    for (a, b) in assigned.context.iter().take(plan.n_queries).zip(assigned.context.iter().skip(plan.n_queries)) {
        assert_eq!(b.t - a.t, grid.t as f64);
    }
    let max_ctx = assigned.context.iter().map(|p| p.t).fold(f64::MIN, f64::max);
    assert!(assigned.video.iter().all(|p| p.t > max_ctx));
}

#[test]
fn cost_table_csv_shape() {
    let points = scaling_table(Grid::new(8, 4, 4), &CompressionStrategy::uniform(8.0).unwrap(), 5, 48, 4);
    let csv = to_csv(&points);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.split(',').count() == 9 && r.ends_with(",,")));
}
