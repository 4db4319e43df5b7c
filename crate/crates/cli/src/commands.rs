//! Subcommand bodies. Each writes its artifacts under the resolved output
//! directory, announces them, and ends with a one-line summary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use segvid_core::compression::{plan_queries, Orientation};
use segvid_core::costmodel::{microbench, scaling_table, segment_grid_for_tokens, to_csv};
use segvid_core::dit::{DitConfig, Task, TaskLayout};
use segvid_core::flexformer::Segment;
use segvid_core::numerics::Tensor;
use segvid_core::pipeline::generate::{sample_with_history, PEAK};
use segvid_core::pipeline::run::{
    load_dit, load_flex, loss_log_name, run_training, save_tokens, write_text, DIT_CHECKPOINT, FLEX_CHECKPOINT,
};
use segvid_core::pipeline::train::heldout_clips;
use segvid_core::pipeline::{context_utility, evaluate_reconstruction, generate_long, psnr, smoothed_endpoints};

use crate::config::{parse_grid, parse_strategy, RunConfig};
use crate::{Cli, CliError, Command};

/// Window for the smoothed loss reported after training.
const SUMMARY_WINDOW: usize = 20;

pub fn execute(cli: &Cli, cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(_) => train(cfg, out),
        Command::Generate(a) => generate(cfg, a.task, a.dit.as_deref(), out),
        Command::Eval(a) => eval(cfg, a.dit.as_deref(), out),
        Command::Plan(a) => {
            let orientation = if a.future { Orientation::FutureContext } else { Orientation::PastContext };
            plan(cfg, &a.strategy, &a.grid, orientation, out)
        }
        Command::Bench(_) => bench(cfg, out),
    }
}

fn announce(out: &mut dyn Write, paths: &[PathBuf]) -> Result<(), CliError> {
    for p in paths {
        writeln!(out, "ARTIFACT {}", p.display())?;
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let t = &cfg.train;
    let files = run_training(t, &cfg.out_dir)?;
    announce(out, &files)?;
    let log = fs::read_to_string(cfg.out_dir.join(loss_log_name(t.stage)))?;
    let losses: Vec<f64> = log.lines().skip(1).filter_map(|l| l.rsplit(',').next()?.parse().ok()).collect();
    match smoothed_endpoints(&losses, SUMMARY_WINDOW.min(losses.len().max(1))) {
        Some((first, last)) => writeln!(
            out,
            "train stage {}: {} steps, smoothed loss {first:.6} -> {last:.6}",
            t.stage, t.steps
        )?,
        None => writeln!(out, "train stage {}: 0 steps, initialization saved", t.stage)?,
    }
    Ok(())
}

fn dit_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(DIT_CHECKPOINT))
}

fn generate(cfg: &RunConfig, task: Task, dit: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let model = &cfg.train.model;
    let g = &cfg.generate;
    let ff = load_flex(model, &cfg.out_dir.join(FLEX_CHECKPOINT))?;
    let dit = load_dit(model, &dit_path(cfg, dit))?;
    let settings = cfg.sample_settings(g.sample_steps);
    let grid = model.segment;
    let k = model.segments_per_clip;
    if g.segments == 0 {
        return Err(CliError::Config("need at least one segment".into()));
    }

    // Generated segments paired with their ground truth when one exists.
    let mut pairs: Vec<(Tensor, Option<Tensor>)> = Vec::new();
    match task {
        Task::Prediction => {
            let clips = heldout_clips(model, g.clip + 1)?;
            let clip = &clips[g.clip];
            let prompt = clip[0].text().cloned().unwrap_or_else(|| Tensor::zeros(&[0, model.token_dim]));
            let prompts = vec![prompt; g.segments];
            let long = generate_long(&ff, &dit, &settings, &prompts, grid, task, g.seed)?;
            for (i, s) in long.segments.into_iter().enumerate() {
                pairs.push((s.video().clone(), clip.get(i).map(|c| c.video().clone())));
            }
        }
        Task::Multishot => {
            let clips = heldout_clips(model, g.clip + g.segments)?;
            let shots = &clips[g.clip..];
            let prompts: Vec<Tensor> = shots
                .iter()
                .map(|c| c[0].text().cloned().unwrap_or_else(|| Tensor::zeros(&[0, model.token_dim])))
                .collect();
            let long = generate_long(&ff, &dit, &settings, &prompts, grid, task, g.seed)?;
            for (s, c) in long.segments.into_iter().zip(shots) {
                pairs.push((s.video().clone(), Some(c[0].video().clone())));
            }
        }
        Task::Interpolation | Task::Retrodiction => {
            let clips = heldout_clips(model, g.clip + 1)?;
            let clip = &clips[g.clip];
            let (history, target, layout): (Vec<&Segment>, &Segment, TaskLayout) = if task == Task::Interpolation {
                (vec![&clip[0], &clip[2]], &clip[1], TaskLayout::interpolation(1, 1, grid.t)?)
            } else {
                (clip[1..].iter().collect(), &clip[0], TaskLayout::retrodiction(k - 1, grid.t)?)
            };
            let (z, _) = sample_with_history(&ff, &dit, &history, &layout, target.text(), grid, &settings, g.seed)?;
            pairs.push((z, Some(target.video().clone())));
        }
    }

    ensure_dir(&cfg.out_dir)?;
    let tokens_path = cfg.out_dir.join(format!("generated_{task}.tokens"));
    let named: Vec<(String, &Tensor)> = pairs.iter().enumerate().map(|(i, (z, _))| (format!("segment.{i}"), z)).collect();
    save_tokens(&tokens_path, &named)?;

    let mut csv = String::from("segment,psnr_vs_truth\n");
    let mut scores = Vec::new();
    for (i, (z, truth)) in pairs.iter().enumerate() {
        match truth {
            Some(t) => {
                let p = psnr(z, t, PEAK)?;
                scores.push(p);
                csv.push_str(&format!("{i},{p:.6}\n"));
            }
            None => csv.push_str(&format!("{i},\n")),
        }
    }
    let csv_path = cfg.out_dir.join(format!("generated_{task}.csv"));
    write_text(&csv_path, &csv)?;
    announce(out, &[tokens_path, csv_path])?;
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    writeln!(out, "generate {task}: {} segments, mean psnr vs truth {mean:.3} dB", pairs.len())?;
    Ok(())
}

fn eval(cfg: &RunConfig, dit: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let model = &cfg.train.model;
    let e = &cfg.eval;
    let ff = load_flex(model, &cfg.out_dir.join(FLEX_CHECKPOINT))?;
    let dit = load_dit(model, &dit_path(cfg, dit))?;
    let clips = heldout_clips(model, e.clips)?;
    let recon = evaluate_reconstruction(&ff, &cfg.train.strategy, &clips)?;
    let report = context_utility(&ff, &dit, model, &cfg.sample_settings(e.sample_steps), e.clips, &e.seeds)?;

    ensure_dir(&cfg.out_dir)?;
    let rows_path = cfg.out_dir.join("eval_utility.csv");
    write_text(&rows_path, &report.to_csv())?;
    let (pt, ps, pf) = (report.mean_psnr_true(), report.mean_psnr_shuffled(), report.mean_psnr_freeze());
    let summary = format!(
        "metric,value\nreconstruction_mse,{recon:.8}\npsnr_true,{pt:.6}\npsnr_shuffled,{ps:.6}\npsnr_freeze,{pf:.6}\n"
    );
    let summary_path = cfg.out_dir.join("eval_summary.csv");
    write_text(&summary_path, &summary)?;
    announce(out, &[rows_path, summary_path])?;
    writeln!(
        out,
        "eval: reconstruction mse {recon:.6}, psnr true {pt:.3} / shuffled {ps:.3} / freeze {pf:.3} dB"
    )?;
    Ok(())
}

fn plan(
    cfg: &RunConfig,
    strategy: &str,
    grid: &str,
    orientation: Orientation,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let strategy = parse_strategy(strategy)?;
    let grid = parse_grid(grid)?;
    let plan = plan_queries(grid, &strategy, orientation);
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("plan.txt");
    write_text(&path, &plan.to_diagnostic_text())?;
    announce(out, &[path])?;
    writeln!(
        out,
        "plan {strategy} on {grid}: N={} overall_ratio={:.4}",
        plan.n_queries,
        plan.overall_ratio()
    )?;
    Ok(())
}

fn bench(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let b = &cfg.bench;
    if b.segments == 0 || b.seg_tokens == 0 {
        return Err(CliError::Config("bench needs positive --segments and --seg-tokens".into()));
    }
    let grid = segment_grid_for_tokens(b.seg_tokens);
    let mut points = scaling_table(grid, &b.strategy, b.segments, b.d_model, b.blocks);
    if b.reps > 0 {
        let m = &cfg.train.model;
        let dit = DitConfig::new(m.token_dim, b.d_model, m.dit_heads, b.blocks, b.d_model);
        microbench(dit, grid, &b.strategy, &mut points, b.reps, cfg.train.seed)?;
    }
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("bench.csv");
    write_text(&path, &to_csv(&points))?;
    announce(out, &[path])?;
    let last = points.last().expect("at least one segment");
    writeln!(
        out,
        "bench {} on {grid}: {} rows, flops ratio vanilla/compressed at n={} is {:.3}",
        b.strategy,
        points.len(),
        b.segments,
        last.flops_vanilla as f64 / last.flops_compressed as f64
    )?;
    Ok(())
}
