//! File layout of a training lineage: checkpoints and logs in one directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::train::{loss_log_csv, train_dit, train_flexformer, ModelConfig, TrainConfig};
use crate::dit::Dit;
use crate::error::{Error, Result};
use crate::flexformer::FlexFormer;
use crate::numerics::checkpoint::{encode, load_params, save_params, write_atomic};
use crate::numerics::Tensor;

pub const FLEX_CHECKPOINT: &str = "flex.ckpt";
pub const DIT_CHECKPOINT: &str = "dit.ckpt";
pub const DIT_STAGE3_CHECKPOINT: &str = "dit_stage3.ckpt";

pub fn loss_log_name(stage: u8) -> String {
    format!("loss_stage{stage}.csv")
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Prerequisite(format!("{what} checkpoint {} not found", path.display())));
    }
    Ok(())
}

pub fn load_flex(model: &ModelConfig, path: &Path) -> Result<FlexFormer> {
    require(path, "stage-1 autoencoder")?;
    let mut ff = model.build_flex(0)?;
    ff.params_mut().load_from(&load_params(path)?)?;
    Ok(ff)
}

pub fn load_dit(model: &ModelConfig, path: &Path) -> Result<Dit> {
    require(path, "diffusion model")?;
    let mut dit = model.build_dit(0)?;
    dit.params_mut().load_from(&load_params(path)?)?;
    Ok(dit)
}

/// Writes UTF-8 text atomically.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Saves named token grids in the checkpoint layout.
pub fn save_tokens(path: &Path, grids: &[(String, &Tensor)]) -> Result<()> {
    write_atomic(path, &encode(grids.iter().map(|(n, t)| (n.as_str(), *t))))
}

/// Runs one stage inside `dir` and returns the files it wrote.
///
/// Stage 1 writes the autoencoder checkpoint; stage 2 needs it and writes
/// the diffusion checkpoint; stage 3 needs both and writes a separate
/// stage-3 diffusion checkpoint.
pub fn run_training(cfg: &TrainConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let flex_path = dir.join(FLEX_CHECKPOINT);
    let dit_path = dir.join(DIT_CHECKPOINT);
    match cfg.stage {
        2 => require(&flex_path, "stage-1 autoencoder")?,
        3 => {
            require(&flex_path, "stage-1 autoencoder")?;
            require(&dit_path, "stage-2 diffusion")?;
        }
        _ => {}
    }
    fs::create_dir_all(dir)?;
    let log_path = dir.join(loss_log_name(cfg.stage));
    let (ckpt, log) = match cfg.stage {
        1 => {
            let mut ff = cfg.model.build_flex(cfg.seed)?;
            let log = train_flexformer(cfg, &mut ff)?;
            save_params(&flex_path, ff.params().iter())?;
            (flex_path, log)
        }
        stage => {
            let ff = load_flex(&cfg.model, &flex_path)?;
            let mut dit = if stage == 2 {
                cfg.model.build_dit(cfg.seed.wrapping_add(1))?
            } else {
                load_dit(&cfg.model, &dit_path)?
            };
            let log = train_dit(cfg, &ff, &mut dit)?;
            let out = if stage == 2 { dit_path } else { dir.join(DIT_STAGE3_CHECKPOINT) };
            save_params(&out, dit.params().iter())?;
            (out, log)
        }
    };
    write_text(&log_path, &loss_log_csv(&log))?;
    Ok(vec![ckpt, log_path])
}
