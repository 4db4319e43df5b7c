use std::io;

use thiserror::Error;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is invalid (widths, divisibility, step counts).
    #[error("config error: {0}")]
    Config(String),

    /// Positions or temporal spans are inconsistent.
    #[error("layout error: {0}")]
    Layout(String),

    /// A caller violated a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A scalar argument fell outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A synthetic clip specification cannot be realized.
    #[error("spec error: {0}")]
    Spec(String),

    /// A required input (e.g. an earlier training stage's checkpoint) is missing.
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    /// Training produced a non-finite or exploding loss.
    #[error("divergence at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
