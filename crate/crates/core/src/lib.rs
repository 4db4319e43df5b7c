//! Segment-wise long-video generation with compressed history.
//!
//! A compression autoencoder squeezes each past (video, text) segment into a
//! handful of context tokens placed at interpolated 3D rotary positions. A
//! diffusion transformer trained with flow matching attends to those tokens
//! while generating the next segment. Everything runs on a small built-in
//! `f64` autodiff engine.

pub mod compression;
pub mod costmodel;
pub mod dit;
pub mod error;
pub mod flexformer;
pub mod numerics;
pub mod pipeline;
pub mod positional;

pub use error::{Error, Result};
