//! Synthetic data, staged training, long generation, metrics, and the
//! on-disk artifacts tying them together.

pub mod data;
pub mod generate;
pub mod metrics;
pub mod run;
pub mod train;

pub use data::{concat_segments, make_clip, split_clip, Clip, ClipDistribution, ClipSpec};
pub use generate::{context_utility, generate_long, LongVideo, SampleSettings, UtilityReport};
pub use metrics::{freeze_last_frame, psnr, ssim, PSNR_CAP};
pub use train::{
    evaluate_reconstruction, loss_log_csv, smoothed_endpoints, train_dit, train_flexformer, LossRecord,
    ModelConfig, TrainConfig,
};
