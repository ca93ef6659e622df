//! Score network, optimizer, training loop and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, RngState};
pub use mlp::{forward_score, ScoreNet};
pub use train::{denoising_loss, loss, train, write_loss_csv, LossOutput, TrainConfig, TrainOutcome, Trainer};
