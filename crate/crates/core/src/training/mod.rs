//! Cross-entropy and self-critical training, checkpoints and logs.

pub mod checkpoint;
mod loss;
pub mod scst;
mod trainer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, Progress};
pub use loss::{token_hits, xe_loss};
pub use scst::{rollouts, scst_coefficients, surrogate_loss, Rollout, Scst, ScstOutcome};
pub use trainer::{
    example_loss, greedy_captions, greedy_cider, prepare_examples, teacher_forced_accuracy, Example, LogRow, Phase,
    TrainConfig, Trainer, LOG_HEADER,
};
