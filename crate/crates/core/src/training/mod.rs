//! Drafter training: the group-wise objectives, their gradients, a
//! finite-difference checker, and the training loop.

mod loss;
mod objective;
mod optim;
mod train;

pub use loss::{eagle_loss, medusa_loss, medusa_parallel_loss, smooth_l1, LossWeights, DEFAULT_DECAY};
pub use objective::{backward, batch_loss, frozen_ranges, gradient_check, Example, GradCheck, Gradients, LossSum, Objective};
pub use optim::AdamW;
pub use train::{
    continue_training, new_drafter, parse_corpus, read_corpus, sample_corpus, train_drafter, write_corpus, DistillMode,
    StepLog, TrainConfig, TrainLog,
};
