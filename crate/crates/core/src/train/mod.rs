//! Optimization: schedule, optimizer, checkpoints and the pretraining loop.

pub mod checkpoint;
pub mod optim;
pub mod pretrain;
pub mod schedule;

pub use checkpoint::Checkpoint;
pub use optim::{Adam, AdamConfig};
pub use pretrain::{pretrain, run_pretraining, train_step, MaskedModel, TrainConfig};
pub use schedule::{cosine_lr, ScheduleConfig};
