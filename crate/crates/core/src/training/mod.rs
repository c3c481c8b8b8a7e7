//! Deeply supervised class-balanced loss, SGD with momentum, geometric
//! augmentation and the training loop.

mod augment;
mod loss;
mod sgd;
mod trainer;

pub use augment::{augment, AugmentSpec, Crop, Transform};
pub use loss::{class_balance, level_loss, total_loss, ClassBalance, LossConfig};
pub use sgd::{sgd_step, OptimConfig, SgdStep};
pub use trainer::{train, CheckpointPolicy, LossRecord, TrainSetup, Trainer};
