//! Loss, optimizer, training loop and evaluation.

mod loss;
mod optim;
mod trainer;

pub use loss::{seg_loss, seg_loss_frozen, smoothing_targets, LossConfig};
pub use optim::{adam_step, OptimizerState, ADAM_EPS, BETA1, BETA2};
pub use trainer::{evaluate, evaluate_params, predict_dataset, EpochRecord, TrainConfig, Trainer};
