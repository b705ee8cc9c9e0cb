//! Reference model, spectral self-supervision, gradients and pre-training.

mod loss;
mod model;
mod spectrum;
mod train;

pub use loss::{unsup_loss, unsup_loss_with, LossBreakdown, LossWeights, SPARSITY_HALF_WIDTH_HZ};
pub use model::{forward, forward_signal, ModelArch, ModelParams, PredictedOutput};
pub use spectrum::{estimate_hr, FrequencyBand, Periodogram, MIN_POWER, PAD_FACTOR};
pub use train::{
    batch_objective, grad, local_update, pretrain, supervised_eval, supervised_loss, supervised_objective,
    BatchObjective, EpochRecord, PretrainConfig, PretrainOutcome,
};
