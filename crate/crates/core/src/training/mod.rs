//! Training of the covariance head and of the CBM backbone.

mod cbm;
mod interventions;
mod loss;
mod optim;
mod trainer;

pub use cbm::{cbm_loss_and_gradient, train_cbm, CbmTrainConfig};
pub use interventions::{
    draw_masks, intervention_loss_and_gradient, intervention_training_loss, InterventionTrainingConfig, MaskDraw,
};
pub use loss::{
    loss_gradient, scbm_loss, scbm_loss_and_gradient, scbm_loss_with_noise, FrozenRow, LossBreakdown, LossConfig,
    NoiseDraw, TargetPath,
};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState, Schedule};
pub use trainer::{train_pscbm, EpochMetrics, Paradigm, PscbmTrainConfig, TrainOutput, TrainingLog, LOG_HEADER};
