//! Conditional diffusion generator for daily load residuals.
//!
//! The denoiser predicts the clean normalised residual from a noised one,
//! conditioned on the policy vector, the day context and the step number.
//! Sampling runs the reverse chain deterministically from a given initial
//! noise vector, so a scenario is a differentiable function of the policy.

mod model;
mod norm;
mod sample;
mod schedule;
mod train;

pub use model::{
    weights_digest, DenoiserForm, GeneratorModel, ReverseForm, MODEL_FORMAT, MODEL_VERSION,
};
pub use norm::{residual, NormStats};
pub use sample::{sample, sample_with_grad, Jacobian};
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule, ScheduleSpec};
pub use train::{
    minibatch_loss_and_grad, train, train_observed, Minibatch, Optimizer, TrainConfig, TrainReport,
};

use crate::autodiff::AutodiffError;
use crate::simkit::{SimError, HOURS, POLICY_DIM};

/// Denoiser input width: noisy residual, policy, temperatures, base loads,
/// step fraction.
pub const INPUT_DIM: usize = HOURS + POLICY_DIM + 2 * HOURS + 1;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became {loss} at epoch {epoch}, batch {batch}; lower the learning rate")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("model has no normalisation statistics; train it first")]
    Untrained,
    #[error("model layout: {0}")]
    Layout(String),
    #[error("unsupported model file version {0}")]
    Version(u32),
    #[error("weight checksum mismatch: file says {stored}, weights hash to {computed}")]
    Checksum { stored: String, computed: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}
