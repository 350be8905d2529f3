//! Model-agnostic meta-learning for binary classification.
//!
//! [`mlp`] holds the base network and its exact derivatives, [`episode`]
//! draws support/query tasks, [`meta`] runs the inner adaptation and the
//! Adam-driven outer loop, and [`checkpoint`] persists trained parameters.

pub mod adam;
pub mod checkpoint;
pub mod episode;
pub mod meta;
pub mod mlp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use episode::{sample_task, Episode};
pub use meta::{inner_adapt, meta_evaluate, meta_gradient, meta_step, meta_train, MetaTrainer, TrainLog, TrainLogEntry};
pub use mlp::{backward, bce_loss, forward, init_params, DropoutMask, MlpArchitecture, ModelParams};

#[derive(Debug, Error)]
pub enum MamlError {
    #[error("dimension mismatch: model expects {expected} input features, data has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("task pool has {available} rows, a task needs {needed}")]
    PoolTooSmall { available: usize, needed: usize },
    #[error("task pool contains a single class")]
    SingleClassPool,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MamlError>;

/// Meta-learning hyperparameters. `alpha` is the inner-loop rate, `beta`
/// the outer-loop (Adam) rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MamlConfig {
    pub alpha: f64,
    pub beta: f64,
    pub outer_iterations: usize,
    pub tasks_per_meta_batch: usize,
    pub samples_per_task: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub inner_steps: usize,
    pub first_order: bool,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    /// Episodes drawn from the test pool by [`meta_evaluate`].
    pub eval_episodes: usize,
    /// Whether dropout is active while adapting on a support set at
    /// evaluation time. Query prediction never uses dropout.
    pub dropout_in_adaptation: bool,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-3,
            outer_iterations: 1000,
            tasks_per_meta_batch: 4,
            samples_per_task: 100,
            support_size: 50,
            query_size: 50,
            inner_steps: 1,
            first_order: true,
            seed: 0,
            hidden_dims: vec![64, 32, 16],
            dropout_rate: 0.2,
            eval_episodes: 20,
            dropout_in_adaptation: true,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MamlError::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha = {} must be finite and >= 0", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta = {} must be finite and >= 0", self.beta));
        }
        if self.tasks_per_meta_batch == 0 || self.inner_steps == 0 || self.eval_episodes == 0 {
            return fail("tasks_per_meta_batch, inner_steps and eval_episodes must be >= 1".into());
        }
        if self.support_size == 0 || self.query_size == 0 {
            return fail("support and query sets must be non-empty".into());
        }
        if self.support_size + self.query_size > self.samples_per_task {
            return fail(format!(
                "support ({}) + query ({}) exceeds samples per task ({})",
                self.support_size, self.query_size, self.samples_per_task
            ));
        }
        MlpArchitecture { input_dim: 1, hidden_dims: self.hidden_dims.clone(), dropout_rate: self.dropout_rate }
            .validate()
    }

    pub fn architecture(&self, input_dim: usize) -> Result<MlpArchitecture> {
        MlpArchitecture::new(input_dim, self.hidden_dims.clone(), self.dropout_rate)
    }
}
