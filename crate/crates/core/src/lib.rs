//! Chunk-wise gradient-boosting feature selection (CFSGB) followed by a
//! model-agnostic meta-learning (MAML) binary classifier, with the metric
//! suite used to score it.
//!
//! The pipeline is:
//!
//! 1. [`dataset`]: load or synthesize a labelled feature matrix, split it, scale it.
//! 2. [`cfsgb`]: split the rows into overlapping chunks, train a [`gbdt`] model
//!    per chunk, keep features whose gain importance clears a threshold in any
//!    chunk, and project the dataset onto that union.
//! 3. [`maml`]: meta-train an MLP initialisation on episodic support/query tasks.
//! 4. [`metrics`]: confusion-matrix metrics, ROC and AUC on meta-test predictions.

pub mod cfsgb;
pub mod dataset;
pub mod gbdt;
pub mod io;
pub mod maml;
pub mod metrics;
pub mod seed;

pub use cfsgb::{ChunkSpec, SelectedFeatureSet};
pub use dataset::{LabeledDataset, Matrix};
pub use gbdt::{GbdtConfig, GbdtModel};
pub use maml::{MamlConfig, ModelParams};
pub use metrics::MetricsReport;
