//! Batch active learning of perceptual metrics from triplet comparisons.
//!
//! An MLP embedding is trained on ordered triplets with the exponential
//! triplet loss. Each round, MC-dropout samples of candidate margins give a
//! Gaussian posterior, and batches are picked greedily to maximize its
//! log-determinant.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod posterior;
pub mod rng;
pub mod session;
pub mod strategies;

pub use config::{ConfigError, DatasetSource, DirSource, ExperimentConfig, SyntheticSource};
pub use data::{DataError, Dataset, DissimMatrix, FeatureTable, GroundTruth, SyntheticSpec};
pub use diagnostics::{diagnose_margin, inverse_normal_cdf, DiagnosticsError, MarginDiagnosis, QQData};
pub use experiment::{run_experiment, ExperimentResult, RunRow, SummaryRow};
pub use linalg::{cholesky_logdet, gram_logdet_by_residuals, LinalgError, Matrix};
pub use model::{Activation, AdamState, DropoutPlan, EmbeddingParams, ModelError, TrainConfig, Triplet};
pub use posterior::{Candidate, CenteredMargins, MarginSampleMatrix, PosteriorError};
pub use session::{
    ActiveLearningSession, Architecture, BatchProposal, Oracle, RoundConfig, RoundRecord, SessionConfig, SessionError,
    TrainSettings,
};
pub use strategies::{SelectionConfig, SelectionError, SelectionResult, Strategy};
