//! Request and response bodies.

use batchal_core::session::{Architecture, TrainSettings};
use batchal_core::{ExperimentConfig, RoundRecord, Strategy, Triplet};
use serde::{Deserialize, Serialize};

/// Body of `POST /sessions`: the per-session subset of an experiment config
/// plus the name of a registered dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionSpec {
    pub dataset: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub passes: usize,
    pub dropout: f64,
    pub jitter: f64,
    pub min_norm: f64,
    pub candidate_cap: Option<usize>,
    pub init_pool: usize,
    pub train_fraction: f64,
    pub noise: f64,
    pub model: Architecture,
    pub train: TrainSettings,
}

impl Default for SessionSpec {
    fn default() -> Self {
        let base = ExperimentConfig::default();
        Self {
            dataset: String::new(),
            seed: 0,
            strategy: Strategy::JointEntropy,
            batch_size: base.batch_size,
            passes: base.passes,
            dropout: base.dropout,
            jitter: base.jitter,
            min_norm: base.min_norm,
            candidate_cap: base.candidate_cap,
            init_pool: base.init_pool,
            train_fraction: base.train_fraction,
            noise: base.noise,
            model: base.model,
            train: base.train,
        }
    }
}

impl SessionSpec {
    /// The equivalent single-strategy, single-seed experiment config.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            strategies: vec![self.strategy],
            seeds: vec![self.seed],
            batch_size: self.batch_size,
            passes: self.passes,
            dropout: self.dropout,
            jitter: self.jitter,
            min_norm: self.min_norm,
            candidate_cap: self.candidate_cap,
            init_pool: self.init_pool,
            train_fraction: self.train_fraction,
            noise: self.noise,
            model: self.model.clone(),
            train: self.train.clone(),
            ..ExperimentConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Idle,
    AwaitingAnnotations,
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub session_id: String,
    pub config: SessionSpec,
    /// Completed rounds.
    pub round: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectView {
    pub id: usize,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

/// One question: is `j` or `k` closer to `i`?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub triplet_id: usize,
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub objects: [ObjectView; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub session_id: String,
    /// The round these answers complete.
    pub round: usize,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Closer {
    J,
    K,
}

impl Closer {
    /// The ordered triplet this answer asserts for the served `(i, j, k)`.
    pub fn order(self, served: Triplet) -> Triplet {
        match self {
            Closer::J => served,
            Closer::K => served.swapped(),
        }
    }

    /// The answer that encodes `ordered` for the served query.
    pub fn of(served: Triplet, ordered: Triplet) -> Closer {
        if ordered.j == served.j {
            Closer::J
        } else {
            Closer::K
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Answer {
    pub triplet_id: usize,
    pub closer: Closer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSubmission {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub round: usize,
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionResponse {
    pub accepted: usize,
    pub remaining: usize,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub session_id: String,
    pub status: Status,
    pub round: usize,
    pub records: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub code: String,
}
