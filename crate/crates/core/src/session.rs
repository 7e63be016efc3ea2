//! The active-learning loop: a session owns a train/test split, the labeled
//! and unlabeled pools, the current model and its optimizer state.
//!
//! A round is split into [`ActiveLearningSession::propose`] (draw candidates,
//! score, select) and [`ActiveLearningSession::commit`] (record answers,
//! warm-start retrain, evaluate) so that answers can come from the simulated
//! [`Oracle`] or from a person over HTTP through the same code path.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split_triplets, DataError, Dataset, DissimMatrix, GroundTruth};
use crate::model::{self, Activation, AdamState, EmbeddingParams, ModelError, TrainConfig, Triplet};
use crate::posterior::{self, Candidate, PosteriorError};
use crate::rng::{self, derive_seed, stream};
use crate::strategies::{self, SelectionConfig, SelectionError, SelectionResult, Strategy};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("initial pool of {requested} exceeds the {available} training triplets")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("batch too large: requested {requested} of {available} candidates")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("ground truth ties for triplet {0:?}")]
    TieUndefined(Triplet),
    #[error("triplet {0:?} is not in the ground-truth list")]
    UnknownTriplet(Triplet),
    #[error("flip rate {0} outside [0, 1]")]
    InvalidFlipRate(f64),
    #[error("train fraction {0} outside (0, 1)")]
    InvalidTrainFraction(f64),
    #[error("answer {index} does not match the proposed query: {reason}")]
    AnswerMismatch { index: usize, reason: String },
    #[error("proposal is for round {proposal}, session is at round {session}")]
    StaleProposal { proposal: usize, session: usize },
    #[error("triplet id {0} is not in the unlabeled pool")]
    NotUnlabeled(usize),
    #[error("the test split is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Annotation source: ground truth plus independent, seeded order flips.
#[derive(Debug, Clone)]
pub struct Oracle {
    truth: OracleTruth,
    flip_rate: f64,
    seed: u64,
}

#[derive(Debug, Clone)]
enum OracleTruth {
    Matrix(DissimMatrix),
    Lookup(HashMap<Triplet, Triplet>),
}

impl Oracle {
    pub fn new(truth: &GroundTruth, flip_rate: f64, seed: u64) -> Result<Self, SessionError> {
        if !(0.0..=1.0).contains(&flip_rate) {
            return Err(SessionError::InvalidFlipRate(flip_rate));
        }
        let truth = match truth {
            GroundTruth::DissimMatrix(m) => OracleTruth::Matrix(m.clone()),
            GroundTruth::TripletList(ts) => OracleTruth::Lookup(ts.iter().map(|t| (t.canonical(), *t)).collect()),
        };
        Ok(Self { truth, flip_rate, seed })
    }

    pub fn flip_rate(&self) -> f64 {
        self.flip_rate
    }

    /// The noise-free ordering of a query.
    pub fn ground_truth(&self, query: Triplet) -> Result<Triplet, SessionError> {
        match &self.truth {
            OracleTruth::Matrix(m) => m.order(query).ok_or(SessionError::TieUndefined(query)),
            OracleTruth::Lookup(map) => map.get(&query.canonical()).copied().ok_or(SessionError::UnknownTriplet(query)),
        }
    }

    /// Whether the answer for this id is flipped. Depends only on the seed
    /// and the id, not on query order.
    pub fn flips(&self, id: usize) -> bool {
        self.flip_rate > 0.0 && rng::derived_rng(self.seed, &[id as u64]).random::<f64>() < self.flip_rate
    }

    pub fn annotate(&self, queries: &[Candidate]) -> Result<Vec<Triplet>, SessionError> {
        queries
            .iter()
            .map(|c| {
                let truth = self.ground_truth(c.triplet)?;
                Ok(if self.flips(c.id) { truth.swapped() } else { truth })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Epochs for the from-scratch model trained on the initial pool.
    pub init_epochs: usize,
    /// Warm-start epochs after every round.
    pub epochs: usize,
    pub sgd_batch: usize,
    pub learning_rate: f64,
    pub dropout: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { init_epochs: 1000, epochs: 200, sgd_batch: 500, learning_rate: 1e-4, dropout: 0.02 }
    }
}

impl TrainSettings {
    fn config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig { epochs, sgd_batch: self.sgd_batch, learning_rate: self.learning_rate, dropout: self.dropout, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden: vec![32, 32], embedding_dim: 8, activation: Activation::Relu }
    }
}

impl Architecture {
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.embedding_dim);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub architecture: Architecture,
    pub train: TrainSettings,
    pub init_pool: usize,
    pub train_fraction: f64,
    pub flip_rate: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            train: TrainSettings::default(),
            init_pool: 200,
            train_fraction: 0.5,
            flip_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    /// Dropout passes `K`.
    pub passes: usize,
    pub dropout: f64,
    /// `λ` as a multiple of the mean candidate margin variance.
    pub jitter: f64,
    pub min_norm: f64,
    /// Uniform pre-subsample of the unlabeled pool; `None` scores it all.
    pub candidate_cap: Option<usize>,
}

impl RoundConfig {
    pub fn new(strategy: Strategy, batch_size: usize) -> Self {
        Self { strategy, batch_size, passes: 70, dropout: 0.02, jitter: 1e-8, min_norm: 1e-8, candidate_cap: Some(5000) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `None` for the initial (pretraining) round.
    pub strategy: Option<Strategy>,
    pub chosen: Vec<usize>,
    pub batch_entropy: Option<f64>,
    pub accuracy: f64,
    pub labeled: usize,
    pub select_ms: f64,
    pub train_ms: f64,
}

impl RoundRecord {
    /// Equality on everything except wall-clock timings, with floats
    /// compared bitwise.
    pub fn same_outcome(&self, other: &RoundRecord) -> bool {
        self.round == other.round
            && self.strategy == other.strategy
            && self.chosen == other.chosen
            && self.batch_entropy.map(f64::to_bits) == other.batch_entropy.map(f64::to_bits)
            && self.accuracy.to_bits() == other.accuracy.to_bits()
            && self.labeled == other.labeled
    }
}

/// A selected batch awaiting answers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchProposal {
    /// Round this batch completes once committed.
    pub round: usize,
    pub items: Vec<Candidate>,
    pub selection: SelectionResult,
    pub batch_entropy: Option<f64>,
    pub select_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ActiveLearningSession {
    dataset: Arc<Dataset>,
    config: SessionConfig,
    seed: u64,
    oracle: Oracle,
    pool: Vec<Triplet>,
    test: Vec<Triplet>,
    labeled: Vec<(usize, Triplet)>,
    unlabeled: BTreeSet<usize>,
    params: EmbeddingParams,
    adam: AdamState,
    round: usize,
    history: Vec<RoundRecord>,
}

impl ActiveLearningSession {
    /// Splits the triplets, annotates a uniform initial pool and trains the
    /// starting model on it.
    pub fn init(dataset: Arc<Dataset>, config: SessionConfig, seed: u64) -> Result<Self, SessionError> {
        if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
            return Err(SessionError::InvalidTrainFraction(config.train_fraction));
        }
        let oracle = Oracle::new(&dataset.truth, config.flip_rate, derive_seed(seed, &[stream::ORACLE]))?;
        let (train, test) = split_triplets(&dataset.triplets, config.train_fraction, derive_seed(seed, &[stream::SPLIT]));
        if test.is_empty() {
            return Err(SessionError::EmptyTestSet);
        }
        let pool: Vec<Triplet> = train.iter().map(|t| t.canonical()).collect();
        if config.init_pool > pool.len() {
            return Err(SessionError::PoolTooSmall { requested: config.init_pool, available: pool.len() });
        }
        let mut init_ids: Vec<usize> =
            rand::seq::index::sample(&mut rng::derived_rng(seed, &[stream::INIT_POOL]), pool.len(), config.init_pool).into_vec();
        init_ids.sort_unstable();
        let queries: Vec<Candidate> = init_ids.iter().map(|&id| Candidate { id, triplet: pool[id] }).collect();
        let answers = oracle.annotate(&queries)?;
        let labeled: Vec<(usize, Triplet)> = init_ids.iter().copied().zip(answers).collect();
        let taken: BTreeSet<usize> = init_ids.iter().copied().collect();
        let unlabeled = (0..pool.len()).filter(|id| !taken.contains(id)).collect();

        let layers = config.architecture.layer_sizes(dataset.features.dim());
        let params =
            EmbeddingParams::he_uniform(&layers, config.architecture.activation, derive_seed(seed, &[stream::PARAMS]))?;
        let adam = AdamState::new(&params, config.train.learning_rate);
        let mut session = Self {
            dataset,
            config,
            seed,
            oracle,
            pool,
            test,
            labeled,
            unlabeled,
            params,
            adam,
            round: 0,
            history: Vec::new(),
        };
        let train_ms = session.retrain(session.config.train.init_epochs, 0)?;
        let accuracy = session.test_accuracy()?;
        session.history.push(RoundRecord {
            round: 0,
            strategy: None,
            chosen: init_ids,
            batch_entropy: None,
            accuracy,
            labeled: session.labeled.len(),
            select_ms: 0.0,
            train_ms,
        });
        Ok(session)
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn params(&self) -> &EmbeddingParams {
        &self.params
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn labeled(&self) -> &[(usize, Triplet)] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn test_triplets(&self) -> &[Triplet] {
        &self.test
    }

    /// The ordering-free query behind a pool id.
    pub fn query(&self, id: usize) -> Option<Triplet> {
        self.pool.get(id).copied()
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn test_accuracy(&self) -> Result<f64, SessionError> {
        Ok(model::evaluate(&self.params, &self.test, &self.dataset.features)?)
    }

    fn retrain(&mut self, epochs: usize, round: usize) -> Result<f64, SessionError> {
        let start = Instant::now();
        let triplets: Vec<Triplet> = self.labeled.iter().map(|(_, t)| *t).collect();
        let cfg = self.config.train.config(epochs, derive_seed(self.seed, &[stream::TRAIN, round as u64]));
        model::train(&mut self.params, &mut self.adam, &triplets, &self.dataset.features, &cfg)?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }

    /// Candidate ids for the next round: the unlabeled pool, uniformly
    /// subsampled to the cap. Sorted ascending.
    pub fn candidates(&self, cap: Option<usize>) -> Vec<Candidate> {
        let all: Vec<usize> = self.unlabeled.iter().copied().collect();
        let ids = match cap {
            Some(cap) if cap < all.len() => {
                let round = (self.round + 1) as u64;
                let mut rng = rng::derived_rng(self.seed, &[stream::CANDIDATES, round]);
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(&mut rng, all.len(), cap).into_iter().map(|p| all[p]).collect();
                picked.sort_unstable();
                picked
            }
            _ => all,
        };
        ids.into_iter().map(|id| Candidate { id, triplet: self.pool[id] }).collect()
    }

    /// Scores the candidates and selects the next batch. Does not change the
    /// session.
    pub fn propose(&self, cfg: &RoundConfig) -> Result<BatchProposal, SessionError> {
        let round = self.round + 1;
        let start = Instant::now();
        let candidates = self.candidates(cfg.candidate_cap);
        if cfg.batch_size > candidates.len() {
            return Err(SessionError::BatchTooLarge { requested: cfg.batch_size, available: candidates.len() });
        }
        let features = &self.dataset.features;
        let dropout_seed = derive_seed(self.seed, &[stream::DROPOUT, round as u64]);
        let mut sel = SelectionConfig { batch_size: cfg.batch_size, jitter: 0.0, min_norm: cfg.min_norm, seed: 0 };
        let ids: Vec<usize> = candidates.iter().map(|c| c.id).collect();
        let selection = match cfg.strategy {
            Strategy::JointEntropy | Strategy::Variance => {
                let msm = posterior::sample_margins(&self.params, features, &candidates, cfg.passes, cfg.dropout, dropout_seed)?;
                let cm = posterior::center(&msm);
                sel.jitter = cfg.jitter * cm.mean_variance();
                if cfg.strategy == Strategy::JointEntropy {
                    strategies::select_joint_entropy(&cm, &sel)?
                } else {
                    strategies::select_variance(&cm, &sel)?
                }
            }
            Strategy::Uncertainty => {
                let margins = posterior::deterministic_margins(&self.params, features, &candidates)?;
                strategies::select_uncertainty(&ids, &margins, &sel)?
            }
            Strategy::Random => {
                sel.seed = derive_seed(self.seed, &[stream::RANDOM_SELECT, round as u64]);
                strategies::select_random(&ids, &sel)?
            }
        };
        let select_ms = start.elapsed().as_secs_f64() * 1e3;

        let items: Vec<Candidate> = selection.chosen.iter().map(|&id| Candidate { id, triplet: self.pool[id] }).collect();
        let batch_entropy = self.batch_entropy(&items, cfg, dropout_seed)?;
        Ok(BatchProposal { round, items, selection, batch_entropy, select_ms })
    }

    /// Joint margin entropy of a batch under this round's dropout plans;
    /// `None` when the covariance is singular even after jitter.
    fn batch_entropy(&self, items: &[Candidate], cfg: &RoundConfig, dropout_seed: u64) -> Result<Option<f64>, SessionError> {
        if items.is_empty() || cfg.passes < 2 {
            return Ok(None);
        }
        let msm = posterior::sample_margins(&self.params, &self.dataset.features, items, cfg.passes, cfg.dropout, dropout_seed)?;
        let cm = posterior::center(&msm);
        let jitter = cfg.jitter * cm.mean_variance();
        let ids: Vec<usize> = items.iter().map(|c| c.id).collect();
        Ok(strategies::batch_entropy(&cm, &ids, jitter).ok())
    }

    /// Records ordered answers for a proposal (in proposal order), retrains
    /// from the current parameters and optimizer state, and evaluates.
    pub fn commit(&mut self, proposal: &BatchProposal, answers: &[Triplet]) -> Result<RoundRecord, SessionError> {
        if proposal.round != self.round + 1 {
            return Err(SessionError::StaleProposal { proposal: proposal.round, session: self.round });
        }
        if answers.len() != proposal.items.len() {
            return Err(SessionError::AnswerMismatch {
                index: answers.len().min(proposal.items.len()),
                reason: format!("{} answers for {} queries", answers.len(), proposal.items.len()),
            });
        }
        for (index, (item, answer)) in proposal.items.iter().zip(answers).enumerate() {
            if answer.canonical() != item.triplet.canonical() {
                return Err(SessionError::AnswerMismatch { index, reason: format!("{answer:?} answers {:?}", item.triplet) });
            }
            if !self.unlabeled.contains(&item.id) {
                return Err(SessionError::NotUnlabeled(item.id));
            }
        }
        for (item, answer) in proposal.items.iter().zip(answers) {
            self.unlabeled.remove(&item.id);
            self.labeled.push((item.id, *answer));
        }
        self.round = proposal.round;
        let train_ms = self.retrain(self.config.train.epochs, self.round)?;
        let record = RoundRecord {
            round: self.round,
            strategy: Some(proposal.selection.strategy),
            chosen: proposal.selection.chosen.clone(),
            batch_entropy: proposal.batch_entropy,
            accuracy: self.test_accuracy()?,
            labeled: self.labeled.len(),
            select_ms: proposal.select_ms,
            train_ms,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// One full round with the simulated oracle.
    pub fn run_round(&mut self, cfg: &RoundConfig) -> Result<RoundRecord, SessionError> {
        let proposal = self.propose(cfg)?;
        let answers = self.oracle.annotate(&proposal.items)?;
        self.commit(&proposal, &answers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn tiny_dataset() -> Arc<Dataset> {
        let spec = SyntheticSpec { n: 30, d: 4, latent_dim: 2, seed: 3, ..Default::default() };
        Arc::new(Dataset::synthetic(&spec, 400, None).unwrap())
    }

    fn quick_config(init_pool: usize) -> SessionConfig {
        SessionConfig {
            architecture: Architecture { hidden: vec![8], embedding_dim: 3, activation: Activation::Relu },
            train: TrainSettings { init_epochs: 5, epochs: 3, sgd_batch: 50, learning_rate: 1e-2, dropout: 0.02 },
            init_pool,
            ..SessionConfig::default()
        }
    }

    #[test]
    fn oracle_flip_extremes() {
        let ds = tiny_dataset();
        let queries: Vec<Candidate> =
            ds.triplets.iter().take(50).enumerate().map(|(id, t)| Candidate { id, triplet: t.canonical() }).collect();
        let clean = Oracle::new(&ds.truth, 0.0, 1).unwrap().annotate(&queries).unwrap();
        assert_eq!(clean, ds.triplets[..50].to_vec());
        let flipped = Oracle::new(&ds.truth, 1.0, 1).unwrap().annotate(&queries).unwrap();
        assert!(flipped.iter().zip(&clean).all(|(f, c)| *f == c.swapped()));
        assert!(matches!(Oracle::new(&ds.truth, 1.5, 1), Err(SessionError::InvalidFlipRate(_))));
    }

    #[test]
    fn oracle_reports_ties_and_unknown_triplets() {
        let m = DissimMatrix::new(crate::linalg::Matrix::from_rows(&[[0.0, 1.0, 1.0], [1.0, 0.0, 2.0], [1.0, 2.0, 0.0]]).unwrap())
            .unwrap();
        let oracle = Oracle::new(&GroundTruth::DissimMatrix(m), 0.0, 0).unwrap();
        assert!(matches!(oracle.ground_truth(Triplet { i: 0, j: 1, k: 2 }), Err(SessionError::TieUndefined(_))));
        let list = Oracle::new(&GroundTruth::TripletList(vec![Triplet { i: 0, j: 2, k: 1 }]), 0.0, 0).unwrap();
        assert_eq!(list.ground_truth(Triplet { i: 0, j: 1, k: 2 }).unwrap(), Triplet { i: 0, j: 2, k: 1 });
        assert!(matches!(list.ground_truth(Triplet { i: 1, j: 0, k: 2 }), Err(SessionError::UnknownTriplet(_))));
    }

    #[test]
    fn empty_initial_pool_is_untrained() {
        let ds = tiny_dataset();
        let s = ActiveLearningSession::init(ds.clone(), quick_config(0), 4).unwrap();
        assert!(s.labeled().is_empty());
        let layers = s.config().architecture.layer_sizes(ds.features.dim());
        let fresh = EmbeddingParams::he_uniform(&layers, Activation::Relu, derive_seed(4, &[stream::PARAMS])).unwrap();
        assert_eq!(s.params(), &fresh);
        assert_eq!(s.history().len(), 1);
    }

    #[test]
    fn oversized_pool_is_rejected() {
        let err = ActiveLearningSession::init(tiny_dataset(), quick_config(10_000), 0).unwrap_err();
        assert!(matches!(err, SessionError::PoolTooSmall { .. }));
    }

    #[test]
    fn random_round_can_exhaust_the_pool() {
        let mut s = ActiveLearningSession::init(tiny_dataset(), quick_config(20), 1).unwrap();
        let rest = s.unlabeled().len();
        let cfg = RoundConfig { candidate_cap: None, ..RoundConfig::new(Strategy::Random, rest) };
        let rec = s.run_round(&cfg).unwrap();
        assert!(s.unlabeled().is_empty());
        assert_eq!(rec.labeled, s.pool_size());
        let err = s.run_round(&RoundConfig::new(Strategy::Random, 1)).unwrap_err();
        assert!(matches!(err, SessionError::BatchTooLarge { .. }));
    }

    #[test]
    fn commit_rejects_bad_answers() {
        let mut s = ActiveLearningSession::init(tiny_dataset(), quick_config(20), 2).unwrap();
        let p = s.propose(&RoundConfig::new(Strategy::Uncertainty, 3)).unwrap();
        let mut answers = s.oracle().annotate(&p.items).unwrap();
        answers[1] = Triplet { i: answers[1].i, j: answers[1].j, k: (answers[1].k + 1) % 30 };
        if answers[1].k == answers[1].i || answers[1].k == answers[1].j {
            answers[1].k = (answers[1].k + 1) % 30;
        }
        assert!(matches!(s.commit(&p, &answers), Err(SessionError::AnswerMismatch { index: 1, .. })));
        assert!(matches!(s.commit(&p, &answers[..2]), Err(SessionError::AnswerMismatch { .. })));
        let good = s.oracle().annotate(&p.items).unwrap();
        s.commit(&p, &good).unwrap();
        assert!(matches!(s.commit(&p, &good), Err(SessionError::StaleProposal { .. })));
    }
}
