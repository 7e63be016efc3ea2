//! MC-dropout samples of candidate margins.
//!
//! Each pass draws ONE dropout plan and applies it to every candidate, so
//! the sampled margins are correlated exactly as much as the shared model
//! perturbation makes them. Embeddings are computed once per object per
//! pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureTable;
use crate::linalg::{dot, Matrix};
use crate::model::{embed_objects, margin_of, DropoutPlan, EmbeddingParams, ModelError, Triplet};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PosteriorError {
    #[error("need at least 2 dropout passes, got {0}")]
    TooFewPasses(usize),
    #[error("no candidates to sample")]
    NoCandidates,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// An unlabeled query, identified by a stable id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub triplet: Triplet,
}

/// Row `t`, column `κ`: the margin of candidate `t` under dropout pass `κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginSampleMatrix {
    candidate_ids: Vec<usize>,
    samples: Matrix,
}

impl MarginSampleMatrix {
    pub fn new(candidate_ids: Vec<usize>, samples: Matrix) -> Result<Self, PosteriorError> {
        if samples.cols() < 2 {
            return Err(PosteriorError::TooFewPasses(samples.cols()));
        }
        if candidate_ids.len() != samples.rows() {
            return Err(ModelError::DimensionMismatch { expected: samples.rows(), actual: candidate_ids.len() }.into());
        }
        Ok(Self { candidate_ids, samples })
    }

    pub fn candidate_ids(&self) -> &[usize] {
        &self.candidate_ids
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn passes(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }
}

/// Per-candidate means, zero-mean sample rows `u_t` and unbiased variances.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredMargins {
    candidate_ids: Vec<usize>,
    means: Vec<f64>,
    centered: Matrix,
    variances: Vec<f64>,
}

impl CenteredMargins {
    pub fn candidate_ids(&self) -> &[usize] {
        &self.candidate_ids
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Rows are the `u_t`.
    pub fn centered(&self) -> &Matrix {
        &self.centered
    }

    pub fn passes(&self) -> usize {
        self.centered.cols()
    }

    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }

    pub fn position_of(&self, id: usize) -> Option<usize> {
        self.candidate_ids.iter().position(|&c| c == id)
    }

    /// `⟨u_s, u_t⟩ / (K − 1)` for positions `s`, `t`.
    pub fn covariance(&self, s: usize, t: usize) -> f64 {
        dot(self.centered.row(s), self.centered.row(t)) / (self.passes() - 1) as f64
    }

    /// Covariance matrix over the given positions.
    pub fn covariance_matrix(&self, positions: &[usize]) -> Matrix {
        let mut cov = self.centered.select_rows(positions).gram_of_rows();
        cov.scale(1.0 / (self.passes() - 1) as f64);
        cov
    }

    /// `u_t / sqrt(K − 1)`, whose Gram matrix is the covariance.
    pub fn scaled_rows(&self) -> Matrix {
        let mut m = self.centered.clone();
        m.scale(1.0 / ((self.passes() - 1) as f64).sqrt());
        m
    }

    pub fn mean_variance(&self) -> f64 {
        if self.variances.is_empty() {
            return 0.0;
        }
        self.variances.iter().sum::<f64>() / self.variances.len() as f64
    }
}

/// Samples `passes` margins per candidate; pass `κ` uses the plan seeded by
/// `(seed, κ)`.
pub fn sample_margins(
    params: &EmbeddingParams,
    features: &FeatureTable,
    candidates: &[Candidate],
    passes: usize,
    dropout: f64,
    seed: u64,
) -> Result<MarginSampleMatrix, PosteriorError> {
    if passes < 2 {
        return Err(PosteriorError::TooFewPasses(passes));
    }
    if candidates.is_empty() {
        return Err(PosteriorError::NoCandidates);
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(ModelError::InvalidDropout(dropout).into());
    }
    let n = features.n();
    let mut slot: Vec<Option<usize>> = vec![None; n];
    let mut objects = Vec::new();
    for c in candidates {
        c.triplet.check_bounds(n)?;
        for o in [c.triplet.i, c.triplet.j, c.triplet.k] {
            if slot[o].is_none() {
                slot[o] = Some(objects.len());
                objects.push(o);
            }
        }
    }

    let columns: Vec<Vec<f64>> = (0..passes)
        .into_par_iter()
        .map(|kappa| -> Result<Vec<f64>, PosteriorError> {
            let plan = DropoutPlan::for_params(params, dropout, pass_seed(seed, kappa))?;
            let emb = embed_objects(params, features, &objects, Some(&plan))?;
            Ok(candidates
                .iter()
                .map(|c| {
                    let t = c.triplet;
                    let row = |o: usize| emb.row(slot[o].expect("registered above"));
                    margin_of(row(t.i), row(t.j), row(t.k))
                })
                .collect())
        })
        .collect::<Result<_, _>>()?;

    let m = candidates.len();
    let mut samples = Matrix::zeros(m, passes);
    for (kappa, col) in columns.iter().enumerate() {
        for (t, &v) in col.iter().enumerate() {
            samples.set(t, kappa, v);
        }
    }
    MarginSampleMatrix::new(candidates.iter().map(|c| c.id).collect(), samples)
}

/// Seed of the dropout plan for pass `kappa`.
pub fn pass_seed(seed: u64, kappa: usize) -> u64 {
    rng::derive_seed(seed, &[kappa as u64])
}

pub fn center(msm: &MarginSampleMatrix) -> CenteredMargins {
    let k = msm.passes();
    let mut centered = msm.samples.clone();
    let mut means = Vec::with_capacity(msm.len());
    let mut variances = Vec::with_capacity(msm.len());
    for t in 0..msm.len() {
        let row = centered.row_mut(t);
        // Offset by the first sample so constant rows center to exact zeros.
        let mean = row[0] + row.iter().map(|v| v - row[0]).sum::<f64>() / k as f64;
        row.iter_mut().for_each(|v| *v -= mean);
        variances.push(dot(row, row) / (k - 1) as f64);
        means.push(mean);
    }
    CenteredMargins { candidate_ids: msm.candidate_ids.clone(), means, centered, variances }
}

/// Margins of the deterministic (no-dropout) model.
pub fn deterministic_margins(
    params: &EmbeddingParams,
    features: &FeatureTable,
    candidates: &[Candidate],
) -> Result<Vec<f64>, ModelError> {
    let emb = crate::model::embed_all(params, features, None)?;
    candidates
        .iter()
        .map(|c| {
            let t = c.triplet;
            t.check_bounds(features.n())?;
            Ok(margin_of(emb.row(t.i), emb.row(t.j), emb.row(t.k)))
        })
        .collect()
}
