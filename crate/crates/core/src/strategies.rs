//! Batch selection policies.
//!
//! `joint_entropy` greedily grows the batch whose Gaussian margin model has
//! the largest differential entropy. With `Σ_B` the Gram matrix of the
//! scaled centered rows `u_t / sqrt(K−1)`, the entropy gain from adding `t`
//! is `½ log(det Σ_{B∪t} / det Σ_B) = ½ log ‖ũ_t‖²`, where `ũ_t` is the
//! residual of `t`'s row after projecting out the span of the rows already
//! chosen. Residuals of all remaining candidates are updated in place, one
//! projection per committed vector, which is modified Gram-Schmidt run
//! incrementally.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky_logdet, dot, LinalgError, Matrix, OrthoBasis, REORTH_RATIO};
use crate::posterior::CenteredMargins;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("batch too large: requested {requested} of {available} candidates")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("{ids} candidate ids for {values} scores")]
    LengthMismatch { ids: usize, values: usize },
    #[error("unknown candidate id {0}")]
    UnknownId(usize),
    #[error("unknown strategy {0:?} (expected joint_entropy, random, uncertainty or variance)")]
    UnknownStrategy(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    JointEntropy,
    Random,
    Uncertainty,
    Variance,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::JointEntropy, Strategy::Random, Strategy::Uncertainty, Strategy::Variance];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::JointEntropy => "joint_entropy",
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Variance => "variance",
        }
    }

    /// Whether the strategy scores candidates from MC-dropout samples.
    pub fn needs_dropout_samples(self) -> bool {
        matches!(self, Strategy::JointEntropy | Strategy::Variance)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| SelectionError::UnknownStrategy(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub batch_size: usize,
    /// Absolute jitter `λ ≥ 0` added to every joint-entropy step score.
    pub jitter: f64,
    /// Saturation threshold on residual norms, relative to the largest
    /// candidate norm.
    pub min_norm: f64,
    /// Used by `random` only.
    pub seed: u64,
}

impl SelectionConfig {
    pub fn new(batch_size: usize) -> Self {
        Self { batch_size, jitter: 0.0, min_norm: 1e-8, seed: 0 }
    }

    fn check(&self, available: usize) -> Result<(), SelectionError> {
        if self.batch_size == 0 {
            return Err(SelectionError::EmptyBatch);
        }
        if self.batch_size > available {
            return Err(SelectionError::BatchTooLarge { requested: self.batch_size, available });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    /// Chosen candidate ids in selection order.
    pub chosen: Vec<usize>,
    /// Per step: `log(‖ũ‖² + λ)` for joint entropy, the candidate's own
    /// score for the baselines.
    pub step_scores: Vec<f64>,
    /// 1-based step at which the residual span saturated.
    pub saturated_at: Option<usize>,
    /// Length-`dim` inner products spent by the greedy loop.
    pub inner_products: u64,
}

/// `(score, id)` orders better-first: higher score, then lower id.
fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => a.1 < b.1,
    }
}

/// Greedy log-det maximization over the rows of `vectors`.
///
/// At each step picks the remaining row with the largest squared residual
/// against the rows already chosen (ties to the lowest id). When the largest
/// residual norm drops below `min_norm ×` the largest initial row norm, the
/// span is saturated and the remaining picks go by squared initial norm,
/// then id.
pub fn greedy_log_det(ids: &[usize], vectors: &Matrix, cfg: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    let m = vectors.rows();
    if ids.len() != m {
        return Err(SelectionError::LengthMismatch { ids: ids.len(), values: m });
    }
    cfg.check(m)?;
    let b = cfg.batch_size;
    let mut ops: u64 = 0;

    let mut residuals = vectors.clone();
    let initial: Vec<f64> = (0..m).map(|t| dot(vectors.row(t), vectors.row(t))).collect();
    ops += m as u64;
    let mut norms = initial.clone();
    let threshold = cfg.min_norm * initial.iter().fold(0.0f64, |a, &v| a.max(v)).sqrt();

    let mut remaining = vec![true; m];
    let mut basis = OrthoBasis::new(vectors.cols());
    let mut chosen = Vec::with_capacity(b);
    let mut scores = Vec::with_capacity(b);
    let mut saturated_at = None;

    for step in 0..b {
        let argmax = |key: &[f64]| {
            (0..m).filter(|&t| remaining[t]).fold(None, |best: Option<usize>, t| match best {
                Some(s) if !better((key[t], ids[t]), (key[s], ids[s])) => Some(s),
                _ => Some(t),
            })
        };

        let mut pick = None;
        if saturated_at.is_none() {
            let t = argmax(&norms).expect("b <= m leaves a candidate");
            let mut sq = norms[t];
            if sq > 0.0 && sq.sqrt() >= threshold && sq < REORTH_RATIO * REORTH_RATIO * initial[t] {
                // heavy cancellation: one more projection pass on the winner
                ops += basis.project_out(residuals.row_mut(t)) as u64;
                sq = dot(residuals.row(t), residuals.row(t));
                ops += 1;
                norms[t] = sq;
            }
            if sq > 0.0 && sq.sqrt() >= threshold && basis.extend(residuals.row(t), threshold).is_ok() {
                pick = Some((t, sq));
            } else {
                saturated_at = Some(step + 1);
            }
        }

        let (t, score) = match pick {
            Some((t, sq)) => {
                if step + 1 < b {
                    let q = basis.vectors().last().expect("just extended");
                    for s in (0..m).filter(|&s| remaining[s] && s != t) {
                        let r = residuals.row_mut(s);
                        let c = dot(q, r);
                        r.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
                        norms[s] = dot(r, r);
                        ops += 2;
                    }
                }
                (t, (sq + cfg.jitter).ln())
            }
            None => {
                let t = argmax(&initial).expect("b <= m leaves a candidate");
                (t, (norms[t].max(0.0) + cfg.jitter).ln())
            }
        };
        remaining[t] = false;
        chosen.push(ids[t]);
        scores.push(score);
    }

    Ok(SelectionResult {
        strategy: Strategy::JointEntropy,
        chosen,
        step_scores: scores,
        saturated_at,
        inner_products: ops,
    })
}

/// Greedy maximization of the batch's joint margin entropy.
pub fn select_joint_entropy(cm: &CenteredMargins, cfg: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    greedy_log_det(cm.candidate_ids(), &cm.scaled_rows(), cfg)
}

/// `b` ids drawn uniformly without replacement.
pub fn select_random(ids: &[usize], cfg: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    cfg.check(ids.len())?;
    let mut rng = rng::rng_from(cfg.seed);
    let chosen: Vec<usize> =
        rand::seq::index::sample(&mut rng, ids.len(), cfg.batch_size).into_iter().map(|p| ids[p]).collect();
    Ok(SelectionResult {
        strategy: Strategy::Random,
        step_scores: vec![0.0; chosen.len()],
        chosen,
        saturated_at: None,
        inner_products: 0,
    })
}

/// Binary entropy of the ordering probability `sigmoid(ξ)`. Even in `ξ`.
pub fn ordering_entropy(margin: f64) -> f64 {
    let x = margin.abs();
    // p = 1/(1+e^{-x}); -ln p = softplus(-x), -ln(1-p) = softplus(x)
    let e = (-x).exp();
    let p = 1.0 / (1.0 + e);
    let softplus_neg = e.ln_1p();
    let softplus_pos = x + softplus_neg;
    p * softplus_neg + (1.0 - p) * softplus_pos
}

/// Top-`b` by ordering entropy of the deterministic margins. Entropy is
/// strictly decreasing in `|ξ|`, so ranking uses `|ξ|` directly.
pub fn select_uncertainty(ids: &[usize], margins: &[f64], cfg: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    if ids.len() != margins.len() {
        return Err(SelectionError::LengthMismatch { ids: ids.len(), values: margins.len() });
    }
    cfg.check(ids.len())?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| margins[a].abs().total_cmp(&margins[b].abs()).then(ids[a].cmp(&ids[b])));
    order.truncate(cfg.batch_size);
    Ok(SelectionResult {
        strategy: Strategy::Uncertainty,
        chosen: order.iter().map(|&p| ids[p]).collect(),
        step_scores: order.iter().map(|&p| ordering_entropy(margins[p])).collect(),
        saturated_at: None,
        inner_products: 0,
    })
}

/// Top-`b` by individual margin variance.
pub fn select_variance(cm: &CenteredMargins, cfg: &SelectionConfig) -> Result<SelectionResult, SelectionError> {
    let ids = cm.candidate_ids();
    cfg.check(ids.len())?;
    let var = cm.variances();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(ids[a].cmp(&ids[b])));
    order.truncate(cfg.batch_size);
    Ok(SelectionResult {
        strategy: Strategy::Variance,
        chosen: order.iter().map(|&p| ids[p]).collect(),
        step_scores: order.iter().map(|&p| var[p]).collect(),
        saturated_at: None,
        inner_products: 0,
    })
}

/// Differential entropy `½ (b log(2πe) + log det Σ)` of a Gaussian with
/// covariance `Σ`.
pub fn gaussian_entropy(cov: &Matrix) -> Result<f64, LinalgError> {
    let b = cov.rows() as f64;
    Ok(0.5 * (b * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + cholesky_logdet(cov)?))
}

/// Joint entropy of the margins of the given candidate ids, with `λ` added
/// to the covariance diagonal.
pub fn batch_entropy(cm: &CenteredMargins, batch: &[usize], jitter: f64) -> Result<f64, SelectionError> {
    let positions = batch.iter().map(|&id| cm.position_of(id).ok_or(SelectionError::UnknownId(id))).collect::<Result<Vec<_>, _>>()?;
    if positions.is_empty() {
        return Err(SelectionError::EmptyBatch);
    }
    let mut cov = cm.covariance_matrix(&positions);
    cov.add_diagonal(jitter);
    Ok(gaussian_entropy(&cov)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::{center, MarginSampleMatrix};

    /// Centered margins with rows `(r, −r)`: zero-mean, variance ∝ ‖r‖².
    fn mirrored(rows: &[&[f64]]) -> CenteredMargins {
        let data: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().copied().chain(r.iter().map(|v| -v)).collect()).collect();
        center(&MarginSampleMatrix::new((0..rows.len()).collect(), Matrix::from_rows(&data).unwrap()).unwrap())
    }

    #[test]
    fn single_candidate() {
        let cm = mirrored(&[&[1.0, 2.0]]);
        let r = select_joint_entropy(&cm, &SelectionConfig::new(1)).unwrap();
        assert_eq!(r.chosen, vec![0]);
    }

    #[test]
    fn worked_three_candidate_example() {
        // u1=(2,0), u2=(1,1), u3=(0,0.5) with K−1 = 1.
        let rows = Matrix::from_rows(&[[2.0, 0.0], [1.0, 1.0], [0.0, 0.5]]).unwrap();
        let r = greedy_log_det(&[1, 2, 3], &rows, &SelectionConfig::new(2)).unwrap();
        assert_eq!(r.chosen, vec![1, 2]);
        assert!((r.step_scores[0] - 4f64.ln()).abs() < 1e-15);
        assert!(r.step_scores[1].abs() < 1e-15);
        // Pair determinants by cofactor expansion of the Gram matrices:
        // {1,2}: [[4,2],[2,2]] → 4;  {1,3}: [[4,0],[0,.25]] → 1;  {2,3}: [[2,.5],[.5,.25]] → .25
        let g = rows.gram_of_rows();
        let dets: Vec<f64> = [[0, 1], [0, 2], [1, 2]]
            .iter()
            .map(|p| cholesky_logdet(&g.principal_submatrix(p)).unwrap().exp())
            .collect();
        assert!((dets[0] - 4.0).abs() < 1e-12 && (dets[1] - 1.0).abs() < 1e-12 && (dets[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn duplicate_rows_saturate() {
        let rows = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let r = greedy_log_det(&[5, 3, 9], &rows, &SelectionConfig::new(2)).unwrap();
        assert_eq!(r.chosen, vec![3, 5]);
        assert_eq!(r.saturated_at, Some(2));
    }

    #[test]
    fn batch_too_large() {
        let rows = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(
            greedy_log_det(&[0], &rows, &SelectionConfig::new(2)),
            Err(SelectionError::BatchTooLarge { requested: 2, available: 1 })
        );
        assert!(matches!(select_random(&[0, 1], &SelectionConfig::new(3)), Err(SelectionError::BatchTooLarge { .. })));
        assert!(matches!(select_uncertainty(&[0], &[0.0], &SelectionConfig::new(2)), Err(SelectionError::BatchTooLarge { .. })));
    }

    #[test]
    fn random_examples() {
        let ids = [10, 11, 12, 13];
        let mut all = select_random(&ids, &SelectionConfig::new(4)).unwrap().chosen;
        all.sort();
        assert_eq!(all, ids);
        let cfg = SelectionConfig { seed: 8, ..SelectionConfig::new(2) };
        assert_eq!(select_random(&ids, &cfg).unwrap(), select_random(&ids, &cfg).unwrap());
    }

    #[test]
    fn uncertainty_examples() {
        assert!((ordering_entropy(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((ordering_entropy(0.0) - 0.6931).abs() < 1e-4);
        for x in [0.1, 1.0, 7.5, 40.0, 800.0] {
            assert_eq!(ordering_entropy(x), ordering_entropy(-x));
            assert!(ordering_entropy(x).is_finite());
        }
        let r = select_uncertainty(&[0, 1, 2], &[5.0, 0.0, -5.0], &SelectionConfig::new(1)).unwrap();
        assert_eq!(r.chosen, vec![1]);
    }

    #[test]
    fn variance_examples() {
        let cm = mirrored(&[&[2.0, 0.0], &[1.0, 0.0], &[0.5, 0.0]]);
        // variances are proportional to 4 : 1 : 0.25
        let r = select_variance(&cm, &SelectionConfig::new(2)).unwrap();
        assert_eq!(r.chosen, vec![0, 1]);
        let flat = mirrored(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(select_variance(&flat, &SelectionConfig::new(2)).unwrap().chosen, vec![0, 1]);
    }

    #[test]
    fn entropy_examples() {
        let half_log_2pie = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((gaussian_entropy(&Matrix::identity(1)).unwrap() - 1.41894).abs() < 1e-5);
        assert!((gaussian_entropy(&Matrix::identity(1)).unwrap() - half_log_2pie).abs() < 1e-15);
        assert!((gaussian_entropy(&Matrix::identity(2)).unwrap() - 2.83788).abs() < 1e-5);
        let cov = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        // ½(2 log 2πe + log 3)
        let expected = 2.0 * half_log_2pie + 0.5 * 3f64.ln();
        assert!((gaussian_entropy(&cov).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 3.38718).abs() < 1e-5);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("badge".parse::<Strategy>().is_err());
    }
}
