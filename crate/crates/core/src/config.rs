//! Experiment configuration: one JSON document, unknown keys rejected,
//! errors pointing at the offending line.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, Mixing, Nonlinearity, SyntheticSpec};
use crate::session::{Architecture, RoundConfig, SessionConfig, TrainSettings};
use crate::strategies::Strategy;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: Option<usize>, message: impl Into<String>) -> Self {
        Self { line, column: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default = "defaults::n")]
    pub n: usize,
    #[serde(default = "defaults::d")]
    pub d: usize,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub mixing: Mixing,
    #[serde(default)]
    pub feature_noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Ground-truth triplets sampled from the latent metric.
    #[serde(default = "defaults::triplets")]
    pub triplets: usize,
    #[serde(default)]
    pub min_gap: Option<f64>,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SyntheticSource {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n: self.n,
            d: self.d,
            latent_dim: self.latent_dim,
            nonlinearity: self.nonlinearity,
            mixing: self.mixing,
            noise: self.feature_noise,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirSource {
    pub path: PathBuf,
    /// Triplets to sample when the directory has only `dissim.csv`.
    #[serde(default = "defaults::triplets")]
    pub triplets: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    Dir(DirSource),
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticSource::default())
    }
}

impl DatasetSource {
    /// Builds the dataset; relative directory paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Dataset, DataError> {
        match self {
            Self::Synthetic(s) => Dataset::synthetic(&s.spec(), s.triplets, s.min_gap),
            Self::Dir(d) => {
                let path = match base {
                    Some(b) if d.path.is_relative() => b.join(&d.path),
                    _ => d.path.clone(),
                };
                Dataset::load_dir(&path, d.triplets, d.seed)
            }
        }
    }
}

mod defaults {
    use crate::strategies::Strategy;

    pub fn n() -> usize {
        150
    }
    pub fn d() -> usize {
        10
    }
    pub fn latent_dim() -> usize {
        3
    }
    pub fn triplets() -> usize {
        20_000
    }
    pub fn strategies() -> Vec<Strategy> {
        Strategy::ALL.to_vec()
    }
    pub fn rounds() -> usize {
        8
    }
    pub fn batch_size() -> usize {
        100
    }
    pub fn passes() -> usize {
        70
    }
    pub fn dropout() -> f64 {
        0.02
    }
    pub fn jitter() -> f64 {
        1e-8
    }
    pub fn min_norm() -> f64 {
        1e-8
    }
    pub fn candidate_cap() -> Option<usize> {
        Some(5000)
    }
    pub fn init_pool() -> usize {
        200
    }
    pub fn train_fraction() -> f64 {
        0.5
    }
    pub fn seeds() -> Vec<u64> {
        vec![0, 1, 2, 3, 4]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default = "defaults::strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Dropout passes `K`.
    #[serde(default = "defaults::passes")]
    pub passes: usize,
    /// Dropout probability for margin sampling.
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    /// `λ` relative to the mean candidate variance.
    #[serde(default = "defaults::jitter")]
    pub jitter: f64,
    #[serde(default = "defaults::min_norm")]
    pub min_norm: f64,
    #[serde(default = "defaults::candidate_cap")]
    pub candidate_cap: Option<usize>,
    #[serde(default = "defaults::init_pool")]
    pub init_pool: usize,
    #[serde(default = "defaults::train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    /// Label flip rate `η`.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    /// Parses and validates. Returns the config with repeated strategies
    /// removed, plus one warning per removed entry.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>), ConfigError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError {
            line: (e.line() > 0).then_some(e.line()),
            column: (e.column() > 0).then_some(e.column()),
            message: e.to_string().split(" at line ").next().unwrap_or_default().to_string(),
        })?;
        let warnings = cfg.dedup_strategies();
        cfg.validate_with(Some(text))?;
        Ok((cfg, warnings))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at(None, format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dedup_strategies(&mut self) -> Vec<String> {
        let mut seen = Vec::new();
        let mut warnings = Vec::new();
        for s in self.strategies.drain(..) {
            if seen.contains(&s) {
                warnings.push(format!("strategy {s} listed more than once; running it once"));
            } else {
                seen.push(s);
            }
        }
        self.strategies = seen;
        warnings
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(None)
    }

    fn validate_with(&self, text: Option<&str>) -> Result<(), ConfigError> {
        let fail = |path: &[&str], msg: String| Err(ConfigError::at(text.and_then(|t| line_of(t, path)), msg));
        if self.strategies.is_empty() {
            return fail(&["strategies"], "strategies must not be empty".into());
        }
        if self.batch_size == 0 {
            return fail(&["batch_size"], "batch_size must be at least 1".into());
        }
        if self.passes < 2 {
            return fail(&["passes"], format!("passes must be at least 2, got {}", self.passes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(&["dropout"], format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail(&["jitter"], format!("jitter must be finite and >= 0, got {}", self.jitter));
        }
        if !(self.min_norm >= 0.0 && self.min_norm < 1.0) {
            return fail(&["min_norm"], format!("min_norm must be in [0, 1), got {}", self.min_norm));
        }
        if let Some(cap) = self.candidate_cap {
            if cap < self.batch_size {
                return fail(&["candidate_cap"], format!("batch too large: batch_size {} exceeds candidate_cap {cap}", self.batch_size));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(&["train_fraction"], format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if self.seeds.is_empty() {
            return fail(&["seeds"], "seeds must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return fail(&["noise"], format!("noise must be in [0, 1], got {}", self.noise));
        }
        if self.model.embedding_dim == 0 {
            return fail(&["model", "embedding_dim"], "embedding_dim must be at least 1".into());
        }
        if self.model.hidden.contains(&0) {
            return fail(&["model", "hidden"], "hidden widths must be at least 1".into());
        }
        let t = &self.train;
        if t.sgd_batch == 0 {
            return fail(&["train", "sgd_batch"], "sgd_batch must be at least 1".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return fail(&["train", "learning_rate"], format!("learning_rate must be positive, got {}", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return fail(&["train", "dropout"], format!("train dropout must be in [0, 1), got {}", t.dropout));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if let Err(e) = s.spec().validate() {
                return fail(&["dataset", "synthetic"], e.to_string());
            }
            if let Some(g) = s.min_gap {
                if !(g >= 0.0 && g.is_finite()) {
                    return fail(&["dataset", "min_gap"], format!("min_gap must be finite and >= 0, got {g}"));
                }
            }
        }
        Ok(())
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            architecture: self.model.clone(),
            train: self.train.clone(),
            init_pool: self.init_pool,
            train_fraction: self.train_fraction,
            flip_rate: self.noise,
        }
    }

    pub fn round_config(&self, strategy: Strategy) -> RoundConfig {
        RoundConfig {
            strategy,
            batch_size: self.batch_size,
            passes: self.passes,
            dropout: self.dropout,
            jitter: self.jitter,
            min_norm: self.min_norm,
            candidate_cap: self.candidate_cap,
        }
    }
}

/// 1-based line of the last key in `path`, each key searched after the
/// previous one.
fn line_of(text: &str, path: &[&str]) -> Option<usize> {
    let mut from = 0;
    for key in path {
        let needle = format!("\"{key}\"");
        from += text[from..].find(&needle)?;
    }
    Some(text[..from].matches('\n').count() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let (cfg, warnings) = ExperimentConfig::from_json("{}").unwrap();
        assert!(warnings.is_empty());
        assert_eq!(cfg.dropout, 0.02);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.strategies.len(), 4);
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = ExperimentConfig::from_json("{\n  \"rounds\": 2,\n  \"pases\": 5\n}").unwrap_err();
        assert_eq!(err.line, Some(3));
        assert!(err.message.contains("pases"), "{err}");
    }

    #[test]
    fn range_error_reports_its_line() {
        let text = "{\n  \"rounds\": 1,\n  \"train\": {\n    \"epochs\": 3,\n    \"learning_rate\": -1\n  }\n}";
        let err = ExperimentConfig::from_json(text).unwrap_err();
        assert_eq!(err.line, Some(5));
        assert!(err.to_string().starts_with("line 5: learning_rate"));
    }

    #[test]
    fn synthetic_spec_errors_point_at_dataset() {
        let text = "{\n \"dataset\": {\n  \"synthetic\": {\"d\": 2, \"latent_dim\": 3}\n }\n}";
        let err = ExperimentConfig::from_json(text).unwrap_err();
        assert_eq!(err.line, Some(3));
    }

    #[test]
    fn repeated_strategies_are_dropped_with_warning() {
        let (cfg, warnings) =
            ExperimentConfig::from_json(r#"{"strategies": ["random", "joint_entropy", "random"]}"#).unwrap();
        assert_eq!(cfg.strategies, vec![Strategy::Random, Strategy::JointEntropy]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetSource::Dir(DirSource { path: "data".into(), triplets: 10, seed: 4 });
        cfg.candidate_cap = None;
        let (back, _) = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
