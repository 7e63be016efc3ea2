//! Multi-seed, multi-strategy experiment driver and its CSV tables.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{DataError, Dataset};
use crate::session::{ActiveLearningSession, RoundRecord, SessionError};
use crate::strategies::Strategy;

/// One (strategy, seed, round) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub strategy: Strategy,
    pub round: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub batch_entropy: Option<f64>,
    pub select_ms: f64,
    pub train_ms: f64,
}

impl RunRow {
    pub fn from_record(strategy: Strategy, seed: u64, r: &RoundRecord) -> Self {
        Self {
            strategy,
            round: r.round,
            seed,
            accuracy: r.accuracy,
            batch_entropy: r.batch_entropy,
            select_ms: r.select_ms,
            train_ms: r.train_ms,
        }
    }

    /// Equality ignoring the timing columns.
    pub fn same_outcome(&self, other: &RunRow) -> bool {
        self.strategy == other.strategy
            && self.round == other.round
            && self.seed == other.seed
            && self.accuracy.to_bits() == other.accuracy.to_bits()
            && self.batch_entropy.map(f64::to_bits) == other.batch_entropy.map(f64::to_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub round: usize,
    pub seeds: usize,
    pub accuracy_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub accuracy_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub strategy: Strategy,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub histories: Vec<RunHistory>,
}

impl ExperimentResult {
    /// Rows sorted by strategy (config order), seed (config order), round.
    pub fn rows(&self) -> Vec<RunRow> {
        self.histories
            .iter()
            .flat_map(|h| h.records.iter().map(move |r| RunRow::from_record(h.strategy, h.seed, r)))
            .collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.rows())
    }

    /// Mean accuracy of a strategy at a round, if present.
    pub fn mean_accuracy(&self, strategy: Strategy, round: usize) -> Option<f64> {
        self.summary().into_iter().find(|s| s.strategy == strategy && s.round == round).map(|s| s.accuracy_mean)
    }
}

pub type Progress<'a> = &'a (dyn Fn(Strategy, u64, &RoundRecord) + Sync);

pub fn run_experiment(config: &ExperimentConfig, dataset: Arc<Dataset>) -> Result<ExperimentResult, SessionError> {
    run_experiment_with(config, dataset, &|_, _, _| {})
}

/// Every strategy for a seed starts from the same initial session; cells
/// run in parallel and are merged in config order.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    dataset: Arc<Dataset>,
    progress: Progress<'_>,
) -> Result<ExperimentResult, SessionError> {
    let session_cfg = config.session_config();
    let starts: Vec<ActiveLearningSession> = config
        .seeds
        .par_iter()
        .map(|&seed| ActiveLearningSession::init(dataset.clone(), session_cfg.clone(), seed))
        .collect::<Result<_, _>>()?;

    let cells: Vec<(usize, usize)> =
        (0..config.strategies.len()).flat_map(|s| (0..config.seeds.len()).map(move |k| (s, k))).collect();
    let histories = cells
        .par_iter()
        .map(|&(s, k)| {
            let strategy = config.strategies[s];
            let seed = config.seeds[k];
            let mut session = starts[k].clone();
            progress(strategy, seed, &session.history()[0]);
            let round_cfg = config.round_config(strategy);
            for _ in 0..config.rounds {
                let rec = session.run_round(&round_cfg)?;
                progress(strategy, seed, &rec);
            }
            Ok(RunHistory { strategy, seed, records: session.history().to_vec() })
        })
        .collect::<Result<Vec<_>, SessionError>>()?;
    Ok(ExperimentResult { histories })
}

/// Mean and sample std of accuracy per (strategy, round), in first-seen
/// order of strategies and ascending rounds.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Strategy, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.strategy, r.round)) {
            keys.push((r.strategy, r.round));
        }
    }
    let order: Vec<Strategy> = keys.iter().fold(Vec::new(), |mut acc, (s, _)| {
        if !acc.contains(s) {
            acc.push(*s);
        }
        acc
    });
    keys.sort_by_key(|(s, r)| (order.iter().position(|o| o == s), *r));
    keys.into_iter()
        .map(|(strategy, round)| {
            let acc: Vec<f64> =
                rows.iter().filter(|r| r.strategy == strategy && r.round == round).map(|r| r.accuracy).collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() < 2 {
                0.0
            } else {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            SummaryRow { strategy, round, seeds: acc.len(), accuracy_mean: mean, accuracy_std: std }
        })
        .collect()
}

fn write_rows<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

fn io_err(path: &Path, e: csv::Error) -> DataError {
    DataError::Io { path: path.to_path_buf(), source: e.into() }
}

pub fn write_runs_csv<W: Write>(writer: W, rows: &[RunRow]) -> Result<(), csv::Error> {
    write_rows(writer, rows)
}

pub fn read_runs_csv<R: Read>(reader: R) -> Result<Vec<RunRow>, csv::Error> {
    read_rows(reader)
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<(), csv::Error> {
    write_rows(writer, rows)
}

pub fn read_summary_csv<R: Read>(reader: R) -> Result<Vec<SummaryRow>, csv::Error> {
    read_rows(reader)
}

pub fn save_runs_csv(path: &Path, rows: &[RunRow]) -> Result<(), DataError> {
    let f = std::fs::File::create(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    write_runs_csv(f, rows).map_err(|e| io_err(path, e))
}

pub fn load_runs_csv(path: &Path) -> Result<Vec<RunRow>, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    read_runs_csv(f).map_err(|e| io_err(path, e))
}

pub fn save_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), DataError> {
    let f = std::fs::File::create(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    write_summary_csv(f, rows).map_err(|e| io_err(path, e))
}

pub fn load_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    read_summary_csv(f).map_err(|e| io_err(path, e))
}
