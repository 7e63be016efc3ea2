use std::collections::BTreeSet;
use std::sync::Arc;

use batchal_core::config::{DatasetSource, ExperimentConfig, SyntheticSource};
use batchal_core::experiment::{read_runs_csv, read_summary_csv, run_experiment, summarize, write_runs_csv, write_summary_csv};
use batchal_core::session::{ActiveLearningSession, Architecture, RoundConfig, SessionConfig, TrainSettings};
use batchal_core::{Activation, Dataset, Strategy, SyntheticSpec};

fn dataset() -> Arc<Dataset> {
    let spec = SyntheticSpec { n: 60, d: 6, latent_dim: 2, seed: 21, ..Default::default() };
    Arc::new(Dataset::synthetic(&spec, 2_000, None).unwrap())
}

fn session_config(init_pool: usize) -> SessionConfig {
    SessionConfig {
        architecture: Architecture { hidden: vec![16, 16], embedding_dim: 4, activation: Activation::Relu },
        train: TrainSettings { init_epochs: 60, epochs: 10, sgd_batch: 50, learning_rate: 3e-3, dropout: 0.02 },
        init_pool,
        ..SessionConfig::default()
    }
}

fn round(strategy: Strategy) -> RoundConfig {
    RoundConfig { passes: 20, dropout: 0.1, candidate_cap: Some(400), ..RoundConfig::new(strategy, 25) }
}

#[test]
fn pretrained_model_beats_coin_flip() {
    let s = ActiveLearningSession::init(dataset(), session_config(200), 0).unwrap();
    assert_eq!(s.round(), 0);
    assert_eq!(s.labeled().len(), 200);
    assert!(s.history()[0].accuracy > 0.5, "{}", s.history()[0].accuracy);
}

#[test]
fn same_seed_gives_same_session() {
    let a = ActiveLearningSession::init(dataset(), session_config(100), 5).unwrap();
    let b = ActiveLearningSession::init(dataset(), session_config(100), 5).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(a.labeled(), b.labeled());
    assert_eq!(a.unlabeled(), b.unlabeled());
    assert!(a.history()[0].same_outcome(&b.history()[0]));
}

#[test]
fn rounds_conserve_the_pool_and_never_repeat() {
    for strategy in Strategy::ALL {
        let mut s = ActiveLearningSession::init(dataset(), session_config(50), 3).unwrap();
        let universe = s.pool_size();
        let mut seen: BTreeSet<usize> = s.labeled().iter().map(|(id, _)| *id).collect();
        for r in 1..=4 {
            let rec = s.run_round(&round(strategy)).unwrap();
            assert_eq!(rec.round, r);
            assert_eq!(rec.labeled, 50 + r * 25);
            assert!((0.0..=1.0).contains(&rec.accuracy));
            assert_eq!(s.labeled().len() + s.unlabeled().len(), universe);
            for id in &rec.chosen {
                assert!(seen.insert(*id), "{strategy}: id {id} annotated twice");
                assert!(!s.unlabeled().contains(id));
            }
        }
        let labeled: BTreeSet<usize> = s.labeled().iter().map(|(id, _)| *id).collect();
        assert_eq!(labeled, seen);
        assert!(labeled.is_disjoint(s.unlabeled()));
    }
}

#[test]
fn rounds_are_reproducible() {
    for strategy in Strategy::ALL {
        let run = || {
            let mut s = ActiveLearningSession::init(dataset(), session_config(60), 9).unwrap();
            (0..3).map(|_| s.run_round(&round(strategy)).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_outcome(y)), "{strategy}");
        if strategy.needs_dropout_samples() {
            assert!(a.iter().all(|r| r.batch_entropy.is_some()));
        }
    }
}

#[test]
fn proposals_do_not_mutate_and_repeat() {
    let s = ActiveLearningSession::init(dataset(), session_config(40), 1).unwrap();
    let p1 = s.propose(&round(Strategy::JointEntropy)).unwrap();
    let p2 = s.propose(&round(Strategy::JointEntropy)).unwrap();
    assert_eq!(p1.items, p2.items);
    assert_eq!(p1.selection.chosen, p2.selection.chosen);
    assert_eq!(s.round(), 0);
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticSource { n: 40, d: 5, latent_dim: 2, triplets: 1_500, ..Default::default() }),
        strategies: vec![Strategy::Random, Strategy::JointEntropy],
        rounds: 2,
        batch_size: 20,
        passes: 10,
        init_pool: 60,
        seeds: vec![3, 4, 7],
        ..ExperimentConfig::default()
    };
    cfg.model = Architecture { hidden: vec![12], embedding_dim: 3, activation: Activation::Relu };
    cfg.train = TrainSettings { init_epochs: 20, epochs: 5, sgd_batch: 40, learning_rate: 3e-3, dropout: 0.02 };
    cfg
}

#[test]
fn experiments_are_deterministic_and_summaries_recompute() {
    let cfg = tiny_experiment();
    let ds = Arc::new(cfg.dataset.load(None).unwrap());
    let a = run_experiment(&cfg, ds.clone()).unwrap();
    let b = run_experiment(&cfg, ds).unwrap();
    let (ra, rb) = (a.rows(), b.rows());
    assert_eq!(ra.len(), 2 * 3 * 3);
    assert!(ra.iter().zip(&rb).all(|(x, y)| x.same_outcome(y)));

    // every strategy starts from the same round-0 model per seed
    for seed in &cfg.seeds {
        let r0: Vec<f64> = ra.iter().filter(|r| r.round == 0 && r.seed == *seed).map(|r| r.accuracy).collect();
        assert!(r0.windows(2).all(|w| w[0] == w[1]));
    }

    // independent recomputation of mean and sample std
    for s in a.summary() {
        let xs: Vec<f64> = ra.iter().filter(|r| r.strategy == s.strategy && r.round == s.round).map(|r| r.accuracy).collect();
        let mut mean = 0.0;
        for (i, x) in xs.iter().enumerate() {
            mean += (x - mean) / (i + 1) as f64;
        }
        let m2: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        let std = (m2 / (xs.len() - 1) as f64).sqrt();
        assert!((s.accuracy_mean - mean).abs() <= 1e-12);
        assert!((s.accuracy_std - std).abs() <= 1e-12);
    }

    let mut raw = Vec::new();
    write_runs_csv(&mut raw, &ra).unwrap();
    let back = read_runs_csv(raw.as_slice()).unwrap();
    assert_eq!(back, ra);
    let mut agg = Vec::new();
    write_summary_csv(&mut agg, &summarize(&back)).unwrap();
    assert_eq!(read_summary_csv(agg.as_slice()).unwrap(), a.summary());
}

#[test]
fn zero_rounds_and_single_seed() {
    let cfg = ExperimentConfig { rounds: 0, seeds: vec![1], ..tiny_experiment() };
    let ds = Arc::new(cfg.dataset.load(None).unwrap());
    let res = run_experiment(&cfg, ds).unwrap();
    assert!(res.rows().iter().all(|r| r.round == 0));
    assert!(res.summary().iter().all(|s| s.accuracy_std == 0.0));
}
