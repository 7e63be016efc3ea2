//! Subcommands behind the `batchal` binary.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use batchal_core::data::{Mixing, Nonlinearity};
use batchal_core::experiment::{run_experiment_with, save_runs_csv, save_summary_csv};
use batchal_core::posterior::{sample_margins, Candidate};
use batchal_core::rng::{derive_seed, stream};
use batchal_core::session::RoundRecord;
use batchal_core::{
    diagnose_margin, ActiveLearningSession, DataError, Dataset, DatasetSource, DiagnosticsError, ExperimentConfig,
    Strategy, SyntheticSource,
};
use batchal_service::{AppState, DatasetEntry, Manifest};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const OUT_DIR_ENV: &str = "BATCHAL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "batchal",
    version,
    about = "Batch active metric learning with joint-entropy triplet selection",
    after_help = "Output goes to --out, else the config's \"output\" field, else $BATCHAL_OUT_DIR, else ./out.\n\
                  Exit codes: 0 success, 2 usage or config error, 1 runtime error."
)]
pub struct Cli {
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (features.csv, dissim.csv, triplets.jsonl).
    Synth(SynthArgs),
    /// Run the configured experiment.
    Run(RunArgs),
    /// Run the experiment and print final-round accuracy per strategy.
    Compare(RunArgs),
    /// QQ and histogram data for one triplet's sampled margins.
    Diagnose(DiagnoseArgs),
    /// Serve the annotation HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 150)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    #[arg(long = "latent-dim", short = 'L', default_value_t = 3)]
    pub latent_dim: usize,
    #[arg(long, value_enum, default_value = "tanh")]
    pub nonlinearity: NonlinearityArg,
    #[arg(long, value_enum, default_value = "random")]
    pub mixing: MixingArg,
    /// Feature noise scale.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 20_000)]
    pub triplets: usize,
    /// Smallest accepted distance gap; defaults to 1e-6 times the median distance.
    #[arg(long)]
    pub min_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum NonlinearityArg {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum MixingArg {
    Random,
    Identity,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Comma-separated strategies, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Index into the dataset's triplet list.
    #[arg(long)]
    pub triplet: usize,
    /// Dropout passes; defaults to the config's.
    #[arg(long = "passes", short = 'K')]
    pub passes: Option<usize>,
    /// Dropout probability; defaults to the config's.
    #[arg(long, short = 'p')]
    pub dropout: Option<f64>,
    /// Active-learning rounds to run first, with the config's first strategy.
    #[arg(long, default_value_t = 0)]
    pub rounds: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = batchal_service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Register a dataset directory as NAME=DIR; repeatable. An optional
    /// manifest.json in DIR supplies labels and image URLs.
    #[arg(long = "data", value_parser = parse_named_dir)]
    pub data: Vec<(String, PathBuf)>,
    /// Static files to serve under /ui.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

fn parse_named_dir(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
        _ => Err(format!("expected NAME=DIR, got {s:?}")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn say(quiet: bool, msg: impl std::fmt::Display) {
    if !quiet {
        eprintln!("{msg}");
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => synth(&cli, a),
        Command::Run(a) => experiment(&cli, a, false),
        Command::Compare(a) => experiment(&cli, a, true),
        Command::Diagnose(a) => diagnose(&cli, a),
        Command::Serve(a) => serve(&cli, a),
    }
}

/// Loads the config (or defaults) and applies global overrides.
fn load_config(cli: &Cli) -> Result<(ExperimentConfig, Option<PathBuf>), CliError> {
    let (mut cfg, warnings, base) = match &cli.config {
        Some(path) => {
            let (cfg, warnings) =
                ExperimentConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            (cfg, warnings, path.parent().map(Path::to_path_buf))
        }
        None => (ExperimentConfig::default(), Vec::new(), None),
    };
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok((cfg, base))
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<(), CliError> {
    let src = SyntheticSource {
        n: a.n,
        d: a.d,
        latent_dim: a.latent_dim,
        nonlinearity: match a.nonlinearity {
            NonlinearityArg::Tanh => Nonlinearity::Tanh,
            NonlinearityArg::Identity => Nonlinearity::Identity,
        },
        mixing: match a.mixing {
            MixingArg::Random => Mixing::Random,
            MixingArg::Identity => Mixing::Identity,
        },
        feature_noise: a.noise,
        seed: cli.seed.unwrap_or(0),
        triplets: a.triplets,
        min_gap: a.min_gap,
    };
    src.spec().validate().map_err(usage)?;
    let ds = DatasetSource::Synthetic(src).load(None).map_err(|e| match e {
        DataError::ExhaustedSampling { .. } => usage(e),
        other => CliError::Runtime(other.into()),
    })?;
    let dir = out_dir(cli, None);
    create_dir(&dir)?;
    write_dataset(&dir, &ds)?;
    say(
        cli.quiet,
        format_args!("wrote {} objects and {} triplets to {}", ds.features.n(), ds.triplets.len(), dir.display()),
    );
    Ok(())
}

fn write_dataset(dir: &Path, ds: &Dataset) -> anyhow::Result<()> {
    ds.features.write_csv(&dir.join("features.csv"))?;
    if let batchal_core::GroundTruth::DissimMatrix(m) = &ds.truth {
        m.write_csv(&dir.join("dissim.csv"))?;
    }
    batchal_core::data::save_triplets(&dir.join("triplets.jsonl"), &ds.triplets)?;
    Ok(())
}

#[derive(Serialize)]
struct RoundLine<'a> {
    strategy: Strategy,
    seed: u64,
    record: &'a RoundRecord,
}

fn experiment(cli: &Cli, a: &RunArgs, compare: bool) -> Result<(), CliError> {
    let (mut cfg, base) = load_config(cli)?;
    if let Some(s) = &a.strategies {
        cfg.strategies = s.clone();
        for w in cfg.dedup_strategies() {
            eprintln!("warning: {w}");
        }
    }
    if let Some(r) = a.rounds {
        cfg.rounds = r;
    }
    cfg.validate().map_err(usage)?;
    let dir = out_dir(cli, Some(&cfg));

    let dataset = Arc::new(cfg.dataset.load(base.as_deref()).context("loading dataset")?);
    say(
        cli.quiet,
        format_args!(
            "{} objects, {} triplets; {} strategies x {} seeds x {} rounds",
            dataset.features.n(),
            dataset.triplets.len(),
            cfg.strategies.len(),
            cfg.seeds.len(),
            cfg.rounds
        ),
    );
    let quiet = cli.quiet;
    let progress = move |s: Strategy, seed: u64, r: &RoundRecord| {
        if !quiet {
            eprintln!("{s:>14} seed {seed:<3} round {:<3} accuracy {:.4}", r.round, r.accuracy);
        }
    };
    let result = run_experiment_with(&cfg, dataset, &progress).context("experiment failed")?;

    create_dir(&dir)?;
    save_runs_csv(&dir.join("runs.csv"), &result.rows()).context("writing runs.csv")?;
    let summary = result.summary();
    save_summary_csv(&dir.join("summary.csv"), &summary).context("writing summary.csv")?;
    let mut log = Vec::new();
    for h in &result.histories {
        for record in &h.records {
            serde_json::to_writer(&mut log, &RoundLine { strategy: h.strategy, seed: h.seed, record })
                .context("encoding round log")?;
            log.push(b'\n');
        }
    }
    fs::write(dir.join("rounds.jsonl"), log).context("writing rounds.jsonl")?;
    fs::write(dir.join("config.json"), cfg.to_json()).context("writing config.json")?;

    if compare {
        let mut stdout = std::io::stdout().lock();
        let random = result.mean_accuracy(Strategy::Random, cfg.rounds);
        writeln!(stdout, "{:<14} {:>8} {:>8} {:>10}", "strategy", "mean", "std", "vs random").ok();
        for row in summary.iter().filter(|r| r.round == cfg.rounds) {
            let gap = random.map(|r| format!("{:+.4}", row.accuracy_mean - r)).unwrap_or_else(|| "-".into());
            writeln!(stdout, "{:<14} {:>8.4} {:>8.4} {:>10}", row.strategy, row.accuracy_mean, row.accuracy_std, gap)
                .ok();
        }
    }
    say(cli.quiet, format_args!("results in {}", dir.display()));
    Ok(())
}

#[derive(Serialize)]
struct Fit {
    triplet: usize,
    passes: usize,
    dropout: f64,
    rounds: usize,
    slope: f64,
    intercept: f64,
    r_squared: f64,
    mean: f64,
    std: f64,
}

fn diagnose(cli: &Cli, a: &DiagnoseArgs) -> Result<(), CliError> {
    let (mut cfg, base) = load_config(cli)?;
    if let Some(k) = a.passes {
        cfg.passes = k;
    }
    if let Some(p) = a.dropout {
        cfg.dropout = p;
    }
    if cfg.passes < 2 {
        return Err(usage(format!("need at least 2 passes, got {}", cfg.passes)));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(usage(format!("dropout {} outside [0, 1)", cfg.dropout)));
    }
    let dataset = Arc::new(cfg.dataset.load(base.as_deref()).context("loading dataset")?);
    let Some(&triplet) = dataset.triplets.get(a.triplet) else {
        return Err(usage(format!("triplet {} out of range ({} triplets)", a.triplet, dataset.triplets.len())));
    };
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let mut session =
        ActiveLearningSession::init(dataset.clone(), cfg.session_config(), seed).context("pretraining")?;
    if a.rounds > 0 {
        let strategy = *cfg.strategies.first().ok_or_else(|| usage("no strategy configured"))?;
        let round_cfg = cfg.round_config(strategy);
        for _ in 0..a.rounds {
            session.run_round(&round_cfg).context("active-learning round")?;
        }
    }

    let samples = sample_margins(
        session.params(),
        &dataset.features,
        &[Candidate { id: a.triplet, triplet }],
        cfg.passes,
        cfg.dropout,
        derive_seed(seed, &[stream::DIAGNOSE, a.triplet as u64]),
    )
    .context("sampling margins")?;
    let diag = match diagnose_margin(samples.samples().row(0)) {
        Ok(d) => d,
        Err(DiagnosticsError::DegenerateVariance) => {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "sampled margins have zero variance (dropout {}); nothing to diagnose",
                cfg.dropout
            )))
        }
        Err(e) => return Err(CliError::Runtime(e.into())),
    };

    let dir = out_dir(cli, Some(&cfg));
    create_dir(&dir)?;
    let mut qq = String::from("theoretical,observed\n");
    for (t, o) in &diag.qq.pairs {
        qq.push_str(&format!("{t},{o}\n"));
    }
    fs::write(dir.join("qq.csv"), qq).context("writing qq.csv")?;
    let mut hist = String::from("left,right,count,density,normal_density\n");
    for b in &diag.histogram {
        hist.push_str(&format!("{},{},{},{},{}\n", b.left, b.right, b.count, b.density, b.normal_density));
    }
    fs::write(dir.join("histogram.csv"), hist).context("writing histogram.csv")?;
    let fit = Fit {
        triplet: a.triplet,
        passes: cfg.passes,
        dropout: cfg.dropout,
        rounds: a.rounds,
        slope: diag.qq.slope,
        intercept: diag.qq.intercept,
        r_squared: diag.qq.r_squared,
        mean: diag.qq.mean,
        std: diag.qq.std,
    };
    fs::write(dir.join("fit.json"), serde_json::to_string_pretty(&fit).context("encoding fit")?)
        .context("writing fit.json")?;
    say(
        cli.quiet,
        format_args!("triplet {}: slope {:.4}, R² {:.4}; files in {}", a.triplet, fit.slope, fit.r_squared, dir.display()),
    );
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<(), CliError> {
    let (cfg, base) = load_config(cli)?;
    let mut datasets = HashMap::new();
    for (name, dir) in &a.data {
        if datasets.contains_key(name) {
            return Err(usage(format!("dataset {name} registered twice")));
        }
        let ds = Dataset::load_dir(dir, configured_triplets(&cfg), 0)
            .with_context(|| format!("loading dataset {name} from {}", dir.display()))?;
        let manifest_path = dir.join("manifest.json");
        let manifest = if manifest_path.exists() {
            Manifest::load(&manifest_path).map_err(anyhow::Error::msg)?
        } else {
            Manifest::default()
        };
        datasets.insert(name.clone(), DatasetEntry { dataset: Arc::new(ds), manifest });
    }
    // the config's own dataset is always available as "default"
    if !datasets.contains_key("default") {
        let ds = cfg.dataset.load(base.as_deref()).context("loading the configured dataset")?;
        datasets.insert("default".into(), DatasetEntry { dataset: Arc::new(ds), manifest: Manifest::default() });
    }
    let app = AppState::new(datasets);
    let names = app.dataset_names();
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("cannot bind {}:{}", a.host, a.port))?;
        let addr = listener.local_addr()?;
        say(cli.quiet, format_args!("listening on http://{addr} with datasets {names:?}"));
        tracing::info!(%addr, "serving");
        batchal_service::serve(listener, app, a.ui.clone()).await.context("server stopped")
    })?;
    Ok(())
}

fn configured_triplets(cfg: &ExperimentConfig) -> usize {
    match &cfg.dataset {
        DatasetSource::Synthetic(s) => s.triplets,
        DatasetSource::Dir(d) => d.triplets,
    }
}
