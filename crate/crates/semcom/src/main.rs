//! Command-line front end: dataset generation, training, evaluation, sweeps
//! and the self-check battery. Exit codes: 0 success, 1 validation error,
//! 2 runtime failure (including training divergence), 3 self-check failure.
//! Set `SEMCOM_LOG` (e.g. `SEMCOM_LOG=info`) for progress logging.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use semcom::config::{ConfigError, ExperimentConfig};
use semcom::dataset::{DatasetError, TwoViewDataset};
use semcom::nets::Scheme;
use semcom::parallel::{is_parallel, try_par_map};
use semcom::retrieval::EvalError;
use semcom::selfcheck::run_selfcheck;
use semcom::sweep::{
    base_trial, eval_rows, run_sweep, write_rows, SweepAxis, SweepError,
};
use semcom::training::{write_metric_log, TrainError, Trainer};

#[derive(Parser)]
#[command(
    name = "semcom",
    version,
    about = "Two-device semantic communication over a shared channel: train, evaluate, sweep"
)]
struct Cli {
    /// Worker threads for parallel sections (0 = one per core). Ignored in
    /// sequential builds.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic two-view dataset and write it to --out.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one scheme's full pipeline for each seed, caching stage
    /// checkpoints under <out>/checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = Scheme::from_str)]
        scheme: Scheme,
        /// Comma-separated seed list; defaults to the config's eval.seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate previously trained checkpoints over the configured SNR grid
    /// and write a results CSV. Fails if the checkpoints are missing.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = Scheme::from_str)]
        scheme: Scheme,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory holding the checkpoints (from `train`); the
        /// results CSV lands next to them.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one sweep axis end to end (training as needed) and merge all rows
    /// into a deterministic CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = SweepAxis::from_str)]
        axis: SweepAxis,
        /// Comma-separated schemes; defaults per axis (all four for
        /// snr/bandwidth, noma for lambda_cos/snr_mismatch).
        #[arg(long, value_delimiter = ',', value_parser = Scheme::from_str)]
        scheme: Option<Vec<Scheme>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify gradients, channel statistics, closed forms and retrieval
    /// ranking; nonzero exit on any failure.
    Selfcheck,
}

enum CliError {
    Validation(String),
    Runtime(String),
    SelfCheckFailed,
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::SelfCheckFailed => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
            CliError::SelfCheckFailed => write!(f, "self-check failed"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::StageOrder(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Config(c) => c.into(),
            SweepError::Invalid(m) => CliError::Validation(m),
            SweepError::Train(t) => t.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; bad flags are
            // validation errors.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEMCOM_LOG", "warn"))
        .format_timestamp(None)
        .init();
    init_worker_pool(cli.jobs);

    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::SelfCheckFailed) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.code())
        }
    }
}

fn init_worker_pool(jobs: usize) {
    if !is_parallel() {
        if jobs != 0 {
            log::debug!("--jobs ignored: this build runs sequentially");
        }
        return;
    }
    #[cfg(feature = "parallel")]
    if jobs != 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            log::debug!("worker pool already initialized: {e}");
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData { config, out } => cmd_gen_data(&config, &out),
        Cmd::Train {
            config,
            scheme,
            seeds,
            out,
        } => cmd_train(&config, scheme, seeds, &out),
        Cmd::Eval {
            config,
            scheme,
            seeds,
            out,
        } => cmd_eval(&config, scheme, seeds, &out),
        Cmd::Sweep {
            config,
            axis,
            scheme,
            seeds,
            out,
        } => cmd_sweep(&config, axis, scheme, seeds, &out),
        Cmd::Selfcheck => cmd_selfcheck(),
    }
}

fn resolve_seeds(flag: Option<Vec<u64>>, cfg: &ExperimentConfig) -> Result<Vec<u64>, CliError> {
    let seeds = flag.unwrap_or_else(|| cfg.eval.seeds.clone());
    let mut seen = std::collections::BTreeSet::new();
    for &s in &seeds {
        if !seen.insert(s) {
            return Err(CliError::Validation(format!("seed {s} appears twice")));
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Validation("no seeds given".into()));
    }
    Ok(seeds)
}

/// Copies the exact configuration next to the artifacts it produced, so
/// every output directory is self-describing and reproducible.
fn copy_config(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    Ok(cfg.save(&out.join("config.json"))?)
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    fs::create_dir_all(out)?;
    let data = TwoViewDataset::generate(cfg.dataset.clone())?;
    data.save(out)?;
    copy_config(&cfg, out)?;
    println!(
        "dataset {}: {} train rows / {} identities, {} test rows / {} identities -> {}",
        cfg.data_tag(),
        data.train().rows(),
        data.train().num_identities(),
        data.test().rows(),
        data.test().num_identities(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    scheme: Scheme,
    seeds: Option<Vec<u64>>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    cfg.validate_for(scheme)?;
    let seeds = resolve_seeds(seeds, &cfg)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let data = TwoViewDataset::generate(cfg.dataset.clone())?;

    try_par_map(seeds.clone(), |seed| -> Result<(), CliError> {
        let trial = base_trial(&cfg, scheme, seed);
        let mut trainer = Trainer::new(
            trial.net_spec(&cfg),
            trial.train_config(&cfg),
            seed,
            cfg.data_tag(),
        )?;
        trainer.run_pipeline(data.train(), Some(&ckpt_dir))?;
        write_metric_log(
            &out.join(format!("metrics_{scheme}_seed{seed}.csv")),
            &trainer.log,
        )?;
        Ok(())
    })?;

    copy_config(&cfg, out)?;
    println!(
        "trained {scheme} for seeds {seeds:?}; checkpoints in {}",
        ckpt_dir.display()
    );
    Ok(())
}

fn cmd_eval(
    config: &Path,
    scheme: Scheme,
    seeds: Option<Vec<u64>>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    cfg.validate_for(scheme)?;
    let seeds = resolve_seeds(seeds, &cfg)?;
    let ckpt_dir = out.join("checkpoints");
    if !ckpt_dir.is_dir() {
        return Err(CliError::Validation(format!(
            "no checkpoint directory at {}; run `semcom train` first",
            ckpt_dir.display()
        )));
    }
    let data = TwoViewDataset::generate(cfg.dataset.clone())?;

    let per_seed = try_par_map(seeds, |seed| {
        let trial = base_trial(&cfg, scheme, seed);
        let spec = trial.net_spec(&cfg);
        let mut trainer = Trainer::new(
            spec.clone(),
            trial.train_config(&cfg),
            seed,
            cfg.data_tag(),
        )?;
        let last = *trainer
            .pipeline_stages()
            .last()
            .expect("every scheme has stages");
        if !trainer
            .try_resume(&ckpt_dir, last)
            .map_err(CliError::from)?
        {
            return Err(CliError::Validation(format!(
                "missing or stale checkpoint {} for seed {seed}",
                trainer.checkpoint_path(&ckpt_dir, last).display()
            )));
        }
        eval_rows(&trial, &spec, &trainer.store, &data).map_err(CliError::from)
    })?;

    let mut rows: Vec<_> = per_seed.into_iter().flatten().collect();
    semcom::sweep::sort_rows(&mut rows);
    let csv = out.join(format!("results_{scheme}.csv"));
    write_rows(&csv, &rows)?;
    copy_config(&cfg, out)?;
    println!("{} rows -> {}", rows.len(), csv.display());
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    axis: SweepAxis,
    schemes: Option<Vec<Scheme>>,
    seeds: Option<Vec<u64>>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let schemes = schemes.unwrap_or_else(|| axis.default_schemes().to_vec());
    let seeds = resolve_seeds(seeds, &cfg)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let data = TwoViewDataset::generate(cfg.dataset.clone())?;

    let rows = run_sweep(&cfg, axis, &schemes, &seeds, &data, Some(&ckpt_dir))?;
    let csv = out.join(format!("results_{axis}.csv"));
    write_rows(&csv, &rows)?;
    copy_config(&cfg, out)?;
    println!("{} rows -> {}", rows.len(), csv.display());
    Ok(())
}

fn cmd_selfcheck() -> Result<(), CliError> {
    let report = run_selfcheck();
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::SelfCheckFailed)
    }
}
