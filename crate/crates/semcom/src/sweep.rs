//! Sweep planning and execution.
//!
//! A sweep expands a base configuration along one axis into independent
//! trials. Each trial trains one model (resuming from cached stage
//! checkpoints where fingerprints agree) and evaluates it at every SNR on
//! its test list. Trials share nothing mutable, so they run through
//! [`try_par_map`] and the rows are merged afterwards under a total sort
//! order — the output CSV is identical whatever the worker count.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::TwoViewDataset;
use crate::nets::{Adaptation, NetSpec, Scheme};
use crate::parallel::try_par_map;
use crate::retrieval::{
    csi_mode_label, evaluate_scheme, write_metrics_csv, EvalError, MetricsRow,
};
use crate::training::{SnrTrain, TrainConfig, TrainError, Trainer};

/// Total symbol budgets compared by the bandwidth axis.
pub const BANDWIDTH_GRID: [usize; 4] = [16, 32, 64, 128];
/// Cosine-penalty weights swept by the lambda_cos axis.
pub const LAMBDA_COS_GRID: [f64; 6] = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0];
/// Fixed training SNRs compared against the SNR-aware model.
pub const MISMATCH_TRAIN_SNRS_DB: [f64; 4] = [-6.0, 0.0, 6.0, 12.0];
/// Rate-penalty weights tried per digital trial; the best top-1 per
/// (q, snr_test, seed) is reported, idealizing a transmitter that picks its
/// operating point to suit the channel.
pub const LAMBDA_RATE_GRID: [f64; 5] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// One model per (scheme, seed) at the configured training SNR,
    /// evaluated across the whole test grid.
    Snr,
    /// The snr protocol repeated at each total symbol budget, evaluated at
    /// the training SNR.
    Bandwidth,
    /// Cosine-penalty grid for two-device schemes, evaluated at the training
    /// SNR.
    LambdaCos,
    /// Fixed-SNR models against one SNR-aware model trained on the range
    /// spanned by the test grid, all evaluated across that grid.
    SnrMismatch,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [
        SweepAxis::Snr,
        SweepAxis::Bandwidth,
        SweepAxis::LambdaCos,
        SweepAxis::SnrMismatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr",
            SweepAxis::Bandwidth => "bandwidth",
            SweepAxis::LambdaCos => "lambda_cos",
            SweepAxis::SnrMismatch => "snr_mismatch",
        }
    }

    /// Schemes swept when the CLI does not name any: the trend axes default
    /// to NOMA (the scheme the penalty and the adaptation study are about),
    /// the comparison axes to everything.
    pub fn default_schemes(self) -> &'static [Scheme] {
        match self {
            SweepAxis::Snr | SweepAxis::Bandwidth => &Scheme::ALL,
            SweepAxis::LambdaCos | SweepAxis::SnrMismatch => &[Scheme::Noma],
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "snr" => Ok(SweepAxis::Snr),
            "bandwidth" => Ok(SweepAxis::Bandwidth),
            "lambda_cos" => Ok(SweepAxis::LambdaCos),
            "snr_mismatch" => Ok(SweepAxis::SnrMismatch),
            other => Err(format!(
                "unknown axis '{other}' (expected snr|bandwidth|lambda_cos|snr_mismatch)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid sweep: {0}")]
    Invalid(String),
}

/// One unit of sweep work: train one model, test it at each listed SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub scheme: Scheme,
    pub seed: u64,
    pub q_total: usize,
    pub adaptation: Adaptation,
    pub snr_train: SnrTrain,
    pub lambda_cos: f64,
    pub lambda_rate: f64,
    pub snr_tests: Vec<f64>,
}

impl Trial {
    pub fn net_spec(&self, cfg: &ExperimentConfig) -> NetSpec {
        let mut spec = cfg.net_spec(self.scheme);
        spec.dims.symbol_budget = self.q_total;
        spec.adaptation = self.adaptation;
        spec
    }

    pub fn train_config(&self, cfg: &ExperimentConfig) -> TrainConfig {
        let mut t = cfg.training.clone();
        t.snr_train = self.snr_train;
        t.lambda_cos = self.lambda_cos;
        t.lambda_rate = self.lambda_rate;
        t
    }
}

/// The SNR a model trained at one operating point is evaluated at when the
/// axis varies something other than the test SNR.
fn matched_eval_snr(cfg: &ExperimentConfig) -> f64 {
    match cfg.training.snr_train {
        SnrTrain::Fixed(db) => db,
        SnrTrain::Range([lo, hi]) => 0.5 * (lo + hi),
    }
}

fn check_seeds(seeds: &[u64]) -> Result<(), SweepError> {
    if seeds.is_empty() {
        return Err(SweepError::Invalid("no seeds to sweep".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &s in seeds {
        if !seen.insert(s) {
            return Err(SweepError::Invalid(format!("seed {s} appears twice")));
        }
    }
    Ok(())
}

/// Expands `(config, axis, schemes, seeds)` into the full trial list, in a
/// fixed deterministic order.
pub fn plan(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    schemes: &[Scheme],
    seeds: &[u64],
) -> Result<Vec<Trial>, SweepError> {
    if schemes.is_empty() {
        return Err(SweepError::Invalid("no schemes to sweep".into()));
    }
    check_seeds(seeds)?;
    for &scheme in schemes {
        cfg.validate_for(scheme)?;
        match axis {
            SweepAxis::LambdaCos if !matches!(scheme, Scheme::Oma | Scheme::Noma) => {
                return Err(SweepError::Invalid(format!(
                    "axis lambda_cos needs two analog codewords to correlate; {scheme} has none"
                )));
            }
            SweepAxis::SnrMismatch if scheme == Scheme::Digital => {
                return Err(SweepError::Invalid(
                    "axis snr_mismatch varies the training SNR; the digital stage trains \
                     without a channel"
                        .into(),
                ));
            }
            _ => {}
        }
    }

    let base = &cfg.training;
    let mut trials = Vec::new();
    let mut push = |scheme: Scheme,
                    seed: u64,
                    q_total: usize,
                    adaptation: Adaptation,
                    snr_train: SnrTrain,
                    lambda_cos: f64,
                    snr_tests: &[f64]| {
        if scheme == Scheme::Digital {
            for &lambda_rate in &LAMBDA_RATE_GRID {
                trials.push(Trial {
                    scheme,
                    seed,
                    q_total,
                    adaptation: Adaptation::Fixed,
                    snr_train: base.snr_train,
                    lambda_cos: 0.0,
                    lambda_rate,
                    snr_tests: snr_tests.to_vec(),
                });
            }
        } else {
            trials.push(Trial {
                scheme,
                seed,
                q_total,
                adaptation,
                snr_train,
                lambda_cos: if matches!(scheme, Scheme::Oma | Scheme::Noma) {
                    lambda_cos
                } else {
                    0.0
                },
                lambda_rate: base.lambda_rate,
                snr_tests: snr_tests.to_vec(),
            });
        }
    };

    let grid = &cfg.eval.snr_test_db;
    match axis {
        SweepAxis::Snr => {
            for &scheme in schemes {
                for &seed in seeds {
                    push(
                        scheme,
                        seed,
                        cfg.channel.q_total,
                        cfg.model.adaptation,
                        base.snr_train,
                        base.lambda_cos,
                        grid,
                    );
                }
            }
        }
        SweepAxis::Bandwidth => {
            let at = [matched_eval_snr(cfg)];
            for &q in &BANDWIDTH_GRID {
                for &scheme in schemes {
                    for &seed in seeds {
                        push(
                            scheme,
                            seed,
                            q,
                            cfg.model.adaptation,
                            base.snr_train,
                            base.lambda_cos,
                            &at,
                        );
                    }
                }
            }
        }
        SweepAxis::LambdaCos => {
            let at = [matched_eval_snr(cfg)];
            for &lambda in &LAMBDA_COS_GRID {
                for &scheme in schemes {
                    for &seed in seeds {
                        push(
                            scheme,
                            seed,
                            cfg.channel.q_total,
                            cfg.model.adaptation,
                            base.snr_train,
                            lambda,
                            &at,
                        );
                    }
                }
            }
        }
        SweepAxis::SnrMismatch => {
            let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(lo < hi) {
                return Err(SweepError::Invalid(
                    "axis snr_mismatch needs a test grid spanning more than one SNR".into(),
                ));
            }
            for &scheme in schemes {
                for &seed in seeds {
                    for &db in &MISMATCH_TRAIN_SNRS_DB {
                        push(
                            scheme,
                            seed,
                            cfg.channel.q_total,
                            Adaptation::Fixed,
                            SnrTrain::Fixed(db),
                            base.lambda_cos,
                            grid,
                        );
                    }
                    push(
                        scheme,
                        seed,
                        cfg.channel.q_total,
                        Adaptation::SnrAware,
                        SnrTrain::Range([lo, hi]),
                        base.lambda_cos,
                        grid,
                    );
                }
            }
        }
    }
    Ok(trials)
}

/// The trial a bare `train`/`eval` command implies: everything straight from
/// the configuration, tested over the configured grid.
pub fn base_trial(cfg: &ExperimentConfig, scheme: Scheme, seed: u64) -> Trial {
    Trial {
        scheme,
        seed,
        q_total: cfg.channel.q_total,
        adaptation: if scheme == Scheme::Digital {
            Adaptation::Fixed
        } else {
            cfg.model.adaptation
        },
        snr_train: cfg.training.snr_train,
        lambda_cos: if matches!(scheme, Scheme::Oma | Scheme::Noma) {
            cfg.training.lambda_cos
        } else {
            0.0
        },
        lambda_rate: cfg.training.lambda_rate,
        snr_tests: cfg.eval.snr_test_db.clone(),
    }
}

/// Evaluates an already-trained store at each of the trial's test SNRs.
pub fn eval_rows(
    trial: &Trial,
    spec: &NetSpec,
    store: &crate::ad::ParamStore,
    data: &TwoViewDataset,
) -> Result<Vec<MetricsRow>, SweepError> {
    let snr_train_db = match (trial.scheme, trial.snr_train) {
        // The digital stage never sees the channel, so it has no training
        // SNR to report.
        (Scheme::Digital, _) => f64::NAN,
        (_, SnrTrain::Fixed(db)) => db,
        (_, SnrTrain::Range(_)) => f64::NAN,
    };
    let lambda_cos = match trial.scheme {
        Scheme::Oma | Scheme::Noma => trial.lambda_cos,
        _ => 0.0,
    };

    let mut rows = Vec::with_capacity(trial.snr_tests.len());
    for &snr_test_db in &trial.snr_tests {
        let out = evaluate_scheme(spec, store, data.test(), snr_test_db, trial.seed)?;
        rows.push(MetricsRow {
            scheme: trial.scheme,
            channel: spec.channel,
            csi_mode: csi_mode_label(spec).to_string(),
            snr_train_db,
            snr_test_db,
            q_total: trial.q_total,
            lambda_cos,
            seed: trial.seed,
            top1: out.top1,
            cos_sq: out.cos_sq,
            outage_rate: out.outage_rate,
        });
    }
    Ok(rows)
}

/// Trains the trial's model (reusing any matching stage checkpoints under
/// `ckpt_dir`) and evaluates it at each test SNR.
pub fn run_trial(
    cfg: &ExperimentConfig,
    trial: &Trial,
    data: &TwoViewDataset,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<MetricsRow>, SweepError> {
    let spec = trial.net_spec(cfg);
    let mut trainer = Trainer::new(
        spec.clone(),
        trial.train_config(cfg),
        trial.seed,
        cfg.data_tag(),
    )?;
    trainer.run_pipeline(data.train(), ckpt_dir)?;
    eval_rows(trial, &spec, &trainer.store, data)
}

fn scheme_rank(s: Scheme) -> usize {
    Scheme::ALL.iter().position(|&x| x == s).unwrap()
}

/// Total order on result rows; NaN keys (range-trained SNR, absent cosine)
/// sort after every number via the IEEE total order, so merged output is
/// unique regardless of trial completion order.
pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| {
        scheme_rank(a.scheme)
            .cmp(&scheme_rank(b.scheme))
            .then_with(|| a.channel.as_str().cmp(b.channel.as_str()))
            .then_with(|| a.csi_mode.cmp(&b.csi_mode))
            .then_with(|| a.q_total.cmp(&b.q_total))
            .then_with(|| a.lambda_cos.total_cmp(&b.lambda_cos))
            .then_with(|| a.snr_train_db.total_cmp(&b.snr_train_db))
            .then_with(|| a.snr_test_db.total_cmp(&b.snr_test_db))
            .then_with(|| a.seed.cmp(&b.seed))
    });
}

/// Collapses the digital rate-penalty grid: rows from digital trials are
/// grouped per (q, snr_test, seed) and only the best top-1 survives, ties
/// going to the smallest penalty (earliest trial). Analog rows pass through.
fn merge_rows(trials: &[Trial], per_trial: Vec<Vec<MetricsRow>>) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    let mut best_digital: BTreeMap<(usize, u64, u64), MetricsRow> = BTreeMap::new();
    for (trial, trial_rows) in trials.iter().zip(per_trial) {
        if trial.scheme == Scheme::Digital {
            for row in trial_rows {
                let key = (row.q_total, row.snr_test_db.to_bits(), row.seed);
                match best_digital.entry(key) {
                    Entry::Vacant(slot) => {
                        slot.insert(row);
                    }
                    Entry::Occupied(mut slot) => {
                        if row.top1 > slot.get().top1 {
                            slot.insert(row);
                        }
                    }
                }
            }
        } else {
            rows.extend(trial_rows);
        }
    }
    rows.extend(best_digital.into_values());
    sort_rows(&mut rows);
    rows
}

/// Plans and runs a whole sweep, returning the merged, sorted rows.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    schemes: &[Scheme],
    seeds: &[u64],
    data: &TwoViewDataset,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<MetricsRow>, SweepError> {
    let trials = plan(cfg, axis, schemes, seeds)?;
    log::info!(
        "sweep axis={axis}: {} trials over {} scheme(s), {} seed(s)",
        trials.len(),
        schemes.len(),
        seeds.len()
    );
    let per_trial = try_par_map(trials.clone(), |t| run_trial(cfg, &t, data, ckpt_dir))?;
    Ok(merge_rows(&trials, per_trial))
}

/// Writes rows to `path` atomically: the file appears complete or not at all.
pub fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<(), SweepError> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    write_metrics_csv(&tmp, rows)?;
    if let Err(e) = std::fs::rename(&tmp, path) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::nets::ChannelKind;

    fn base_cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    fn row(scheme: Scheme, snr_test_db: f64, seed: u64, top1: f64) -> MetricsRow {
        MetricsRow {
            scheme,
            channel: ChannelKind::Awgn,
            csi_mode: "none".into(),
            snr_train_db: 0.0,
            snr_test_db,
            q_total: 64,
            lambda_cos: 0.0,
            seed,
            top1,
            cos_sq: f64::NAN,
            outage_rate: 0.0,
        }
    }

    #[test]
    fn snr_axis_trial_counts() {
        let cfg = base_cfg();
        let trials = plan(&cfg, SweepAxis::Snr, &Scheme::ALL, &[1, 2]).unwrap();
        // One trial per analog (scheme, seed); digital fans out over the
        // rate-penalty grid.
        let analog = 3 * 2;
        let digital = LAMBDA_RATE_GRID.len() * 2;
        assert_eq!(trials.len(), analog + digital);
        for t in &trials {
            assert_eq!(t.snr_tests, cfg.eval.snr_test_db);
        }
    }

    #[test]
    fn snr_axis_row_count_contract() {
        // 4 schemes x 8 grid points x seeds after the digital collapse.
        let cfg = base_cfg();
        let seeds = [1, 2];
        let trials = plan(&cfg, SweepAxis::Snr, &Scheme::ALL, &seeds).unwrap();
        let per_trial: Vec<Vec<MetricsRow>> = trials
            .iter()
            .map(|t| {
                t.snr_tests
                    .iter()
                    .map(|&snr| {
                        let mut r = row(t.scheme, snr, t.seed, 0.5);
                        r.q_total = t.q_total;
                        r
                    })
                    .collect()
            })
            .collect();
        let rows = merge_rows(&trials, per_trial);
        assert_eq!(rows.len(), 4 * cfg.eval.snr_test_db.len() * seeds.len());
    }

    #[test]
    fn mismatch_axis_plans_fixed_grid_plus_aware() {
        let cfg = base_cfg();
        let trials = plan(&cfg, SweepAxis::SnrMismatch, &[Scheme::Noma], &[7]).unwrap();
        assert_eq!(trials.len(), MISMATCH_TRAIN_SNRS_DB.len() + 1);
        let fixed: Vec<f64> = trials
            .iter()
            .filter_map(|t| match t.snr_train {
                SnrTrain::Fixed(db) => Some(db),
                _ => None,
            })
            .collect();
        assert_eq!(fixed, MISMATCH_TRAIN_SNRS_DB);
        let aware: Vec<&Trial> = trials
            .iter()
            .filter(|t| t.adaptation == Adaptation::SnrAware)
            .collect();
        assert_eq!(aware.len(), 1);
        assert_eq!(aware[0].snr_train, SnrTrain::Range([-6.0, 15.0]));
    }

    #[test]
    fn lambda_axis_rejects_schemes_without_codeword_pairs() {
        let cfg = base_cfg();
        for bad in [Scheme::Single, Scheme::Digital] {
            assert!(matches!(
                plan(&cfg, SweepAxis::LambdaCos, &[bad], &[1]),
                Err(SweepError::Invalid(_))
            ));
        }
        let ok = plan(&cfg, SweepAxis::LambdaCos, &[Scheme::Noma], &[1]).unwrap();
        assert_eq!(ok.len(), LAMBDA_COS_GRID.len());
        let lambdas: Vec<f64> = ok.iter().map(|t| t.lambda_cos).collect();
        assert_eq!(lambdas, LAMBDA_COS_GRID);
    }

    #[test]
    fn mismatch_axis_rejects_digital() {
        let cfg = base_cfg();
        assert!(matches!(
            plan(&cfg, SweepAxis::SnrMismatch, &[Scheme::Digital], &[1]),
            Err(SweepError::Invalid(_))
        ));
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let cfg = base_cfg();
        assert!(matches!(
            plan(&cfg, SweepAxis::Snr, &[Scheme::Noma], &[3, 3]),
            Err(SweepError::Invalid(_))
        ));
    }

    #[test]
    fn bandwidth_axis_covers_grid_and_evaluates_at_train_snr() {
        let mut cfg = base_cfg();
        cfg.training.snr_train = SnrTrain::Fixed(6.0);
        let trials = plan(&cfg, SweepAxis::Bandwidth, &[Scheme::Oma], &[1]).unwrap();
        let qs: Vec<usize> = trials.iter().map(|t| t.q_total).collect();
        assert_eq!(qs, BANDWIDTH_GRID);
        for t in &trials {
            assert_eq!(t.snr_tests, vec![6.0]);
        }
    }

    #[test]
    fn digital_collapse_keeps_best_top1_earliest_tie() {
        let cfg = base_cfg();
        let trials = plan(&cfg, SweepAxis::Snr, &[Scheme::Digital], &[1]).unwrap();
        assert_eq!(trials.len(), LAMBDA_RATE_GRID.len());
        // Synthesize per-trial rows at a single test point: top1 peaks for
        // the middle penalty, with a tie between trials 1 and 3.
        let top1s = [0.10, 0.40, 0.90, 0.40, 0.20];
        let per_trial: Vec<Vec<MetricsRow>> = top1s
            .iter()
            .map(|&t| vec![row(Scheme::Digital, 0.0, 1, t)])
            .collect();
        let rows = merge_rows(&trials, per_trial);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].top1, 0.90);

        let tied = [0.4, 0.7, 0.1, 0.7, 0.2];
        let per_trial: Vec<Vec<MetricsRow>> = tied
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut r = row(Scheme::Digital, 0.0, 1, t);
                // Tag the outage column with the trial index to observe
                // which tied row survives.
                r.outage_rate = i as f64;
                vec![r]
            })
            .collect();
        let rows = merge_rows(&trials, per_trial);
        assert_eq!(rows[0].top1, 0.7);
        assert_eq!(rows[0].outage_rate, 1.0, "tie must keep the earliest trial");
    }

    #[test]
    fn sort_order_is_total_even_with_nan_keys() {
        let mut a = row(Scheme::Noma, 0.0, 1, 0.5);
        a.snr_train_db = f64::NAN;
        let b = row(Scheme::Noma, 0.0, 1, 0.5);
        let mut c = row(Scheme::Oma, -6.0, 2, 0.1);
        c.lambda_cos = 0.3;

        let mut rows = vec![a.clone(), c.clone(), b.clone()];
        sort_rows(&mut rows);
        // oma before noma; among noma, the finite train SNR sorts before NaN.
        assert_eq!(rows[0].scheme, Scheme::Oma);
        assert!(rows[1].snr_train_db == 0.0);
        assert!(rows[2].snr_train_db.is_nan());

        let mut shuffled = vec![b, a, c];
        sort_rows(&mut shuffled);
        for (x, y) in rows.iter().zip(&shuffled) {
            assert_eq!(x.scheme, y.scheme);
            assert_eq!(x.snr_train_db.to_bits(), y.snr_train_db.to_bits());
            assert_eq!(x.seed, y.seed);
        }
    }
}
