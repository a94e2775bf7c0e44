//! Losses and the staged training pipeline.
//!
//! JSCC schemes train in three stages: T1 fits the feature encoders and
//! classifiers with no channel, T2 fits the JSCC autoencoders over the
//! channel against frozen features, and T3 fine-tunes everything end to end
//! (optionally with the cosine regularizer and SNR-aware conditioning). The
//! digital baseline replaces T2/T3 with a single rate-regularized stage on
//! top of T1. Every stage is deterministic per `(seed, config)` and writes a
//! stage-tagged checkpoint so pipelines resume mid-way.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ad::{AdError, Inputs, ParamStore};
use crate::channel::{sample_fading, snr_to_sigma2, Gain};
use crate::dataset::{Split, View};
use crate::nets::{
    build_digital, build_feature, build_t1, build_t2, build_t3, component_of, load_checkpoint,
    save_checkpoint, Adaptation, ChannelKind, CheckpointError, CheckpointMeta, CsiMode, Device,
    NetSpec, Scheme, IN_CSI_DEC1, IN_CSI_DEC2, IN_CSI_ENC, IN_EQ1, IN_EQ2, IN_H1, IN_H2,
    IN_LABELS, IN_NOISE, IN_NOISE1, IN_NOISE2, IN_S, IN_S1, IN_S2, IN_U1, IN_U2, IN_V1, IN_V2,
    OUT_LOSS, OUT_V,
};
use crate::rng::{substream, StreamPurpose};
use crate::tensor::Tensor;

/// Loss ceiling beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Training-time channel SNR: either one fixed operating point or a fresh
/// uniform draw per batch (SNR-aware training).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrTrain {
    Fixed(f64),
    Range([f64; 2]),
}

impl SnrTrain {
    pub fn validate(&self) -> Result<(), TrainError> {
        if let SnrTrain::Range([lo, hi]) = self {
            if !(lo < hi) {
                return Err(TrainError::Config(format!(
                    "snr_train range needs lo < hi, got [{lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// One SNR draw for the coming batch: the constant in fixed mode, a fresh
/// uniform sample from `[lo, hi)` in range mode.
pub fn sample_train_snr(snr: &SnrTrain, rng: &mut impl Rng) -> f64 {
    match snr {
        SnrTrain::Fixed(db) => *db,
        SnrTrain::Range([lo, hi]) => {
            Uniform::new(*lo, *hi).expect("validated range").sample(rng)
        }
    }
}

/// Hyperparameters for the full pipeline. Defaults are the desk-scale
/// schedule: T1 30 epochs at lr 0.01; T2 120 epochs at 0.1 dropping to 0.01
/// after epoch 90; T3 30 epochs with per-component rates (features and
/// classifiers 0.01 -> 0.001 after epoch 20, JSCC autoencoders one tenth of
/// that); digital stage 30 epochs at 0.01.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_t1: usize,
    pub epochs_t2: usize,
    pub epochs_t3: usize,
    pub epochs_digital: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_t1: f64,
    pub lr_t2: f64,
    pub lr_t2_after: f64,
    /// Epoch at which T2 switches to `lr_t2_after`.
    pub t2_drop_epoch: usize,
    pub lr_t3_feat: f64,
    pub lr_t3_feat_after: f64,
    pub lr_t3_jscc: f64,
    pub lr_t3_jscc_after: f64,
    /// Epoch at which both T3 groups switch to their `_after` rates.
    pub t3_drop_epoch: usize,
    pub lr_digital: f64,
    /// Weight of the squared-cosine codeword penalty in T3 (two-device only).
    pub lambda_cos: f64,
    /// Weight of the code-length term in the digital stage.
    pub lambda_rate: f64,
    pub snr_train: SnrTrain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_t1: 30,
            epochs_t2: 120,
            epochs_t3: 30,
            epochs_digital: 30,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_t1: 0.01,
            lr_t2: 0.1,
            lr_t2_after: 0.01,
            t2_drop_epoch: 90,
            lr_t3_feat: 0.01,
            lr_t3_feat_after: 0.001,
            lr_t3_jscc: 0.001,
            lr_t3_jscc_after: 1e-4,
            t3_drop_epoch: 20,
            lr_digital: 0.01,
            lambda_cos: 0.0,
            lambda_rate: 0.0,
            snr_train: SnrTrain::Fixed(0.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, e) in [
            ("epochs_t1", self.epochs_t1),
            ("epochs_t2", self.epochs_t2),
            ("epochs_t3", self.epochs_t3),
            ("epochs_digital", self.epochs_digital),
            ("batch_size", self.batch_size),
        ] {
            if e == 0 {
                return Err(TrainError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.lambda_cos < 0.0 || self.lambda_rate < 0.0 {
            return Err(TrainError::Config(
                "regularizer weights must be nonnegative".into(),
            ));
        }
        self.snr_train.validate()
    }
}

/// Pipeline stages in their mandatory order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    T1,
    T2,
    T3,
    Digital,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::T1 => "t1",
            Stage::T2 => "t2",
            Stage::T3 => "t3",
            Stage::Digital => "digital",
        }
    }

    /// Disjoint substream index ranges per stage keep each stage's draws
    /// independent of how many draws earlier stages consumed.
    fn tag(self) -> u64 {
        match self {
            Stage::T1 => 1,
            Stage::T2 => 2,
            Stage::T3 => 3,
            Stage::Digital => 4,
        }
    }

    /// Stages a checkpoint of this stage certifies as complete.
    fn implied(self) -> &'static [Stage] {
        match self {
            Stage::T1 => &[Stage::T1],
            Stage::T2 => &[Stage::T1, Stage::T2],
            Stage::T3 => &[Stage::T1, Stage::T2, Stage::T3],
            Stage::Digital => &[Stage::T1, Stage::Digital],
        }
    }

    fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::T1 => None,
            Stage::T2 => Some(Stage::T1),
            Stage::T3 => Some(Stage::T2),
            Stage::Digital => Some(Stage::T1),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "t1" => Ok(Stage::T1),
            "t2" => Ok(Stage::T2),
            "t3" => Ok(Stage::T3),
            "digital" => Ok(Stage::Digital),
            other => Err(format!("unknown stage '{other}'")),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("stage order violated: {0}")]
    StageOrder(String),
    #[error("training diverged at stage {stage} epoch {epoch}: loss = {loss}")]
    Diverged { stage: Stage, epoch: usize, loss: f64 },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metric log i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("metric log write failed: {0}")]
    Csv(#[from] csv::Error),
}

/// One per-epoch record of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    /// Mean of the epoch's per-batch training SNR draws; NaN for channel-free
    /// stages (written as an empty CSV field).
    pub snr_train_db: f64,
    pub lr: f64,
}

/// Writes the metric log as CSV with columns
/// `stage, epoch, loss, snr_train_db, lr`.
pub fn write_metric_log(path: &Path, rows: &[MetricRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stage", "epoch", "loss", "snr_train_db", "lr"])?;
    for r in rows {
        let snr = if r.snr_train_db.is_finite() {
            r.snr_train_db.to_string()
        } else {
            String::new()
        };
        w.write_record([
            r.stage.as_str().to_string(),
            r.epoch.to_string(),
            r.loss.to_string(),
            snr,
            r.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reference loss arithmetic. The graphs compute these same quantities with
// AD primitives; these standalone forms are the cheap oracles tests compare
// against.

/// Cross-entropy `-sum_j y_j ln p_j` of one probability vector against a
/// one-hot label.
pub fn cross_entropy(p: &[f64], onehot: &[f64]) -> f64 {
    p.iter()
        .zip(onehot)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| -y * p.ln())
        .sum()
}

/// Classification loss: mean cross-entropy over the auxiliary and main
/// heads. Pass `None` for the second auxiliary head in the single-device
/// scheme.
pub fn loss_cls(
    p_aux1: &[f64],
    p_main: &[f64],
    p_aux2: Option<&[f64]>,
    onehot: &[f64],
) -> f64 {
    let mut total = cross_entropy(p_aux1, onehot) + cross_entropy(p_main, onehot);
    let mut count = 2.0;
    if let Some(p) = p_aux2 {
        total += cross_entropy(p, onehot);
        count += 1.0;
    }
    total / count
}

fn mean_sq_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "feature length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Reconstruction loss: `(mse(v1, v1_hat) + mse(v2, v2_hat)) / 2` with
/// per-coordinate means.
pub fn loss_jscc(v1: &[f64], v1_hat: &[f64], v2: &[f64], v2_hat: &[f64]) -> f64 {
    0.5 * (mean_sq_err(v1, v1_hat) + mean_sq_err(v2, v2_hat))
}

/// Squared cosine similarity of two codewords; zero when either is all-zero.
pub fn cos_sq(x1: &[f64], x2: &[f64]) -> f64 {
    assert_eq!(x1.len(), x2.len(), "codeword length mismatch");
    let dot: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
    let n1: f64 = x1.iter().map(|v| v * v).sum();
    let n2: f64 = x2.iter().map(|v| v * v).sum();
    if n1 == 0.0 || n2 == 0.0 {
        return 0.0;
    }
    (dot * dot) / (n1 * n2)
}

/// Cosine-regularized loss `base + lambda * cos^2(x1, x2)`.
pub fn loss_cos_reg(base: f64, x1: &[f64], x2: &[f64], lambda: f64) -> f64 {
    assert!(lambda >= 0.0, "lambda must be nonnegative");
    base + lambda * cos_sq(x1, x2)
}

/// Digital training loss `classification + lambda_rate * (bits1 + bits2)`.
pub fn loss_digital(cls: f64, bits1: f64, bits2: f64, lambda_rate: f64) -> f64 {
    cls + lambda_rate * (bits1 + bits2)
}

// ---------------------------------------------------------------------------

/// Owns the parameter store and drives the stages in order.
pub struct Trainer {
    pub spec: NetSpec,
    pub cfg: TrainConfig,
    pub seed: u64,
    /// Tag identifying the dataset the trainer runs on; folded into stage
    /// fingerprints so checkpoints never cross datasets.
    pub data_tag: String,
    pub store: ParamStore,
    pub log: Vec<MetricRow>,
    done: BTreeSet<Stage>,
}

impl Trainer {
    pub fn new(
        spec: NetSpec,
        cfg: TrainConfig,
        seed: u64,
        data_tag: impl Into<String>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if spec.scheme == Scheme::Oma && spec.dims.symbol_budget % 2 != 0 {
            return Err(TrainError::Config(format!(
                "OMA needs an even symbol budget, got {}",
                spec.dims.symbol_budget
            )));
        }
        Ok(Self {
            spec,
            cfg,
            seed,
            data_tag: data_tag.into(),
            store: ParamStore::new(),
            log: Vec::new(),
            done: BTreeSet::new(),
        })
    }

    pub fn completed(&self, stage: Stage) -> bool {
        self.done.contains(&stage)
    }

    /// Marks loaded external weights as satisfying `stage` (used when a store
    /// trained elsewhere is absorbed instead of resumed from disk).
    pub fn adopt_store(&mut self, store: ParamStore, through: Stage) {
        self.store = store;
        self.done = through.implied().iter().copied().collect();
    }

    /// Stage-scoped content hash: two trainers agree on a stage fingerprint
    /// exactly when that stage (and everything it builds on) would run
    /// identically. T1 deliberately ignores the scheme beyond the number of
    /// devices, so OMA/NOMA/digital runs share T1 checkpoints.
    pub fn stage_fingerprint(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let d = &self.spec.dims;
        let mut parts: Vec<String> = vec![
            format!("data={}", self.data_tag),
            format!("seed={}", self.seed),
            // The symbol budget is deliberately absent here: it only shapes
            // the JSCC autoencoders, so T1 (and the channel-free digital
            // stage) share checkpoints across a bandwidth sweep.
            format!(
                "dims={},{},{},{:?},{:?},{:?},{}",
                d.obs_dim,
                d.feature_dim,
                d.classes,
                d.feat_hidden,
                d.enc_hidden,
                d.dec_hidden,
                d.leaky_slope
            ),
            format!("two_device={}", self.spec.scheme.is_two_device()),
            format!(
                "t1={},{},{},{},{}",
                c.epochs_t1, c.batch_size, c.momentum, c.weight_decay, c.lr_t1
            ),
        ];
        if stage == Stage::T2 || stage == Stage::T3 {
            parts.push(format!(
                "link={},{:?},{:?},{:?},{},{}",
                self.spec.scheme,
                self.spec.adaptation,
                self.spec.csi_mode,
                self.spec.channel,
                self.spec.tx_power,
                d.symbol_budget
            ));
            parts.push(format!(
                "t2={},{},{},{},{:?}",
                c.epochs_t2, c.lr_t2, c.lr_t2_after, c.t2_drop_epoch, c.snr_train
            ));
        }
        if stage == Stage::T3 {
            parts.push(format!(
                "t3={},{},{},{},{},{},{}",
                c.epochs_t3,
                c.lr_t3_feat,
                c.lr_t3_feat_after,
                c.lr_t3_jscc,
                c.lr_t3_jscc_after,
                c.t3_drop_epoch,
                c.lambda_cos
            ));
        }
        if stage == Stage::Digital {
            parts.push(format!(
                "digital={},{},{}",
                c.epochs_digital, c.lr_digital, c.lambda_rate
            ));
        }
        let mut hasher = Sha256::new();
        hasher.update(parts.join(";").as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn require_ready(&self, stage: Stage) -> Result<(), TrainError> {
        if self.done.contains(&stage) {
            return Err(TrainError::StageOrder(format!(
                "stage {stage} already trained in this run"
            )));
        }
        if let Some(pre) = stage.prerequisite() {
            if !self.done.contains(&pre) {
                return Err(TrainError::StageOrder(format!(
                    "stage {stage} requires completed stage {pre}"
                )));
            }
        }
        Ok(())
    }

    fn check_data(&self, data: &Split) -> Result<(), TrainError> {
        if data.num_identities() != self.spec.dims.classes {
            return Err(TrainError::Config(format!(
                "classifier width {} != dataset identities {}",
                self.spec.dims.classes,
                data.num_identities()
            )));
        }
        if data.obs_dim() != self.spec.dims.obs_dim {
            return Err(TrainError::Config(format!(
                "model obs_dim {} != dataset obs_dim {}",
                self.spec.dims.obs_dim,
                data.obs_dim()
            )));
        }
        if self.cfg.batch_size > data.rows() {
            return Err(TrainError::Config(format!(
                "batch size {} exceeds dataset rows {}",
                self.cfg.batch_size,
                data.rows()
            )));
        }
        Ok(())
    }

    fn guard(&self, stage: Stage, epoch: usize, loss: f64) -> Result<(), TrainError> {
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { stage, epoch, loss });
        }
        Ok(())
    }

    /// Identity-stratified batch order for one epoch: every identity's
    /// captures are spread across rounds, identities are re-shuffled within
    /// each round, so each batch mixes identities evenly.
    fn batches(&self, data: &Split, stage: Stage, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = substream(
            self.seed,
            StreamPurpose::Shuffle,
            (stage.tag() << 32) | epoch as u64,
        );
        let ids = data.num_identities();
        let mut per_id: Vec<Vec<usize>> = vec![Vec::new(); ids];
        for row in 0..data.rows() {
            per_id[data.identity(row) as usize].push(row);
        }
        for rows in per_id.iter_mut() {
            rows.shuffle(&mut rng);
        }
        let rounds = per_id.iter().map(Vec::len).max().unwrap_or(0);
        let mut order = Vec::with_capacity(data.rows());
        let mut id_order: Vec<usize> = (0..ids).collect();
        for round in 0..rounds {
            id_order.shuffle(&mut rng);
            for &id in &id_order {
                if let Some(&row) = per_id[id].get(round) {
                    order.push(row);
                }
            }
        }
        order
            .chunks(self.cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Draws the per-batch channel realization as graph inputs: per-row
    /// fading gains (tiled across the codeword), noise for each slot, the
    /// equalizer taps where the scheme equalizes, and the CSI vectors the
    /// adaptation mode expects. Crate-visible so the self-check can probe
    /// composed training graphs with realistic channel inputs.
    pub(crate) fn channel_inputs(
        &self,
        n: usize,
        snr_db: f64,
        rng: &mut ChaCha8Rng,
        inputs: &mut Inputs,
    ) {
        let spec = &self.spec;
        let cw = 2 * spec.codeword_symbols();
        let sigma2 = snr_to_sigma2(snr_db, 1.0);
        let fading = spec.channel == ChannelKind::Rayleigh;
        let two = spec.scheme.is_two_device();

        let mut h1 = vec![Gain::UNITY; n];
        let mut h2 = vec![Gain::UNITY; n];
        if fading {
            for i in 0..n {
                h1[i] = sample_fading(1.0, rng);
                if two {
                    h2[i] = sample_fading(1.0, rng);
                }
            }
        }

        let tile = |gains: &[Gain]| {
            let mut data = Vec::with_capacity(n * cw);
            for g in gains {
                for _ in 0..cw / 2 {
                    data.push(g.re);
                    data.push(g.im);
                }
            }
            Tensor::matrix(n, cw, data)
        };
        let tile_eq = |gains: &[Gain]| {
            let inv: Vec<Gain> = gains
                .iter()
                .map(|g| {
                    let a2 = g.abs2();
                    Gain {
                        re: g.re / a2,
                        im: -g.im / a2,
                    }
                })
                .collect();
            tile(&inv)
        };

        if fading {
            inputs.insert(IN_H1.into(), tile(&h1));
            if two {
                inputs.insert(IN_H2.into(), tile(&h2));
            }
            if spec.equalizes() {
                inputs.insert(IN_EQ1.into(), tile_eq(&h1));
                if spec.scheme == Scheme::Oma {
                    inputs.insert(IN_EQ2.into(), tile_eq(&h2));
                }
            }
        }

        let noise = |rng: &mut ChaCha8Rng| {
            if sigma2 == 0.0 {
                return Tensor::matrix(n, cw, vec![0.0; n * cw]);
            }
            let comp = Normal::new(0.0, (sigma2 / 2.0).sqrt()).expect("valid std");
            Tensor::matrix(n, cw, (0..n * cw).map(|_| comp.sample(rng)).collect())
        };
        match spec.scheme {
            Scheme::Single | Scheme::Noma => {
                let t = noise(rng);
                inputs.insert(IN_NOISE.into(), t);
            }
            Scheme::Oma => {
                let t1 = noise(rng);
                inputs.insert(IN_NOISE1.into(), t1);
                let t2 = noise(rng);
                inputs.insert(IN_NOISE2.into(), t2);
            }
            Scheme::Digital => unreachable!("digital stage draws no channel"),
        }

        match spec.adaptation {
            Adaptation::Fixed => {}
            Adaptation::SnrAware => {
                let c = Tensor::matrix(n, 1, vec![snr_db / 10.0; n]);
                inputs.insert(IN_CSI_ENC.into(), c.clone());
                inputs.insert(IN_CSI_DEC1.into(), c.clone());
                if two {
                    inputs.insert(IN_CSI_DEC2.into(), c);
                }
            }
            Adaptation::FadingAware => {
                let own = |gains: &[Gain]| {
                    let mut data = Vec::with_capacity(n * 2);
                    for g in gains {
                        data.push(g.re);
                        data.push(g.im);
                    }
                    Tensor::matrix(n, 2, data)
                };
                if !two {
                    inputs.insert(IN_CSI_DEC1.into(), own(&h1));
                } else if spec.csi_mode == CsiMode::OwnLink {
                    inputs.insert(IN_CSI_DEC1.into(), own(&h1));
                    inputs.insert(IN_CSI_DEC2.into(), own(&h2));
                } else {
                    let mut data = Vec::with_capacity(n * 4);
                    for i in 0..n {
                        data.extend_from_slice(&[h1[i].re, h1[i].im, h2[i].re, h2[i].im]);
                    }
                    let both = Tensor::matrix(n, 4, data);
                    inputs.insert(IN_CSI_DEC1.into(), both.clone());
                    inputs.insert(IN_CSI_DEC2.into(), both);
                }
            }
        }
    }

    fn snr_for_step(&self, stage: Stage, step: u64) -> f64 {
        match self.cfg.snr_train {
            SnrTrain::Fixed(db) => db,
            SnrTrain::Range(_) => {
                let mut rng = substream(
                    self.seed,
                    StreamPurpose::TrainSnr,
                    (stage.tag() << 32) | step,
                );
                sample_train_snr(&self.cfg.snr_train, &mut rng)
            }
        }
    }

    /// Runs the feature encoder of `device` in inference mode over the whole
    /// split, returning a `[rows, r]` feature matrix.
    pub fn features(&mut self, data: &Split, device: Device) -> Result<Tensor, TrainError> {
        let graph = build_feature(&self.spec, &mut self.store, self.seed, device);
        let all: Vec<usize> = (0..data.rows()).collect();
        let view = match device {
            Device::One => View::First,
            Device::Two => View::Second,
        };
        let mut inputs = Inputs::new();
        inputs.insert(IN_S.into(), data.batch(view, &all));
        let eval = graph.eval_infer(&inputs, &self.store)?;
        Ok(eval.value(graph.output_id(OUT_V)?).clone())
    }

    /// Stage T1: feature encoders + classifiers, channel-free.
    pub fn run_t1(&mut self, data: &Split) -> Result<(), TrainError> {
        self.require_ready(Stage::T1)?;
        self.check_data(data)?;
        let graph = build_t1(&self.spec, &mut self.store, self.seed);
        self.store.reset_momentum();
        let loss_id = graph.output_id(OUT_LOSS)?;
        let two = self.spec.scheme.is_two_device();
        for epoch in 0..self.cfg.epochs_t1 {
            let mut sum = 0.0;
            let batches = self.batches(data, Stage::T1, epoch);
            let nb = batches.len();
            for batch in batches {
                let mut inputs = Inputs::new();
                inputs.insert(IN_S1.into(), data.batch(View::First, &batch));
                if two {
                    inputs.insert(IN_S2.into(), data.batch(View::Second, &batch));
                }
                inputs.insert(IN_LABELS.into(), data.onehot(&batch));
                let eval = graph.eval_train(&inputs, &mut self.store)?;
                let loss = eval.value(loss_id).item();
                self.guard(Stage::T1, epoch, loss)?;
                graph.backward(&eval, loss_id, &mut self.store)?;
                // Grouped stepping keeps weight decay off any parameters a
                // warm-started store may carry beyond this stage's own.
                self.store.sgd_step_grouped(
                    |name| matches!(component_of(name), "feat" | "cls").then_some(self.cfg.lr_t1),
                    self.cfg.momentum,
                    self.cfg.weight_decay,
                )?;
                sum += loss;
            }
            self.log.push(MetricRow {
                stage: Stage::T1,
                epoch,
                loss: sum / nb as f64,
                snr_train_db: f64::NAN,
                lr: self.cfg.lr_t1,
            });
        }
        self.done.insert(Stage::T1);
        Ok(())
    }

    /// Stage T2: JSCC autoencoders over the live channel against frozen T1
    /// features. The graph references no feature or classifier parameters,
    /// so the freeze is structural rather than policed.
    pub fn run_t2(&mut self, data: &Split) -> Result<(), TrainError> {
        self.require_ready(Stage::T2)?;
        self.check_data(data)?;
        let v1 = self.features(data, Device::One)?;
        let two = self.spec.scheme.is_two_device();
        let v2 = if two {
            Some(self.features(data, Device::Two)?)
        } else {
            None
        };
        let graph = build_t2(&self.spec, &mut self.store, self.seed);
        self.store.reset_momentum();
        let loss_id = graph.output_id(OUT_LOSS)?;
        let mut step: u64 = 0;
        for epoch in 0..self.cfg.epochs_t2 {
            let lr = if epoch < self.cfg.t2_drop_epoch {
                self.cfg.lr_t2
            } else {
                self.cfg.lr_t2_after
            };
            let (mut sum, mut snr_sum) = (0.0, 0.0);
            let batches = self.batches(data, Stage::T2, epoch);
            let nb = batches.len();
            for batch in batches {
                let snr_db = self.snr_for_step(Stage::T2, step);
                let mut rng = substream(
                    self.seed,
                    StreamPurpose::Channel,
                    (Stage::T2.tag() << 32) | step,
                );
                let mut inputs = Inputs::new();
                inputs.insert(IN_V1.into(), v1.gather_rows(&batch));
                if let Some(v2) = &v2 {
                    inputs.insert(IN_V2.into(), v2.gather_rows(&batch));
                }
                self.channel_inputs(batch.len(), snr_db, &mut rng, &mut inputs);
                let eval = graph.eval_train(&inputs, &mut self.store)?;
                let loss = eval.value(loss_id).item();
                self.guard(Stage::T2, epoch, loss)?;
                graph.backward(&eval, loss_id, &mut self.store)?;
                // The frozen components must stay bitwise intact, so even
                // weight decay is confined to the JSCC group.
                self.store.sgd_step_grouped(
                    |name| (component_of(name) == "jscc").then_some(lr),
                    self.cfg.momentum,
                    self.cfg.weight_decay,
                )?;
                sum += loss;
                snr_sum += snr_db;
                step += 1;
            }
            self.log.push(MetricRow {
                stage: Stage::T2,
                epoch,
                loss: sum / nb as f64,
                snr_train_db: snr_sum / nb as f64,
                lr,
            });
        }
        self.done.insert(Stage::T2);
        Ok(())
    }

    /// Stage T3: end-to-end fine-tuning with per-component learning rates
    /// (features and classifiers in one group, JSCC autoencoders in the
    /// other) and the optional cosine penalty.
    pub fn run_t3(&mut self, data: &Split) -> Result<(), TrainError> {
        self.require_ready(Stage::T3)?;
        self.check_data(data)?;
        let graph = build_t3(&self.spec, &mut self.store, self.seed, self.cfg.lambda_cos);
        self.store.reset_momentum();
        let loss_id = graph.output_id(OUT_LOSS)?;
        let two = self.spec.scheme.is_two_device();
        let mut step: u64 = 0;
        for epoch in 0..self.cfg.epochs_t3 {
            let (lr_feat, lr_jscc) = if epoch < self.cfg.t3_drop_epoch {
                (self.cfg.lr_t3_feat, self.cfg.lr_t3_jscc)
            } else {
                (self.cfg.lr_t3_feat_after, self.cfg.lr_t3_jscc_after)
            };
            let (mut sum, mut snr_sum) = (0.0, 0.0);
            let batches = self.batches(data, Stage::T3, epoch);
            let nb = batches.len();
            for batch in batches {
                let snr_db = self.snr_for_step(Stage::T3, step);
                let mut rng = substream(
                    self.seed,
                    StreamPurpose::Channel,
                    (Stage::T3.tag() << 32) | step,
                );
                let mut inputs = Inputs::new();
                inputs.insert(IN_S1.into(), data.batch(View::First, &batch));
                if two {
                    inputs.insert(IN_S2.into(), data.batch(View::Second, &batch));
                }
                inputs.insert(IN_LABELS.into(), data.onehot(&batch));
                self.channel_inputs(batch.len(), snr_db, &mut rng, &mut inputs);
                let eval = graph.eval_train(&inputs, &mut self.store)?;
                let loss = eval.value(loss_id).item();
                self.guard(Stage::T3, epoch, loss)?;
                graph.backward(&eval, loss_id, &mut self.store)?;
                self.store.sgd_step_grouped(
                    |name| match component_of(name) {
                        "feat" | "cls" => Some(lr_feat),
                        "jscc" => Some(lr_jscc),
                        _ => None,
                    },
                    self.cfg.momentum,
                    self.cfg.weight_decay,
                )?;
                sum += loss;
                snr_sum += snr_db;
                step += 1;
            }
            self.log.push(MetricRow {
                stage: Stage::T3,
                epoch,
                loss: sum / nb as f64,
                snr_train_db: snr_sum / nb as f64,
                lr: lr_feat,
            });
        }
        self.done.insert(Stage::T3);
        Ok(())
    }

    /// Digital stage: features, classifiers and entropy-model priors trained
    /// jointly with the uniform-noise quantizer surrogate and the priced
    /// code length. Warm-starts from T1 like the JSCC branches.
    pub fn run_digital(&mut self, data: &Split) -> Result<(), TrainError> {
        self.require_ready(Stage::Digital)?;
        self.check_data(data)?;
        let graph = build_digital(&self.spec, &mut self.store, self.seed, self.cfg.lambda_rate);
        self.store.reset_momentum();
        let loss_id = graph.output_id(OUT_LOSS)?;
        let r = self.spec.dims.feature_dim;
        let mut step: u64 = 0;
        for epoch in 0..self.cfg.epochs_digital {
            let mut sum = 0.0;
            let batches = self.batches(data, Stage::Digital, epoch);
            let nb = batches.len();
            for batch in batches {
                let n = batch.len();
                let mut rng = substream(
                    self.seed,
                    StreamPurpose::Quantizer,
                    (Stage::Digital.tag() << 32) | step,
                );
                let dist = Uniform::new(-0.5, 0.5).expect("valid range");
                let draw = |rng: &mut ChaCha8Rng| {
                    Tensor::matrix(n, r, (0..n * r).map(|_| dist.sample(rng)).collect())
                };
                let mut inputs = Inputs::new();
                inputs.insert(IN_S1.into(), data.batch(View::First, &batch));
                inputs.insert(IN_S2.into(), data.batch(View::Second, &batch));
                inputs.insert(IN_LABELS.into(), data.onehot(&batch));
                let u1 = draw(&mut rng);
                inputs.insert(IN_U1.into(), u1);
                let u2 = draw(&mut rng);
                inputs.insert(IN_U2.into(), u2);
                let eval = graph.eval_train(&inputs, &mut self.store)?;
                let loss = eval.value(loss_id).item();
                self.guard(Stage::Digital, epoch, loss)?;
                graph.backward(&eval, loss_id, &mut self.store)?;
                self.store.sgd_step_grouped(
                    |name| {
                        matches!(component_of(name), "feat" | "cls" | "prior")
                            .then_some(self.cfg.lr_digital)
                    },
                    self.cfg.momentum,
                    self.cfg.weight_decay,
                )?;
                sum += loss;
                step += 1;
            }
            self.log.push(MetricRow {
                stage: Stage::Digital,
                epoch,
                loss: sum / nb as f64,
                snr_train_db: f64::NAN,
                lr: self.cfg.lr_digital,
            });
        }
        self.done.insert(Stage::Digital);
        Ok(())
    }

    fn run_stage(&mut self, stage: Stage, data: &Split) -> Result<(), TrainError> {
        match stage {
            Stage::T1 => self.run_t1(data),
            Stage::T2 => self.run_t2(data),
            Stage::T3 => self.run_t3(data),
            Stage::Digital => self.run_digital(data),
        }
    }

    /// Stages the configured scheme runs, in order.
    pub fn pipeline_stages(&self) -> &'static [Stage] {
        if self.spec.scheme == Scheme::Digital {
            &[Stage::T1, Stage::Digital]
        } else {
            &[Stage::T1, Stage::T2, Stage::T3]
        }
    }

    pub fn checkpoint_path(&self, dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!(
            "{}_{}.ckpt",
            stage.as_str(),
            &self.stage_fingerprint(stage)[..16]
        ))
    }

    /// Loads a stage checkpoint if one exists with the exact stage, seed and
    /// fingerprint; returns whether the stage was skipped.
    pub fn try_resume(&mut self, dir: &Path, stage: Stage) -> Result<bool, TrainError> {
        let path = self.checkpoint_path(dir, stage);
        if !path.exists() {
            return Ok(false);
        }
        let (store, meta) = load_checkpoint(&path)?;
        if meta.stage != stage.as_str()
            || meta.seed != self.seed
            || meta.fingerprint != self.stage_fingerprint(stage)
        {
            return Ok(false);
        }
        self.adopt_store(store, stage);
        Ok(true)
    }

    pub fn save_stage(&self, dir: &Path, stage: Stage) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            stage: stage.as_str().into(),
            seed: self.seed,
            fingerprint: self.stage_fingerprint(stage),
        };
        save_checkpoint(&self.checkpoint_path(dir, stage), &self.store, &meta)?;
        Ok(())
    }

    /// Runs (or resumes) every stage of the configured scheme. With a
    /// checkpoint directory, completed stages are loaded instead of retrained
    /// and each freshly trained stage is saved on completion.
    pub fn run_pipeline(&mut self, data: &Split, ckpt_dir: Option<&Path>) -> Result<(), TrainError> {
        for &stage in self.pipeline_stages() {
            if self.done.contains(&stage) {
                continue;
            }
            if let Some(dir) = ckpt_dir {
                if self.try_resume(dir, stage)? {
                    continue;
                }
            }
            self.run_stage(stage, data)?;
            if let Some(dir) = ckpt_dir {
                self.save_stage(dir, stage)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::dataset::{DatasetConfig, TwoViewDataset};
    use crate::nets::ModelDims;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            obs_dim: 12,
            feature_dim: 6,
            symbol_budget: 8,
            classes: 6,
            feat_hidden: vec![16],
            enc_hidden: vec![16],
            dec_hidden: vec![16],
            leaky_slope: 0.01,
        }
    }

    fn tiny_data() -> TwoViewDataset {
        TwoViewDataset::generate(DatasetConfig {
            obs_dim: 12,
            latent_dim: 4,
            train_identities: 6,
            test_identities: 4,
            obs_per_identity: 4,
            obs_noise_std: 0.3,
            view_correlation: 0.0,
            seed: 0,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs_t1: 3,
            epochs_t2: 3,
            epochs_t3: 2,
            epochs_digital: 2,
            batch_size: 8,
            t2_drop_epoch: 2,
            t3_drop_epoch: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_trainer(scheme: Scheme) -> Trainer {
        let spec = NetSpec::new(tiny_dims(), scheme, Adaptation::Fixed, ChannelKind::Awgn);
        Trainer::new(spec, tiny_cfg(), 7, "tiny").unwrap()
    }

    #[test]
    fn loss_helpers_match_hand_values() {
        let u4 = [0.25; 4];
        let label4 = [0.0, 1.0, 0.0, 0.0];
        let l = loss_cls(&u4, &u4, Some(&u4), &label4);
        assert!((l - 4f64.ln()).abs() < 1e-12, "uniform CE should be ln 4, got {l}");

        let perfect = [0.0, 1.0];
        let u2 = [0.5, 0.5];
        let label2 = [0.0, 1.0];
        let l = loss_cls(&perfect, &u2, Some(&u2), &label2);
        assert!((l - 2.0 * 2f64.ln() / 3.0).abs() < 1e-12);
        assert!((l - 0.46210).abs() < 1e-5);

        assert_eq!(loss_jscc(&[1.0, 1.0], &[0.0, 0.0], &[2.0, 3.0], &[2.0, 3.0]), 0.5);
        assert_eq!(loss_jscc(&[1.0], &[2.0], &[5.0], &[5.0]), loss_jscc(&[5.0], &[5.0], &[1.0], &[2.0]));

        let x = [1.0, 2.0, -1.0];
        assert!((loss_cos_reg(0.3, &x, &x, 0.7) - 1.0).abs() < 1e-12);
        let y = [2.0, -1.0, 0.0];
        assert!((loss_cos_reg(0.3, &x, &y, 0.7) - 0.3).abs() < 1e-12);
        assert_eq!(loss_digital(1.5, 10.0, 20.0, 0.0), 1.5);
        assert!((loss_digital(1.5, 10.0, 20.0, 0.01) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn train_snr_sampling_stays_in_range() {
        let snr = SnrTrain::Range([-6.0, 15.0]);
        let mut rng = substream(1, StreamPurpose::TrainSnr, 0);
        let mut sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let s = sample_train_snr(&snr, &mut rng);
            assert!((-6.0..15.0).contains(&s));
            sum += s;
        }
        assert!((sum / n as f64 - 4.5).abs() < 0.1);
        assert_eq!(sample_train_snr(&SnrTrain::Fixed(3.0), &mut rng), 3.0);
        assert!(SnrTrain::Range([5.0, 5.0]).validate().is_err());
    }

    #[test]
    fn stage_order_is_enforced() {
        let data = tiny_data();
        let mut t = tiny_trainer(Scheme::Noma);
        assert!(matches!(
            t.run_t2(data.train()),
            Err(TrainError::StageOrder(_))
        ));
        t.run_t1(data.train()).unwrap();
        assert!(matches!(
            t.run_t3(data.train()),
            Err(TrainError::StageOrder(_))
        ));
        t.run_t2(data.train()).unwrap();
        t.run_t3(data.train()).unwrap();
        // Re-running a finished stage is also an order violation.
        assert!(matches!(
            t.run_t1(data.train()),
            Err(TrainError::StageOrder(_))
        ));
    }

    #[test]
    fn t1_loss_decreases() {
        let data = tiny_data();
        let mut t = tiny_trainer(Scheme::Noma);
        t.run_t1(data.train()).unwrap();
        let first = t.log.first().unwrap().loss;
        let last = t.log.last().unwrap().loss;
        assert!(last < first, "T1 loss should drop: {first} -> {last}");
    }

    #[test]
    fn t2_freezes_feature_encoders_bitwise() {
        let data = tiny_data();
        let mut t = tiny_trainer(Scheme::Noma);
        t.run_t1(data.train()).unwrap();
        let before: Vec<(String, Vec<u64>)> = t
            .store
            .iter()
            .filter(|(n, _)| component_of(n) != "jscc")
            .map(|(n, e)| (n.clone(), e.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        t.run_t2(data.train()).unwrap();
        for (name, bits) in before {
            let now: Vec<u64> = t
                .store
                .value(&name)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(bits, now, "{name} moved during T2");
        }
    }

    #[test]
    fn training_is_deterministic_per_seed_and_config() {
        let data = tiny_data();
        let run = || {
            let mut t = tiny_trainer(Scheme::Oma);
            t.run_pipeline(data.train(), None).unwrap();
            t
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log.len(), b.log.len());
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!((ra.stage, ra.epoch, ra.lr), (rb.stage, rb.epoch, rb.lr));
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.snr_train_db.to_bits(), rb.snr_train_db.to_bits());
        }
        for (name, ea) in a.store.iter() {
            let eb = b.store.get(name).unwrap();
            let bits_a: Vec<u64> = ea.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = eb.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name} differs between identical runs");
        }
        // A different seed produces different weights.
        let mut c = {
            let spec = NetSpec::new(tiny_dims(), Scheme::Oma, Adaptation::Fixed, ChannelKind::Awgn);
            Trainer::new(spec, tiny_cfg(), 8, "tiny").unwrap()
        };
        c.run_pipeline(data.train(), None).unwrap();
        let name = "enc1.fc0.weight";
        assert_ne!(
            a.store.value(name).unwrap().data(),
            c.store.value(name).unwrap().data()
        );
    }

    #[test]
    fn pipeline_resumes_from_checkpoints() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut first = tiny_trainer(Scheme::Noma);
        first.run_pipeline(data.train(), Some(dir.path())).unwrap();
        assert!(!first.log.is_empty());

        let mut resumed = tiny_trainer(Scheme::Noma);
        resumed
            .run_pipeline(data.train(), Some(dir.path()))
            .unwrap();
        assert!(resumed.log.is_empty(), "resume should skip all training");
        for (name, e) in first.store.iter() {
            assert_eq!(
                e.value.data(),
                resumed.store.value(name).unwrap().data(),
                "{name} not restored"
            );
        }

        // A different lambda_cos changes only the T3 fingerprint: T1/T2 are
        // reused, T3 retrains.
        let mut swept = {
            let spec = NetSpec::new(tiny_dims(), Scheme::Noma, Adaptation::Fixed, ChannelKind::Awgn);
            let cfg = TrainConfig {
                lambda_cos: 0.1,
                ..tiny_cfg()
            };
            Trainer::new(spec, cfg, 7, "tiny").unwrap()
        };
        swept.run_pipeline(data.train(), Some(dir.path())).unwrap();
        assert!(swept.log.iter().all(|r| r.stage == Stage::T3));
        assert_eq!(swept.log.len(), tiny_cfg().epochs_t3);
    }

    #[test]
    fn digital_pipeline_shares_t1_checkpoints() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut noma = tiny_trainer(Scheme::Noma);
        noma.run_t1(data.train()).unwrap();
        noma.save_stage(dir.path(), Stage::T1).unwrap();

        let mut digital = {
            let spec =
                NetSpec::new(tiny_dims(), Scheme::Digital, Adaptation::Fixed, ChannelKind::Awgn);
            let cfg = TrainConfig {
                lambda_rate: 1e-3,
                ..tiny_cfg()
            };
            Trainer::new(spec, cfg, 7, "tiny").unwrap()
        };
        digital
            .run_pipeline(data.train(), Some(dir.path()))
            .unwrap();
        // Only the digital stage trained; T1 came from the NOMA checkpoint.
        assert!(digital.log.iter().all(|r| r.stage == Stage::Digital));
        assert!(digital.store.contains("prior1.mu"));
    }

    #[test]
    fn metric_log_round_trips_as_csv() {
        let rows = vec![
            MetricRow {
                stage: Stage::T1,
                epoch: 0,
                loss: 1.75,
                snr_train_db: f64::NAN,
                lr: 0.01,
            },
            MetricRow {
                stage: Stage::T2,
                epoch: 1,
                loss: 0.25,
                snr_train_db: 4.5,
                lr: 0.1,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metric_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "stage,epoch,loss,snr_train_db,lr");
        assert_eq!(lines.next().unwrap(), "t1,0,1.75,,0.01");
        assert_eq!(lines.next().unwrap(), "t2,1,0.25,4.5,0.1");
    }
}
