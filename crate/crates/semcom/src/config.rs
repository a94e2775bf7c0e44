//! Experiment configuration: one JSON document with `dataset`, `model`,
//! `channel`, `training` and `eval` sections. Unknown keys are rejected in
//! every section so typos fail loudly instead of silently training the wrong
//! model. The model section deliberately omits widths that other sections
//! already pin down (observation width and classifier width come from the
//! dataset, the symbol budget from the channel), so a sweep can vary one
//! section without keeping three copies of the same number in sync.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::DatasetConfig;
use crate::nets::{Adaptation, ChannelKind, CsiMode, ModelDims, NetSpec, Scheme};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Network architecture; see [`ModelDims`] for the derived full shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Semantic feature dimension `r`.
    pub feature_dim: usize,
    pub feat_hidden: Vec<usize>,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub adaptation: Adaptation,
    /// Which gains fading-aware decoders see; ignored otherwise.
    pub csi_mode: CsiMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            feature_dim: d.feature_dim,
            feat_hidden: d.feat_hidden,
            enc_hidden: d.enc_hidden,
            dec_hidden: d.dec_hidden,
            leaky_slope: d.leaky_slope,
            adaptation: Adaptation::Fixed,
            csi_mode: CsiMode::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// Total complex symbol budget `q` per retrieval task, shared by every
    /// scheme. OMA needs this even (half per device).
    pub q_total: usize,
    /// Per-transmitter power override. Left unset, NOMA transmitters send at
    /// 0.5 and everyone else at 1.0, so all schemes meet the receiver with
    /// the same total energy.
    pub tx_power: Option<f64>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            kind: ChannelKind::Awgn,
            q_total: ModelDims::default().symbol_budget,
            tx_power: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test-time SNR grid in dB.
    pub snr_test_db: Vec<f64>,
    /// End-to-end replicate seeds; each drives dataset order, init, channel
    /// draws and evaluation noise for one independent run.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            snr_test_db: vec![-6.0, -3.0, 0.0, 3.0, 6.0, 9.0, 12.0, 15.0],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub channel: ChannelConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(fs::write(path, text)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.training
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.feature_dim == 0 {
            return Err(ConfigError::Invalid("feature_dim must be positive".into()));
        }
        if !(self.model.leaky_slope.is_finite() && (0.0..1.0).contains(&self.model.leaky_slope)) {
            return Err(ConfigError::Invalid(format!(
                "leaky_slope must lie in [0, 1), got {}",
                self.model.leaky_slope
            )));
        }
        if self.channel.q_total == 0 {
            return Err(ConfigError::Invalid("q_total must be positive".into()));
        }
        if let Some(p) = self.channel.tx_power {
            if !(p.is_finite() && p > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "tx_power must be positive and finite, got {p}"
                )));
            }
        }
        if self.eval.snr_test_db.is_empty() {
            return Err(ConfigError::Invalid("snr_test_db grid is empty".into()));
        }
        if self.eval.snr_test_db.iter().any(|s| !s.is_finite()) {
            return Err(ConfigError::Invalid(
                "snr_test_db entries must be finite".into(),
            ));
        }
        if self.eval.seeds.is_empty() {
            return Err(ConfigError::Invalid("seed list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.eval.seeds {
            if !seen.insert(s) {
                return Err(ConfigError::Invalid(format!(
                    "seed {s} appears more than once"
                )));
            }
        }
        Ok(())
    }

    /// Scheme-dependent checks on top of [`validate`](Self::validate).
    pub fn validate_for(&self, scheme: Scheme) -> Result<(), ConfigError> {
        self.validate()?;
        if scheme == Scheme::Oma && self.channel.q_total % 2 != 0 {
            return Err(ConfigError::Invalid(format!(
                "OMA splits the symbol budget in two, so q_total must be even (got {})",
                self.channel.q_total
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            obs_dim: self.dataset.obs_dim,
            feature_dim: self.model.feature_dim,
            symbol_budget: self.channel.q_total,
            classes: self.dataset.train_identities,
            feat_hidden: self.model.feat_hidden.clone(),
            enc_hidden: self.model.enc_hidden.clone(),
            dec_hidden: self.model.dec_hidden.clone(),
            leaky_slope: self.model.leaky_slope,
        }
    }

    pub fn net_spec(&self, scheme: Scheme) -> NetSpec {
        let mut spec = NetSpec::new(
            self.dims(),
            scheme,
            self.model.adaptation,
            self.channel.kind,
        );
        spec.csi_mode = self.model.csi_mode;
        if let Some(p) = self.channel.tx_power {
            spec.tx_power = p;
        }
        spec
    }

    /// Content hash of the whole document. Field order is fixed by the struct
    /// definitions, so equal configs hash equal.
    pub fn fingerprint(&self) -> String {
        hash_json(self)
    }

    /// Content hash of the dataset section alone; stage checkpoints carry it
    /// so weights never silently cross datasets.
    pub fn data_tag(&self) -> String {
        format!("ds{}", &hash_json(&self.dataset)[..16])
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialization cannot fail");
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected_in_every_section() {
        for json in [
            r#"{"frobnicate": 1}"#,
            r#"{"dataset": {"obs_dim": 64, "frobnicate": 1}}"#,
            r#"{"model": {"frobnicate": 1}}"#,
            r#"{"channel": {"frobnicate": 1}}"#,
            r#"{"training": {"frobnicate": 1}}"#,
            r#"{"eval": {"frobnicate": 1}}"#,
        ] {
            let parsed: Result<ExperimentConfig, _> = serde_json::from_str(json);
            assert!(parsed.is_err(), "should reject {json}");
        }
    }

    #[test]
    fn empty_object_is_the_default_config() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn oma_requires_even_budget() {
        let mut cfg = ExperimentConfig::default();
        cfg.channel.q_total = 63;
        assert!(cfg.validate().is_ok());
        assert!(cfg.validate_for(Scheme::Oma).is_err());
        assert!(cfg.validate_for(Scheme::Noma).is_ok());
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.eval.seeds = vec![1, 2, 1];
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn net_spec_wires_sections_together() {
        let mut cfg = ExperimentConfig::default();
        cfg.channel.q_total = 32;
        cfg.dataset.obs_dim = 48;
        cfg.dataset.train_identities = 77;

        let spec = cfg.net_spec(Scheme::Noma);
        assert_eq!(spec.dims.symbol_budget, 32);
        assert_eq!(spec.dims.obs_dim, 48);
        assert_eq!(spec.dims.classes, 77);
        assert_eq!(spec.tx_power, 0.5);

        cfg.channel.tx_power = Some(0.25);
        assert_eq!(cfg.net_spec(Scheme::Noma).tx_power, 0.25);
        assert_eq!(cfg.net_spec(Scheme::Oma).tx_power, 0.25);
    }

    #[test]
    fn fingerprint_tracks_content_and_data_tag_tracks_dataset_only() {
        let base = ExperimentConfig::default();
        let mut changed = base.clone();
        changed.training.lambda_cos = 0.3;
        assert_ne!(base.fingerprint(), changed.fingerprint());
        assert_eq!(base.data_tag(), changed.data_tag());

        let mut other_data = base.clone();
        other_data.dataset.seed = 9;
        assert_ne!(base.data_tag(), other_data.data_tag());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut cfg = ExperimentConfig::default();
        cfg.eval.seeds = vec![3, 1, 4];
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }
}
