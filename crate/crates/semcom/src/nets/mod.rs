//! Network architectures: semantic feature encoders, JSCC encoder/decoder
//! pairs (plain, SNR-aware, fading-aware), AF conditioning modules,
//! classifiers and view pooling — all expressed as [`crate::ad`] graphs over
//! named parameters.
//!
//! Parameters are registered on first use with name-derived deterministic
//! initialization, so any two graphs that mention the same component (say,
//! `feat1`) resolve to identical tensors regardless of build order. Builders
//! are therefore idempotent against a shared [`ParamStore`].

mod builder;
mod checkpoint;
mod init;

pub use builder::{
    build_decode, build_digital, build_encode, build_feature, build_t1, build_t2, build_t3,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ad::ParamStore;

/// Transmission scheme under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One device transmits its view over the whole bandwidth.
    Single,
    /// Orthogonal multiple access: each device gets half the symbols.
    Oma,
    /// Non-orthogonal multiple access: superposition over all symbols.
    Noma,
    /// Digital separation baseline (quantize + entropy model + capacity).
    Digital,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Single, Scheme::Oma, Scheme::Noma, Scheme::Digital];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Single => "single",
            Scheme::Oma => "oma",
            Scheme::Noma => "noma",
            Scheme::Digital => "digital",
        }
    }

    pub fn is_two_device(self) -> bool {
        !matches!(self, Scheme::Single)
    }

    /// Default per-transmitter power: NOMA transmitters split the unit
    /// received power so that every scheme is compared at equal total
    /// transmit energy.
    pub fn default_tx_power(self) -> f64 {
        match self {
            Scheme::Noma => 0.5,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Scheme::Single),
            "oma" => Ok(Scheme::Oma),
            "noma" => Ok(Scheme::Noma),
            "digital" => Ok(Scheme::Digital),
            other => Err(format!(
                "unknown scheme '{other}' (expected single|oma|noma|digital)"
            )),
        }
    }
}

/// How the JSCC networks condition on channel state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    /// No conditioning; trained for one fixed channel.
    Fixed,
    /// AF modules in encoders and decoders, fed the target SNR (dB / 10).
    SnrAware,
    /// AF modules in the decoders only, fed the raw fading gains.
    FadingAware,
}

/// Which gains a fading-aware decoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsiMode {
    /// Both links' gains (default: both decoders read the full signal).
    Both,
    /// Only the gain of the decoder's own link.
    OwnLink,
}

/// Channel family the model trains and evaluates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static model dimensions plus the hidden-layer widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Observation dimension `p` per view.
    pub obs_dim: usize,
    /// Semantic feature dimension `r`.
    pub feature_dim: usize,
    /// Total complex channel uses `q` per retrieval task, shared by every
    /// scheme (bandwidth fairness).
    pub symbol_budget: usize,
    /// Number of training identities (classifier width).
    pub classes: usize,
    pub feat_hidden: Vec<usize>,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            obs_dim: 64,
            feature_dim: 32,
            symbol_budget: 64,
            classes: 100,
            feat_hidden: vec![128, 64],
            enc_hidden: vec![256, 128],
            dec_hidden: vec![256, 256, 128],
            leaky_slope: 0.01,
        }
    }
}

/// Everything the graph builders need to lay out one experiment's networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub dims: ModelDims,
    pub scheme: Scheme,
    pub adaptation: Adaptation,
    pub csi_mode: CsiMode,
    pub channel: ChannelKind,
    /// Per-transmitter power budget.
    pub tx_power: f64,
}

impl NetSpec {
    pub fn new(
        dims: ModelDims,
        scheme: Scheme,
        adaptation: Adaptation,
        channel: ChannelKind,
    ) -> Self {
        Self {
            tx_power: scheme.default_tx_power(),
            dims,
            scheme,
            adaptation,
            csi_mode: CsiMode::Both,
            channel,
        }
    }

    /// Complex symbols per transmitter: OMA halves the budget, everyone else
    /// uses it whole.
    pub fn codeword_symbols(&self) -> usize {
        match self.scheme {
            Scheme::Oma => self.dims.symbol_budget / 2,
            _ => self.dims.symbol_budget,
        }
    }

    /// Real width of the signal entering each decoder: always `2q`
    /// (OMA concatenates two half-budget slots).
    pub fn decoder_input_width(&self) -> usize {
        2 * self.dims.symbol_budget
    }

    /// Width of the encoder-side conditioning vector, if the encoders carry
    /// AF modules at all.
    pub fn enc_csi_width(&self) -> Option<usize> {
        match self.adaptation {
            Adaptation::SnrAware => Some(1),
            _ => None,
        }
    }

    /// Width of the decoder-side conditioning vector, if any.
    pub fn dec_csi_width(&self) -> Option<usize> {
        match self.adaptation {
            Adaptation::Fixed => None,
            Adaptation::SnrAware => Some(1),
            Adaptation::FadingAware => Some(match (self.scheme, self.csi_mode) {
                (Scheme::Single, _) => 2,
                (_, CsiMode::OwnLink) => 2,
                (_, CsiMode::Both) => 4,
            }),
        }
    }

    /// Whether the received signal is zero-forcing equalized before the
    /// decoder (per-link channels with a plain decoder). Fading-aware
    /// decoders consume the raw signal and learn from the gains instead;
    /// superposed signals cannot be equalized at all.
    pub fn equalizes(&self) -> bool {
        self.channel == ChannelKind::Rayleigh
            && self.adaptation != Adaptation::FadingAware
            && self.scheme != Scheme::Noma
    }
}

/// One of the two capture devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Device {
    One,
    Two,
}

impl Device {
    pub fn index(self) -> usize {
        match self {
            Device::One => 1,
            Device::Two => 2,
        }
    }
}

// Input-slot names shared across graph builders and their callers.
pub const IN_S1: &str = "s1";
pub const IN_S2: &str = "s2";
pub const IN_V1: &str = "v1";
pub const IN_V2: &str = "v2";
pub const IN_LABELS: &str = "labels";
/// Shared-slot noise (NOMA, single device), width `2 q_c`.
pub const IN_NOISE: &str = "noise";
pub const IN_NOISE1: &str = "noise1";
pub const IN_NOISE2: &str = "noise2";
/// Fading gains expanded to codeword width (gain repeated per symbol).
pub const IN_H1: &str = "h1";
pub const IN_H2: &str = "h2";
/// Zero-forcing coefficients `conj(h)/|h|^2` expanded to codeword width.
pub const IN_EQ1: &str = "eq1";
pub const IN_EQ2: &str = "eq2";
pub const IN_CSI_ENC: &str = "csi_enc";
pub const IN_CSI_DEC1: &str = "csi_dec1";
pub const IN_CSI_DEC2: &str = "csi_dec2";
/// Received (already channel-processed) signal for decode-only graphs.
pub const IN_Y: &str = "y";
/// Quantizer surrogate noise, one slot per device.
pub const IN_U1: &str = "u1";
pub const IN_U2: &str = "u2";
pub const IN_S: &str = "s";

pub const OUT_LOSS: &str = "loss";
pub const OUT_V1: &str = "v1";
pub const OUT_V2: &str = "v2";
pub const OUT_VHAT1: &str = "vhat1";
pub const OUT_VHAT2: &str = "vhat2";
pub const OUT_X1: &str = "x1";
pub const OUT_X2: &str = "x2";
pub const OUT_POOLED: &str = "pooled";
pub const OUT_LOGITS_MAIN: &str = "logits_main";
pub const OUT_PROBS_MAIN: &str = "probs_main";
pub const OUT_CE: &str = "ce";
pub const OUT_COS2: &str = "cos2";
pub const OUT_BITS: &str = "bits";
pub const OUT_V: &str = "v";
pub const OUT_X: &str = "x";

/// Names every parameter belonging to `component` ("feat", "jscc", "cls",
/// "prior") — the granularity of the stage-3 per-component learning rates.
pub fn component_of(param_name: &str) -> &'static str {
    if param_name.starts_with("feat") {
        "feat"
    } else if param_name.starts_with("enc") || param_name.starts_with("dec") {
        "jscc"
    } else if param_name.starts_with("cls") {
        "cls"
    } else if param_name.starts_with("prior") {
        "prior"
    } else {
        "other"
    }
}

/// True if the store contains any parameter of the given component.
pub fn has_component(store: &ParamStore, component: &str) -> bool {
    store.names().any(|n| component_of(n) == component)
}
