//! Two-device collaborative semantic communication over a multiple access
//! channel.
//!
//! Two devices observe correlated views of the same source, encode task
//! features with a learned joint source-channel code, and share one wireless
//! medium — either orthogonally (each device gets half the symbol budget) or
//! by superposition (both use the full budget and their signals add). A fusion
//! receiver decodes both feature vectors and answers person re-identification
//! queries against a gallery. A digital baseline quantizes features, bounds
//! them with an entropy model, and transmits at the multiple-access capacity.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`rng`] — dense `f64` tensors and counter-derived RNG streams;
//! * [`ad`] — reverse-mode differentiation with exact adjoints;
//! * [`channel`] — complex baseband models (AWGN, Rayleigh block fading,
//!   orthogonal and superposed multiple access);
//! * [`dataset`] — synthetic correlated two-view observations;
//! * [`nets`] — encoder/decoder/classifier graph builders and checkpoints;
//! * [`digital`] — quantization, entropy coding bound, capacity baseline;
//! * [`training`] — the staged training pipeline;
//! * [`retrieval`] — gallery construction and top-1 evaluation;
//! * [`config`], [`sweep`], [`selfcheck`] — experiment orchestration.

pub mod ad;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod digital;
pub mod nets;
pub mod parallel;
pub mod retrieval;
pub mod rng;
pub mod selfcheck;
pub mod sweep;
pub mod tensor;
pub mod training;

pub use tensor::Tensor;
