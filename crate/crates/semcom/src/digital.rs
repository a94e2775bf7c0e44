//! Digital separation baseline: quantize features, bound their rate with a
//! learned entropy model, and transmit over the multiple access channel at
//! the equal-rate capacity point.
//!
//! The baseline is deliberately idealized in the digital chain — entropy
//! coding is assumed to hit the model's code length exactly and channel
//! coding to achieve capacity — so any deficit against the joint
//! source-channel schemes comes from the separation itself, not from a weak
//! implementation of the digital components.

use rand::Rng;
use thiserror::Error;

use crate::ad::ParamStore;

#[derive(Debug, Error, PartialEq)]
pub enum DigitalError {
    #[error("entropy model parameters missing for prefix {0}")]
    MissingPrior(String),
    #[error("entropy model dimension {got} does not match feature dimension {expected}")]
    PriorDim { expected: usize, got: usize },
    #[error("capacity inputs must be positive: {0}")]
    InvalidCapacityInput(String),
}

/// Rounds to the nearest integer, halves away from zero (`0.5 -> 1`,
/// `-0.5 -> -1`), matching the straight-through surrogate's centering.
pub fn quantize_infer(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.round()).collect()
}

/// Training-time quantizer surrogate: additive noise uniform in
/// `[-0.5, 0.5)`, drawn here so the graph stays deterministic.
pub fn uniform_noise(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random::<f64>() - 0.5).collect()
}

/// Factorized discretized-Gaussian prior over quantized feature coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyModel {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl EntropyModel {
    /// Reads `<prefix>.mu` / `<prefix>.sigma` from a parameter store.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self, DigitalError> {
        let mu = store
            .value(&format!("{prefix}.mu"))
            .ok_or_else(|| DigitalError::MissingPrior(prefix.to_string()))?;
        let sigma = store
            .value(&format!("{prefix}.sigma"))
            .ok_or_else(|| DigitalError::MissingPrior(prefix.to_string()))?;
        Ok(Self {
            mu: mu.data().to_vec(),
            sigma: sigma.data().to_vec(),
        })
    }

    /// Total code length of `values` in bits under the per-coordinate bins
    /// `P(w) = Phi((w - mu + 1/2) / sigma) - Phi((w - mu - 1/2) / sigma)`,
    /// with the same probability floor as the training-time loss.
    pub fn code_length_bits(&self, values: &[f64]) -> Result<f64, DigitalError> {
        if values.len() != self.mu.len() {
            return Err(DigitalError::PriorDim {
                expected: self.mu.len(),
                got: values.len(),
            });
        }
        Ok(values
            .iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(&w, (&mu, &sigma))| crate::ad::discrete_gaussian_bits(w, mu, sigma))
            .sum())
    }
}

/// Per-device rate (bits per channel block) at the equal-rate point of the
/// two-user multiple access capacity region with `q` complex symbols:
///
/// ```text
/// R = min( q/2 * log2(1 + (|h1|^2 + |h2|^2) P / sigma2),
///          q   * log2(1 + |h1|^2 P / sigma2),
///          q   * log2(1 + |h2|^2 P / sigma2) )
/// ```
///
/// The first term splits the sum capacity evenly; the other two are the
/// single-user constraints.
pub fn mac_equal_rate_capacity(
    symbols: usize,
    power: f64,
    sigma2: f64,
    h1_abs2: f64,
    h2_abs2: f64,
) -> Result<f64, DigitalError> {
    if symbols == 0 || power <= 0.0 || sigma2 <= 0.0 {
        return Err(DigitalError::InvalidCapacityInput(format!(
            "symbols {symbols}, power {power}, sigma2 {sigma2}"
        )));
    }
    let q = symbols as f64;
    let sum = q / 2.0 * (1.0 + (h1_abs2 + h2_abs2) * power / sigma2).log2();
    let single1 = q * (1.0 + h1_abs2 * power / sigma2).log2();
    let single2 = q * (1.0 + h2_abs2 * power / sigma2).log2();
    Ok(sum.min(single1).min(single2))
}

/// Outcome of one digital transmission attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum DigitalOutcome {
    /// Both messages fit inside the per-device rate; the receiver recovers
    /// the quantized features exactly (entropy coding is lossless).
    Delivered { v1: Vec<f64>, v2: Vec<f64> },
    /// At least one message exceeds its rate share; the block is lost.
    Outage {
        bits1: f64,
        bits2: f64,
        rate_per_device: f64,
    },
}

/// Quantizes both feature vectors, prices them with their entropy models and
/// delivers them iff each fits within the equal-rate capacity share.
#[allow(clippy::too_many_arguments)]
pub fn digital_transmit(
    f1: &[f64],
    f2: &[f64],
    prior1: &EntropyModel,
    prior2: &EntropyModel,
    symbols: usize,
    power: f64,
    sigma2: f64,
    h1_abs2: f64,
    h2_abs2: f64,
) -> Result<DigitalOutcome, DigitalError> {
    let v1 = quantize_infer(f1);
    let v2 = quantize_infer(f2);
    let bits1 = prior1.code_length_bits(&v1)?;
    let bits2 = prior2.code_length_bits(&v2)?;
    let rate = mac_equal_rate_capacity(symbols, power, sigma2, h1_abs2, h2_abs2)?;
    if bits1 <= rate && bits2 <= rate {
        Ok(DigitalOutcome::Delivered { v1, v2 })
    } else {
        Ok(DigitalOutcome::Outage {
            bits1,
            bits2,
            rate_per_device: rate,
        })
    }
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::rng::{substream, StreamPurpose};

    #[test]
    fn rounding_sends_halves_away_from_zero() {
        assert_eq!(
            quantize_infer(&[0.5, -0.5, 2.5, -2.5, 0.49, -0.49]),
            vec![1.0, -1.0, 3.0, -3.0, 0.0, -0.0]
        );
    }

    #[test]
    fn surrogate_noise_stays_in_the_unit_bin() {
        let mut rng = substream(3, StreamPurpose::Quantizer, 0);
        let noise = uniform_noise(10_000, &mut rng);
        assert!(noise.iter().all(|v| (-0.5..0.5).contains(v)));
        let mean: f64 = noise.iter().sum::<f64>() / noise.len() as f64;
        assert!(mean.abs() < 0.02, "uniform noise mean {mean}");
    }

    #[test]
    fn capacity_reference_point() {
        // 32 symbols, unit power and gains, unit noise: the sum constraint
        // binds and gives 16 log2(3) bits per device.
        let r = mac_equal_rate_capacity(32, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((r - 16.0 * 3.0f64.log2()).abs() < 1e-12, "rate {r}");
    }

    #[test]
    fn weak_user_constraint_can_bind() {
        // A nearly-dead first link caps the equal rate through the
        // single-user constraint rather than the sum constraint.
        let r = mac_equal_rate_capacity(32, 1.0, 1.0, 1e-3, 1.0).unwrap();
        assert!((r - 32.0 * (1.0 + 1e-3f64).log2()).abs() < 1e-12);
    }

    #[test]
    fn outage_triggers_when_bits_exceed_rate() {
        let prior = EntropyModel {
            mu: vec![0.0; 4],
            sigma: vec![1.0; 4],
        };
        // Huge quantized values are priced at the 64-bit floor per
        // coordinate, far above any sensible rate.
        let far = vec![1000.0; 4];
        let near = vec![0.0; 4];
        let out = digital_transmit(&far, &near, &prior, &prior, 4, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(out, DigitalOutcome::Outage { bits1, .. } if bits1 > 250.0));
        let ok = digital_transmit(&near, &near, &prior, &prior, 32, 1.0, 0.001, 1.0, 1.0).unwrap();
        assert!(matches!(ok, DigitalOutcome::Delivered { .. }));
    }

    #[test]
    fn code_length_matches_the_loss_bins() {
        let prior = EntropyModel {
            mu: vec![0.0],
            sigma: vec![1.0],
        };
        let bits = prior.code_length_bits(&[0.0]).unwrap();
        // Independent closed form: -log2(Phi(1/2) - Phi(-1/2)).
        let expected = -(libm::erf(0.5 / std::f64::consts::SQRT_2)).log2();
        assert!((bits - expected).abs() < 1e-12, "bits {bits} vs {expected}");
    }
}
