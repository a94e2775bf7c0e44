//! Complex baseband channel models over interleaved `(re, im)` slices.
//!
//! A codeword of `q` complex symbols is stored as `2q` reals. All schemes are
//! normalized so the total received signal power is 1, which makes
//! `SNR = 10 log10(1 / sigma2)` comparable across them:
//!
//! * point-to-point / orthogonal slots: one transmitter per slot at power 1;
//! * superposition: two transmitters at power 1/2 each, received sum power 1.
//!
//! Noise is drawn by the caller-supplied RNG; `sigma2 == 0` is special-cased
//! to perform no draws at all, so a noiseless transmission is bitwise equal to
//! the plain gain product (and leaves the RNG untouched).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Fading gains with magnitude below this cannot be equalized.
pub const H_MIN: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("negative noise variance: {sigma2}")]
    NegativeNoiseVariance { sigma2: f64 },
    #[error("fading gain magnitude {mag:.3e} is below the equalization floor")]
    VanishingGain { mag: f64 },
    #[error("codeword length {len} is not an even number of reals")]
    OddLength { len: usize },
    #[error("codeword slots differ in length: {a} vs {b}")]
    SlotMismatch { a: usize, b: usize },
}

/// A single complex block-fading gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gain {
    pub re: f64,
    pub im: f64,
}

impl Gain {
    pub const UNITY: Gain = Gain { re: 1.0, im: 0.0 };

    pub fn abs2(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn abs(self) -> f64 {
        self.abs2().sqrt()
    }
}

/// Converts an SNR in dB to the complex noise variance for a given received
/// signal power: `sigma2 = p_rx / 10^(snr_db / 10)`. Every scheme here is
/// normalized to `p_rx = 1`.
pub fn snr_to_sigma2(snr_db: f64, p_rx: f64) -> f64 {
    p_rx / 10f64.powf(snr_db / 10.0)
}

/// Channel state held constant over one retrieval task: both block-fading
/// gains plus the noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadingState {
    pub h1: Gain,
    pub h2: Gain,
    pub sigma2: f64,
}

impl FadingState {
    /// AWGN state: unit gains, only noise.
    pub fn awgn(sigma2: f64) -> Self {
        Self {
            h1: Gain::UNITY,
            h2: Gain::UNITY,
            sigma2,
        }
    }
}

/// Scales one interleaved row to total energy `symbols * power` (average
/// complex-symbol power `power`). Returns the pre-normalization Euclidean
/// norm, or `None` for an all-zero row.
pub fn normalize_row_in_place(row: &mut [f64], symbols: usize, power: f64) -> Option<f64> {
    debug_assert_eq!(row.len(), 2 * symbols);
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let scale = (symbols as f64 * power).sqrt() / norm;
    for v in row.iter_mut() {
        *v *= scale;
    }
    Some(norm)
}

/// Draws a Rayleigh block-fading gain `h ~ CN(0, sigma_h2)`: real and
/// imaginary parts are independent `N(0, sigma_h2 / 2)`, so
/// `E|h|^2 = sigma_h2` (unit average power at the default variance 1).
pub fn sample_fading(sigma_h2: f64, rng: &mut impl Rng) -> Gain {
    let half = Normal::new(0.0, (sigma_h2 / 2.0).sqrt()).expect("valid std");
    Gain {
        re: half.sample(rng),
        im: half.sample(rng),
    }
}

/// Multiplies every symbol by the block gain `h`. A unit gain is a true
/// no-op, so the noiseless unit-gain path is bitwise transparent.
pub fn apply_gain_in_place(row: &mut [f64], h: Gain) {
    if h == Gain::UNITY {
        return;
    }
    for pair in row.chunks_exact_mut(2) {
        let (re, im) = (pair[0], pair[1]);
        pair[0] = re * h.re - im * h.im;
        pair[1] = re * h.im + im * h.re;
    }
}

/// Adds circularly symmetric complex Gaussian noise of total variance
/// `sigma2` per symbol (`sigma2 / 2` per real component). `sigma2 == 0`
/// draws nothing.
pub fn awgn_in_place(row: &mut [f64], sigma2: f64, rng: &mut impl Rng) -> Result<(), ChannelError> {
    if sigma2 < 0.0 {
        return Err(ChannelError::NegativeNoiseVariance { sigma2 });
    }
    if sigma2 == 0.0 {
        return Ok(());
    }
    let component = Normal::new(0.0, (sigma2 / 2.0).sqrt()).expect("valid std");
    for v in row.iter_mut() {
        *v += component.sample(rng);
    }
    Ok(())
}

/// Coherent equalization `y * conj(h) / |h|^2`, undoing a block gain exactly
/// in the noiseless case. Fails for gains below [`H_MIN`].
pub fn equalize_in_place(row: &mut [f64], h: Gain) -> Result<(), ChannelError> {
    let mag = h.abs();
    if mag < H_MIN {
        return Err(ChannelError::VanishingGain { mag });
    }
    if h == Gain::UNITY {
        return Ok(());
    }
    let inv = 1.0 / h.abs2();
    for pair in row.chunks_exact_mut(2) {
        let (re, im) = (pair[0], pair[1]);
        pair[0] = (re * h.re + im * h.im) * inv;
        pair[1] = (im * h.re - re * h.im) * inv;
    }
    Ok(())
}

fn check_even(x: &[f64]) -> Result<(), ChannelError> {
    if x.len() % 2 != 0 {
        return Err(ChannelError::OddLength { len: x.len() });
    }
    Ok(())
}

/// Point-to-point transmission `y = h x + n`.
pub fn transmit_p2p(
    x: &[f64],
    h: Gain,
    sigma2: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, ChannelError> {
    check_even(x)?;
    let mut y = x.to_vec();
    apply_gain_in_place(&mut y, h);
    awgn_in_place(&mut y, sigma2, rng)?;
    Ok(y)
}

/// Orthogonal multiple access: each transmitter gets its own slot with its
/// own gain and an independent noise realization. Noise for the first slot is
/// drawn completely before the second, so draws are reproducible.
pub fn transmit_oma(
    x1: &[f64],
    x2: &[f64],
    h1: Gain,
    h2: Gain,
    sigma2: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>), ChannelError> {
    if x1.len() != x2.len() {
        return Err(ChannelError::SlotMismatch {
            a: x1.len(),
            b: x2.len(),
        });
    }
    let y1 = transmit_p2p(x1, h1, sigma2, rng)?;
    let y2 = transmit_p2p(x2, h2, sigma2, rng)?;
    Ok((y1, y2))
}

/// Non-orthogonal multiple access: both codewords superpose in the same slot,
/// `y = h1 x1 + h2 x2 + n`.
pub fn transmit_noma(
    x1: &[f64],
    x2: &[f64],
    h1: Gain,
    h2: Gain,
    sigma2: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, ChannelError> {
    check_even(x1)?;
    if x1.len() != x2.len() {
        return Err(ChannelError::SlotMismatch {
            a: x1.len(),
            b: x2.len(),
        });
    }
    let mut y = x1.to_vec();
    apply_gain_in_place(&mut y, h1);
    let mut y2 = x2.to_vec();
    apply_gain_in_place(&mut y2, h2);
    for (a, b) in y.iter_mut().zip(&y2) {
        *a += b;
    }
    awgn_in_place(&mut y, sigma2, rng)?;
    Ok(y)
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::rng::{substream, StreamPurpose};

    #[test]
    fn snr_conversion_reference_points() {
        assert!((snr_to_sigma2(0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((snr_to_sigma2(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((snr_to_sigma2(-6.0, 1.0) - 3.9810717055349722).abs() < 1e-12);
    }

    #[test]
    fn normalization_hits_exact_energy() {
        let mut row = vec![3.0, -1.0, 2.0, 0.5];
        normalize_row_in_place(&mut row, 2, 0.5).unwrap();
        let energy: f64 = row.iter().map(|v| v * v).sum();
        assert!((energy - 1.0).abs() < 1e-12, "energy {energy}");
        assert!(normalize_row_in_place(&mut [0.0, 0.0], 1, 1.0).is_none());
    }

    #[test]
    fn equalization_undoes_the_gain() {
        let h = Gain { re: 0.6, im: -1.1 };
        let x = vec![1.0, 2.0, -0.5, 0.25];
        let mut y = x.clone();
        apply_gain_in_place(&mut y, h);
        equalize_in_place(&mut y, h).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_gain_is_an_error() {
        let err = equalize_in_place(&mut [1.0, 0.0], Gain { re: 0.0, im: 0.0 }).unwrap_err();
        assert!(matches!(err, ChannelError::VanishingGain { .. }));
    }

    #[test]
    fn zero_noise_leaves_the_rng_untouched() {
        let mut rng = substream(7, StreamPurpose::Channel, 0);
        let before: u64 = rng.random();
        let mut rng = substream(7, StreamPurpose::Channel, 0);
        let y = transmit_p2p(&[1.0, -1.0], Gain::UNITY, 0.0, &mut rng).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);
        let after: u64 = rng.random();
        assert_eq!(before, after, "noiseless path must not consume draws");
    }

    #[test]
    fn superposition_is_the_sum_of_gained_codewords() {
        let mut rng = substream(1, StreamPurpose::Channel, 0);
        let h1 = Gain { re: 0.5, im: 0.5 };
        let h2 = Gain { re: -1.0, im: 0.25 };
        let x1 = vec![1.0, 0.0];
        let x2 = vec![0.0, 1.0];
        let y = transmit_noma(&x1, &x2, h1, h2, 0.0, &mut rng).unwrap();
        // h1 * 1 = 0.5 + 0.5i; h2 * i = -0.25 - 1.0i; sum = 0.25 - 0.5i
        assert!((y[0] - 0.25).abs() < 1e-15);
        assert!((y[1] - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_slots_are_rejected() {
        let mut rng = substream(0, StreamPurpose::Channel, 0);
        let err = transmit_oma(&[1.0, 0.0], &[1.0, 0.0, 0.0, 0.0], Gain::UNITY, Gain::UNITY, 0.1, &mut rng)
            .unwrap_err();
        assert_eq!(
            err,
            ChannelError::SlotMismatch { a: 2, b: 4 },
        );
    }
}
