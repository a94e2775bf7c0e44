//! Name-derived deterministic parameter initialization.
//!
//! Each parameter's init stream is keyed by a hash of its name, not by
//! creation order, so the same component initializes identically no matter
//! which graph registers it first — a stage-1 checkpoint trained under one
//! scheme drops into any other scheme sharing those components.

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::rng::{substream, StreamPurpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum InitKind {
    /// `N(0, 2 / fan_in)` — layers feeding a (leaky) ReLU.
    He,
    /// `N(0, 1 / fan_in)` — linear outputs, sigmoid gates, classifiers.
    Linear,
    Zeros,
    Ones,
}

/// Stable per-name stream index: the first eight little-endian bytes of
/// SHA-256 of the name.
pub(crate) fn name_stream_index(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

pub(crate) fn init_tensor(seed: u64, name: &str, shape: &[usize], kind: InitKind) -> Tensor {
    let len: usize = shape.iter().product();
    let data = match kind {
        InitKind::Zeros => vec![0.0; len],
        InitKind::Ones => vec![1.0; len],
        InitKind::He | InitKind::Linear => {
            let fan_in = shape[0].max(1) as f64;
            let var = match kind {
                InitKind::He => 2.0 / fan_in,
                _ => 1.0 / fan_in,
            };
            let dist = Normal::new(0.0, var.sqrt()).expect("valid std");
            let mut rng = substream(seed, StreamPurpose::Init, name_stream_index(name));
            (0..len).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape consistent with length")
}

#[cfg(test)]
mod test {
    use super::*;

    #[test]
    fn init_depends_on_name_not_registration_order() {
        let a = init_tensor(7, "feat1.fc0.weight", &[4, 3], InitKind::He);
        let a_again = init_tensor(7, "feat1.fc0.weight", &[4, 3], InitKind::He);
        let b = init_tensor(7, "feat2.fc0.weight", &[4, 3], InitKind::He);
        assert_eq!(a, a_again);
        assert_ne!(a, b);
    }

    #[test]
    fn seed_changes_all_draws() {
        let a = init_tensor(7, "enc1.fc0.weight", &[4, 3], InitKind::He);
        let b = init_tensor(8, "enc1.fc0.weight", &[4, 3], InitKind::He);
        assert_ne!(a, b);
    }
}
