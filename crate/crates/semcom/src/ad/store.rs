//! Named parameter storage shared by every network component.
//!
//! Keys are dotted paths (`feat1.fc0.weight`, `jscc_enc1.af2.fc1.bias`, ...)
//! held in a `BTreeMap`, so iteration order is the lexicographic key order —
//! checkpoints and optimizer sweeps are deterministic for free. Non-trainable
//! entries carry batch-norm running statistics.

use std::collections::BTreeMap;

use crate::ad::AdError;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    /// SGD momentum buffer; reset at the start of each training stage.
    pub momentum: Tensor,
    pub trainable: bool,
}

impl ParamEntry {
    fn new(value: Tensor, trainable: bool) -> Self {
        let zeros = Tensor::new(value.shape().to_vec(), vec![0.0; value.len()])
            .expect("zeros match value shape");
        Self {
            grad: zeros.clone(),
            momentum: zeros,
            value,
            trainable,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Re-inserting an existing name replaces it.
    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        self.entries
            .insert(name.to_string(), ParamEntry::new(value, trainable));
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterates entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar parameters in trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<(), AdError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| AdError::UnresolvedParam {
                name: name.to_string(),
            })?;
        debug_assert_eq!(entry.grad.shape(), delta.shape());
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().fill(0.0);
        }
    }

    /// Clears momentum buffers; called when a new training stage begins so
    /// stale velocity from a previous objective cannot leak across stages.
    pub fn reset_momentum(&mut self) {
        for entry in self.entries.values_mut() {
            entry.momentum.data_mut().fill(0.0);
        }
    }

    /// One SGD-with-momentum step over every trainable entry:
    ///
    /// ```text
    /// buf   <- momentum * buf + (grad + weight_decay * value)
    /// value <- value - lr * buf
    /// ```
    ///
    /// All gradients are zeroed afterwards.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) -> Result<(), AdError> {
        self.sgd_step_grouped(|_| Some(lr), momentum, weight_decay)
    }

    /// SGD step with a per-parameter learning rate. `lr_for` returning `None`
    /// freezes that entry for this step (its gradient is still zeroed).
    pub fn sgd_step_grouped(
        &mut self,
        lr_for: impl Fn(&str) -> Option<f64>,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<(), AdError> {
        for (name, entry) in self.entries.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let Some(lr) = lr_for(name) else {
                entry.grad.data_mut().fill(0.0);
                continue;
            };
            if lr <= 0.0 {
                return Err(AdError::NonPositiveLearningRate { lr });
            }
            for i in 0..entry.value.len() {
                let g = entry.grad.data()[i] + weight_decay * entry.value.data()[i];
                let buf = momentum * entry.momentum.data()[i] + g;
                entry.momentum.data_mut()[i] = buf;
                entry.value.data_mut()[i] -= lr * buf;
            }
            entry.grad.data_mut().fill(0.0);
        }
        // Entries outside every group keep a clean slate too.
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().fill(0.0);
        }
        Ok(())
    }

    /// Copies every entry of `other` into `self`, replacing same-named
    /// entries. Used to merge per-component stores into one training store.
    pub fn absorb(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }
}

#[cfg(test)]
mod test {
    use super::*;

    #[test]
    fn sgd_matches_hand_computation() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0]), true);
        store
            .accumulate_grad("w", &Tensor::vector(vec![0.5, 0.5]))
            .unwrap();
        // buf = grad + decay * value = [0.5 + 0.01, 0.5 - 0.02]
        // value = value - 0.1 * buf
        store.sgd_step(0.1, 0.9, 0.01).unwrap();
        let w = store.value("w").unwrap().data().to_vec();
        assert!((w[0] - (1.0 - 0.1 * 0.51)).abs() < 1e-15);
        assert!((w[1] - (-2.0 - 0.1 * 0.48)).abs() < 1e-15);
        // Second step with zero grads still moves along the momentum buffer
        // (weight decay keeps feeding it).
        let buf0 = store.get("w").unwrap().momentum.data()[0];
        assert!((buf0 - 0.51).abs() < 1e-15);
    }

    #[test]
    fn frozen_groups_keep_values_but_drop_grads() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0), true);
        store.insert("b", Tensor::scalar(1.0), true);
        store.accumulate_grad("a", &Tensor::scalar(1.0)).unwrap();
        store.accumulate_grad("b", &Tensor::scalar(1.0)).unwrap();
        store
            .sgd_step_grouped(
                |name| if name == "a" { Some(0.5) } else { None },
                0.0,
                0.0,
            )
            .unwrap();
        assert!((store.value("a").unwrap().item() - 0.5).abs() < 1e-15);
        assert!((store.value("b").unwrap().item() - 1.0).abs() < 1e-15);
        assert_eq!(store.get("b").unwrap().grad.item(), 0.0);
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0), true);
        assert!(matches!(
            store.sgd_step(0.0, 0.9, 0.0),
            Err(AdError::NonPositiveLearningRate { .. })
        ));
    }

    #[test]
    fn non_trainable_entries_never_move() {
        let mut store = ParamStore::new();
        store.insert("bn.running_mean", Tensor::vector(vec![3.0]), false);
        store.sgd_step(0.1, 0.9, 0.5).unwrap();
        assert_eq!(store.value("bn.running_mean").unwrap().data()[0], 3.0);
    }
}
