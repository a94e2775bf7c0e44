//! Central-finite-difference validation of the reverse pass.
//!
//! For each trainable parameter referenced by the graph, a subset of
//! coordinates is perturbed by `±FD_STEP` and the numerical derivative
//! `(L+ - L-) / (2 h)` is compared against the analytic gradient with the
//! scale-aware relative error `|a - n| / max(1, |a|, |n|)`.
//!
//! Probes evaluate the graph in train mode with frozen running statistics, so
//! repeated probing never drifts the batch-norm state.

use std::collections::BTreeSet;

use crate::ad::{AdError, Graph, Inputs, NodeId, ParamStore};

/// Step size for the central differences.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// Worst relative error across the probed coordinates.
    pub max_rel_err: f64,
    /// How many coordinates were probed.
    pub probed: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Validates the analytic gradients of `graph` at the current store state.
///
/// `loss` must be a scalar node (typically a marked output). At most
/// `max_probes` coordinates per parameter are checked; larger tensors are
/// subsampled with a deterministic stride so the probe set is stable across
/// runs. The store is left exactly as found: values restored, gradients
/// zeroed, running statistics untouched.
pub fn grad_check(
    graph: &Graph,
    inputs: &Inputs,
    store: &mut ParamStore,
    loss: NodeId,
    tolerance: f64,
    max_probes: usize,
) -> Result<GradCheckReport, AdError> {
    store.zero_grads();
    let eval = graph.eval_train_frozen_stats(inputs, store)?;
    graph.backward(&eval, loss, store)?;

    let names: BTreeSet<String> = graph
        .param_names()
        .into_iter()
        .map(str::to_string)
        .collect();

    let mut entries = Vec::new();
    for name in names {
        let entry = store
            .get(&name)
            .ok_or_else(|| AdError::UnresolvedParam { name: name.clone() })?;
        if !entry.trainable {
            continue;
        }
        let analytic = entry.grad.clone();
        let len = analytic.len();
        let stride = len.div_ceil(max_probes.max(1)).max(1);
        let mut max_rel_err: f64 = 0.0;
        let mut probed = 0;
        for i in (0..len).step_by(stride) {
            let original = store.value(&name).expect("entry exists").data()[i];
            let numeric = {
                set_coord(store, &name, i, original + FD_STEP);
                let hi = loss_value(graph, inputs, store, loss)?;
                set_coord(store, &name, i, original - FD_STEP);
                let lo = loss_value(graph, inputs, store, loss)?;
                set_coord(store, &name, i, original);
                (hi - lo) / (2.0 * FD_STEP)
            };
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel_err = max_rel_err.max(rel);
            probed += 1;
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_err,
            probed,
        });
    }
    store.zero_grads();
    Ok(GradCheckReport { entries, tolerance })
}

fn set_coord(store: &mut ParamStore, name: &str, i: usize, v: f64) {
    store.value_mut(name).expect("entry exists").data_mut()[i] = v;
}

fn loss_value(
    graph: &Graph,
    inputs: &Inputs,
    store: &ParamStore,
    loss: NodeId,
) -> Result<f64, AdError> {
    let eval = graph.eval_train_frozen_stats(inputs, store)?;
    Ok(eval.value(loss).item())
}
