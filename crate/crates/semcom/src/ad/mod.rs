//! Reverse-mode differentiation over dense real tensors.
//!
//! A [`Graph`] is a topologically ordered list of primitive applications over
//! named input slots and named parameters held in a [`ParamStore`]. Forward
//! evaluation produces an [`Evaluation`] holding every node value; [`Graph::backward`]
//! walks the tape in reverse and accumulates parameter gradients into the store.
//!
//! Randomness never lives inside the graph: channel noise and quantizer noise
//! are drawn by the caller and fed through input slots, so evaluation is a pure
//! function of (inputs, parameters, mode, batch-norm running statistics).

mod check;
mod ops;
mod store;

pub use check::{grad_check, GradCheckEntry, GradCheckReport, FD_STEP};
pub use ops::{
    discrete_gaussian_bits, normal_cdf, CODE_LENGTH_P_FLOOR, CODE_LENGTH_SIGMA_FLOOR,
};
pub use store::{ParamEntry, ParamStore};

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("node {node}: shape mismatch: {detail}")]
    ShapeMismatch { node: NodeId, detail: String },
    #[error("missing input slot value: {name}")]
    MissingInput { name: String },
    #[error("input {name}: expected width {expected}, got {got}")]
    InputWidth {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("unresolved parameter reference: {name}")]
    UnresolvedParam { name: String },
    #[error("missing batch-norm statistics entry: {name}")]
    MissingStats { name: String },
    #[error("node {node}: non-finite intermediate value")]
    NonFinite { node: NodeId },
    #[error("node {node}: degenerate codeword (zero norm)")]
    DegenerateCodeword { node: NodeId },
    #[error("node {node}: zero-norm operand")]
    ZeroNorm { node: NodeId },
    #[error("backward requires a forward pass in train mode")]
    BackwardWithoutTrainForward,
    #[error("loss node {node} is not a scalar")]
    NonScalarLoss { node: NodeId },
    #[error("learning rate must be positive, got {lr}")]
    NonPositiveLearningRate { lr: f64 },
    #[error("unknown graph output: {name}")]
    UnknownOutput { name: String },
}

/// Forward-evaluation mode. Train mode uses batch statistics in batch-norm
/// nodes and records running-statistic updates; infer mode uses the stored
/// running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch-norm node attributes. `stats` is the store-name prefix of the
/// running statistics (`<stats>.running_mean`, `<stats>.running_var`).
#[derive(Debug, Clone)]
pub struct BatchNormAttrs {
    pub stats: String,
    pub eps: f64,
    pub momentum: f64,
}

/// Primitive operations. Each has an exact forward definition and an exact
/// adjoint in [`ops`].
#[derive(Debug, Clone)]
pub enum Op {
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul,
    /// `[n,f] + [f]`, broadcast over rows
    BiasAdd,
    /// Elementwise sum of two equal-shape tensors.
    Add,
    /// Multiply by a fixed scalar.
    Scale(f64),
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    /// Row-wise softmax.
    Softmax,
    /// Per-feature batch normalization; args `[x, gamma, beta]`.
    BatchNorm(BatchNormAttrs),
    /// Concatenate along the last axis.
    Concat,
    /// Elementwise product.
    Mul,
    /// Elementwise product of interleaved (re, im) complex pairs.
    ComplexMul,
    /// Per-row power normalization to `symbols` complex symbols of average
    /// power `power`.
    PowerNormalize { symbols: usize, power: f64 },
    /// Mean over all coordinates of the squared difference; scalar output.
    Mse,
    /// Mean over rows of `-sum(onehot * ln softmax(logits))`; args
    /// `[logits, onehot]`; no gradient to the labels.
    SoftmaxCrossEntropy,
    /// Mean over rows of `<a,b>^2 / (|a|^2 |b|^2)`; scalar output.
    CosineSquared,
    /// Mean over rows of the total discretized-Gaussian code length in bits;
    /// args `[values, mu, sigma]`.
    GaussianCodeLength,
    /// Self-check fixture: forward `x*x`, adjoint deliberately wrong.
    WrongAdjointSquare,
}

#[derive(Debug, Clone)]
pub enum NodeKind {
    Input(usize),
    Param(String),
    Op { op: Op, args: Vec<NodeId> },
}

#[derive(Debug, Clone)]
pub struct InputSlot {
    pub name: String,
    /// Expected width of the last axis; the leading batch axis is free.
    pub width: usize,
}

/// A static computation graph. Nodes are in topological order by construction:
/// every argument index precedes the node that uses it.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<NodeKind>,
    inputs: Vec<InputSlot>,
    outputs: Vec<(String, NodeId)>,
}

/// Named tensors fed to [`Graph::eval_train`] / [`Graph::eval_infer`].
pub type Inputs = HashMap<String, Tensor>;

impl Graph {
    pub fn nodes(&self) -> &[NodeKind] {
        &self.nodes
    }

    pub fn input_slots(&self) -> &[InputSlot] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId, AdError> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| AdError::UnknownOutput {
                name: name.to_string(),
            })
    }

    /// Names of every parameter referenced by the graph, in node order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                NodeKind::Param(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Checks that every parameter reference resolves in `store`.
    pub fn validate(&self, store: &ParamStore) -> Result<(), AdError> {
        for name in self.param_names() {
            if store.get(name).is_none() {
                return Err(AdError::UnresolvedParam {
                    name: name.to_string(),
                });
            }
        }
        Ok(())
    }

    fn eval_inner(
        &self,
        inputs: &Inputs,
        store: &ParamStore,
        mode: Mode,
    ) -> Result<Evaluation, AdError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut bn_updates: Vec<BnUpdate> = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match node {
                NodeKind::Input(slot) => {
                    let slot = &self.inputs[*slot];
                    let t = inputs.get(&slot.name).ok_or_else(|| AdError::MissingInput {
                        name: slot.name.clone(),
                    })?;
                    if t.cols() != slot.width {
                        return Err(AdError::InputWidth {
                            name: slot.name.clone(),
                            expected: slot.width,
                            got: t.cols(),
                        });
                    }
                    t.clone()
                }
                NodeKind::Param(name) => store
                    .value(name)
                    .ok_or_else(|| AdError::UnresolvedParam { name: name.clone() })?
                    .clone(),
                NodeKind::Op { op, args } => {
                    let arg_vals: Vec<&Tensor> = args.iter().map(|&a| &values[a]).collect();
                    let (out, bn) = ops::forward(op, &arg_vals, mode, id, store)?;
                    if let Some(update) = bn {
                        bn_updates.push(update);
                    }
                    out
                }
            };
            if value.first_non_finite().is_some() {
                return Err(AdError::NonFinite { node: id });
            }
            values.push(value);
        }
        Ok(Evaluation {
            values,
            mode,
            bn_updates,
        })
    }

    /// Inference-mode forward pass; the store is only read, so a frozen store
    /// can be shared across workers.
    pub fn eval_infer(&self, inputs: &Inputs, store: &ParamStore) -> Result<Evaluation, AdError> {
        self.eval_inner(inputs, store, Mode::Infer)
    }

    /// Train-mode forward pass. Batch-norm nodes use batch statistics and the
    /// running statistics in `store` are updated afterwards.
    pub fn eval_train(
        &self,
        inputs: &Inputs,
        store: &mut ParamStore,
    ) -> Result<Evaluation, AdError> {
        let eval = self.eval_inner(inputs, store, Mode::Train)?;
        eval.apply_bn_updates(store)?;
        Ok(eval)
    }

    /// Train-mode forward pass without touching the running statistics.
    /// Used by the finite-difference probes in [`grad_check`].
    pub fn eval_train_frozen_stats(
        &self,
        inputs: &Inputs,
        store: &ParamStore,
    ) -> Result<Evaluation, AdError> {
        self.eval_inner(inputs, store, Mode::Train)
    }

    /// Reverse pass from the scalar node `loss`. Parameter gradients are
    /// accumulated into `store`; gradients of the input slots are returned.
    pub fn backward(
        &self,
        eval: &Evaluation,
        loss: NodeId,
        store: &mut ParamStore,
    ) -> Result<HashMap<String, Tensor>, AdError> {
        if eval.mode != Mode::Train {
            return Err(AdError::BackwardWithoutTrainForward);
        }
        if !eval.values[loss].is_scalar() {
            return Err(AdError::NonScalarLoss { node: loss });
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss] = Some(Tensor::scalar(1.0));

        let mut input_grads: HashMap<String, Tensor> = HashMap::new();
        for id in (0..=loss).rev() {
            let Some(grad) = adjoints[id].take() else {
                continue;
            };
            match &self.nodes[id] {
                NodeKind::Input(slot) => {
                    let name = &self.inputs[*slot].name;
                    match input_grads.get_mut(name) {
                        Some(acc) => accumulate(acc, &grad),
                        None => {
                            input_grads.insert(name.clone(), grad);
                        }
                    }
                }
                NodeKind::Param(name) => {
                    store.accumulate_grad(name, &grad)?;
                }
                NodeKind::Op { op, args } => {
                    let arg_vals: Vec<&Tensor> = args.iter().map(|&a| &eval.values[a]).collect();
                    let arg_grads = ops::backward(op, &arg_vals, &eval.values[id], &grad, id)?;
                    for (&arg, g) in args.iter().zip(arg_grads) {
                        if let Some(g) = g {
                            match adjoints[arg].as_mut() {
                                Some(acc) => accumulate(acc, &g),
                                None => adjoints[arg] = Some(g),
                            }
                        }
                    }
                }
            }
        }
        Ok(input_grads)
    }
}

fn accumulate(acc: &mut Tensor, delta: &Tensor) {
    debug_assert_eq!(acc.shape(), delta.shape());
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

/// Pending running-statistic update recorded by a batch-norm node during a
/// train-mode forward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnUpdate {
    pub stats: String,
    pub momentum: f64,
    pub batch_mean: Tensor,
    pub batch_var: Tensor,
}

/// Result of a forward pass: one value per node plus pending batch-norm
/// running-statistic updates (train mode only).
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Folds the recorded batch statistics into the running statistics:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    fn apply_bn_updates(&self, store: &mut ParamStore) -> Result<(), AdError> {
        for update in &self.bn_updates {
            for (suffix, batch) in [
                ("running_mean", &update.batch_mean),
                ("running_var", &update.batch_var),
            ] {
                let name = format!("{}.{suffix}", update.stats);
                let entry = store
                    .value_mut(&name)
                    .ok_or_else(|| AdError::MissingStats { name: name.clone() })?;
                for (r, b) in entry.data_mut().iter_mut().zip(batch.data()) {
                    *r = (1.0 - update.momentum) * *r + update.momentum * b;
                }
            }
        }
        Ok(())
    }
}

/// Running-statistic update rate shared by every batch-norm node.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

/// Incremental builder; node arguments always precede their consumers, so the
/// resulting graph is topologically ordered by construction.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<NodeKind>,
    inputs: Vec<InputSlot>,
    outputs: Vec<(String, NodeId)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, width: usize) -> NodeId {
        let slot = self.inputs.len();
        self.inputs.push(InputSlot {
            name: name.to_string(),
            width,
        });
        self.push(NodeKind::Input(slot))
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(NodeKind::Param(name.to_string()))
    }

    pub fn op(&mut self, op: Op, args: &[NodeId]) -> NodeId {
        for &a in args {
            assert!(a < self.nodes.len(), "argument node out of range");
        }
        self.push(NodeKind::Op {
            op,
            args: args.to_vec(),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::MatMul, &[a, b])
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.op(Op::BiasAdd, &[x, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Add, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.op(Op::Scale(c), &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.op(Op::LeakyRelu(slope), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.op(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.op(Op::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.op(Op::Softmax, &[x])
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, stats: &str) -> NodeId {
        self.op(
            Op::BatchNorm(BatchNormAttrs {
                stats: stats.to_string(),
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            }),
            &[x, gamma, beta],
        )
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Concat, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Mul, &[a, b])
    }

    pub fn complex_mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::ComplexMul, &[a, b])
    }

    pub fn power_normalize(&mut self, x: NodeId, symbols: usize, power: f64) -> NodeId {
        self.op(Op::PowerNormalize { symbols, power }, &[x])
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Mse, &[a, b])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, onehot: NodeId) -> NodeId {
        self.op(Op::SoftmaxCrossEntropy, &[logits, onehot])
    }

    pub fn cosine_squared(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::CosineSquared, &[a, b])
    }

    pub fn gaussian_code_length(&mut self, values: NodeId, mu: NodeId, sigma: NodeId) -> NodeId {
        self.op(Op::GaussianCodeLength, &[values, mu, sigma])
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn finish(self) -> Graph {
        Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }

    fn push(&mut self, node: NodeKind) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }
}
