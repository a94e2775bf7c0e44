//! The `selfcheck` battery: a fast, deterministic audit of everything the
//! experiments lean on. Analytic gradients are probed against central finite
//! differences — once per differentiable primitive in isolation, then on
//! full composed training graphs (plain, SNR-aware, fading-aware, digital).
//! Channel statistics are measured against their configured moments, the
//! capacity and code-length formulas against independently coded oracles,
//! and the retrieval ranking against brute force. A deliberately wrong
//! adjoint must be caught, proving the probe actually bites. Each check
//! reports its worst observed error; the whole battery runs in seconds.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::ad::{grad_check, GraphBuilder, Inputs, NodeId, Op, ParamStore};
use crate::channel::{awgn_in_place, normalize_row_in_place, sample_fading, snr_to_sigma2};
use crate::digital::{mac_equal_rate_capacity, EntropyModel};
use crate::nets::{
    build_digital, build_t3, Adaptation, ChannelKind, CsiMode, ModelDims, NetSpec, Scheme,
    IN_LABELS, IN_S1, IN_S2, IN_U1, IN_U2, OUT_LOSS,
};
use crate::retrieval::{rank_query, GalleryIndex};
use crate::rng::{substream, StreamPurpose};
use crate::tensor::Tensor;
use crate::training::{SnrTrain, TrainConfig, Trainer};

/// Gradient tolerance: scale-aware relative error between the analytic
/// adjoint and the central difference.
pub const GRAD_TOL: f64 = 1e-5;
/// Tolerance for the closed-form oracles (capacity, code length, mass).
pub const EXACT_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SelfCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed error, in whatever unit the check's tolerance uses.
    pub max_err: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl SelfCheck {
    fn measured(name: &str, max_err: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: max_err.is_finite() && max_err <= tolerance,
            max_err,
            tolerance,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: false,
            max_err: f64::INFINITY,
            tolerance: 0.0,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelfCheckReport {
    pub checks: Vec<SelfCheck>,
    pub elapsed: Duration,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0);
        for c in &self.checks {
            let status = if c.passed { " ok " } else { "FAIL" };
            out.push_str(&format!(
                "[{status}] {:<width$}  max err {:>9.3e}  (tol {:.0e})  {}\n",
                c.name, c.max_err, c.tolerance, c.detail
            ));
        }
        let (ok, total) = (
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len(),
        );
        out.push_str(&format!(
            "{ok}/{total} checks passed in {:.2}s\n",
            self.elapsed.as_secs_f64()
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// gradient checks

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec())
}

/// Builds a one-op graph with `build`, runs the finite-difference probe on
/// every parameter it references, and folds the result into one check line.
fn prim_check(
    name: &str,
    build: impl FnOnce(&mut GraphBuilder, &mut ParamStore, &mut Inputs) -> NodeId,
) -> SelfCheck {
    let mut b = GraphBuilder::new();
    let mut store = ParamStore::new();
    let mut inputs = Inputs::new();
    let loss = build(&mut b, &mut store, &mut inputs);
    let graph = b.finish();
    grad_report(name, &graph, &inputs, &mut store, loss, 16)
}

fn grad_report(
    name: &str,
    graph: &crate::ad::Graph,
    inputs: &Inputs,
    store: &mut ParamStore,
    loss: NodeId,
    probes: usize,
) -> SelfCheck {
    match grad_check(graph, inputs, store, loss, GRAD_TOL, probes) {
        Ok(report) => {
            let worst = report.worst();
            let max_err = worst.map_or(0.0, |w| w.max_rel_err);
            let coords: usize = report.entries.iter().map(|e| e.probed).sum();
            let detail = match worst {
                Some(w) => format!("{} params, {coords} coords, worst {}", report.entries.len(), w.name),
                None => "no trainable parameters".into(),
            };
            SelfCheck::measured(name, max_err, GRAD_TOL, detail)
        }
        Err(e) => SelfCheck::failed(name, format!("gradient check aborted: {e}")),
    }
}

/// One graph per differentiable primitive, each driving a handpicked operand
/// (kink ops get values away from zero so the difference quotient stays on
/// one side).
fn primitive_checks() -> Vec<SelfCheck> {
    let mut checks = Vec::new();

    checks.push(prim_check("grad/matmul", |b, store, inputs| {
        store.insert("w", m(3, 4, &[0.3, -1.2, 0.7, 0.1, 1.5, -0.4, 0.9, -0.8, 0.2, 0.6, -1.1, 0.5]), true);
        let x = b.input("x", 3);
        let w = b.param("w");
        let t = b.input("t", 4);
        inputs.insert("x".into(), m(2, 3, &[1.0, -0.5, 0.8, 0.2, 1.4, -1.0]));
        inputs.insert("t".into(), m(2, 4, &[0.1, 0.2, -0.3, 0.4, -0.1, 0.5, 0.0, 0.7]));
        let y = b.matmul(x, w);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/bias_add", |b, store, inputs| {
        store.insert("bias", Tensor::vector(vec![0.4, -0.7, 1.2, 0.05]), true);
        let x = b.input("x", 4);
        let bias = b.param("bias");
        let t = b.input("t", 4);
        inputs.insert("x".into(), m(2, 4, &[0.3, 1.1, -0.8, 0.6, -1.3, 0.2, 0.9, -0.4]));
        inputs.insert("t".into(), m(2, 4, &[0.0; 8]));
        let y = b.bias_add(x, bias);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/add", |b, store, inputs| {
        store.insert("a", m(2, 3, &[0.5, -1.0, 0.8, 1.2, -0.3, 0.1]), true);
        let a = b.param("a");
        let x = b.input("x", 3);
        let t = b.input("t", 3);
        inputs.insert("x".into(), m(2, 3, &[1.0, 0.4, -0.6, -0.2, 0.7, 1.3]));
        inputs.insert("t".into(), m(2, 3, &[0.2, 0.1, 0.0, -0.1, 0.3, 0.5]));
        let y = b.add(a, x);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/scale", |b, store, inputs| {
        store.insert("a", m(2, 4, &[0.9, -0.2, 1.6, 0.3, -1.4, 0.8, 0.1, -0.7]), true);
        let a = b.param("a");
        let t = b.input("t", 4);
        inputs.insert("t".into(), m(2, 4, &[0.0; 8]));
        let y = b.scale(a, -1.7);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/leaky_relu", |b, store, inputs| {
        store.insert("a", m(2, 5, &[-1.3, -0.2, 0.4, 1.7, -0.9, 0.8, -2.1, 0.3, 1.1, -0.6]), true);
        let a = b.param("a");
        let t = b.input("t", 5);
        inputs.insert("t".into(), m(2, 5, &[0.1; 10]));
        let y = b.leaky_relu(a, 0.01);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/relu", |b, store, inputs| {
        store.insert("a", m(2, 5, &[-1.3, -0.2, 0.4, 1.7, -0.9, 0.8, -2.1, 0.3, 1.1, -0.6]), true);
        let a = b.param("a");
        let t = b.input("t", 5);
        inputs.insert("t".into(), m(2, 5, &[0.1; 10]));
        let y = b.relu(a);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/sigmoid", |b, store, inputs| {
        store.insert("a", m(2, 4, &[0.3, -1.8, 2.2, -0.4, 1.0, 0.0, -2.7, 0.9]), true);
        let a = b.param("a");
        let t = b.input("t", 4);
        inputs.insert("t".into(), m(2, 4, &[0.5; 8]));
        let y = b.sigmoid(a);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/softmax", |b, store, inputs| {
        store.insert("a", m(2, 5, &[0.4, -0.9, 1.3, 0.2, -0.5, 2.0, 0.1, -1.2, 0.7, 0.3]), true);
        let a = b.param("a");
        let t = b.input("t", 5);
        inputs.insert("t".into(), m(2, 5, &[0.2; 10]));
        let y = b.softmax(a);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/batch_norm", |b, store, inputs| {
        store.insert("x", m(4, 3, &[0.5, -1.2, 0.8, 1.4, 0.3, -0.7, -0.9, 1.1, 0.2, 0.6, -0.4, 1.5]), true);
        store.insert("g", Tensor::vector(vec![1.2, 0.8, 1.0]), true);
        store.insert("be", Tensor::vector(vec![0.1, -0.3, 0.0]), true);
        store.insert("chk.running_mean", Tensor::vector(vec![0.0; 3]), false);
        store.insert("chk.running_var", Tensor::vector(vec![1.0; 3]), false);
        let x = b.param("x");
        let g = b.param("g");
        let be = b.param("be");
        let t = b.input("t", 3);
        inputs.insert("t".into(), m(4, 3, &[0.05; 12]));
        let y = b.batch_norm(x, g, be, "chk");
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/concat", |b, store, inputs| {
        store.insert("a", m(2, 3, &[0.4, -0.8, 1.1, -0.2, 0.9, 0.3]), true);
        store.insert("c", m(2, 2, &[1.5, -0.6, 0.2, 0.8]), true);
        let a = b.param("a");
        let c = b.param("c");
        let t = b.input("t", 5);
        inputs.insert("t".into(), m(2, 5, &[0.0; 10]));
        let y = b.concat(a, c);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/mul", |b, store, inputs| {
        store.insert("a", m(2, 4, &[0.7, -1.1, 0.4, 1.3, -0.5, 0.9, -1.6, 0.2]), true);
        let a = b.param("a");
        let x = b.input("x", 4);
        let t = b.input("t", 4);
        inputs.insert("x".into(), m(2, 4, &[1.2, 0.5, -0.9, 0.3, 0.8, -1.4, 0.6, 1.0]));
        inputs.insert("t".into(), m(2, 4, &[0.1; 8]));
        let y = b.mul(a, x);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/complex_mul", |b, store, inputs| {
        store.insert("a", m(2, 6, &[0.6, -0.3, 1.2, 0.8, -0.7, 0.4, 0.9, 1.1, -0.2, 0.5, 1.4, -0.8]), true);
        let a = b.param("a");
        let h = b.input("h", 6);
        let t = b.input("t", 6);
        inputs.insert("h".into(), m(2, 6, &[0.8, 0.6, 0.8, 0.6, 0.8, 0.6, -0.5, 1.1, -0.5, 1.1, -0.5, 1.1]));
        inputs.insert("t".into(), m(2, 6, &[0.0; 12]));
        let y = b.complex_mul(a, h);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/power_normalize", |b, store, inputs| {
        store.insert("a", m(2, 8, &[0.5, -1.3, 0.9, 0.2, -0.6, 1.1, 0.4, -0.8, 1.7, 0.3, -0.2, 0.8, 1.2, -1.5, 0.6, 0.1]), true);
        let a = b.param("a");
        let t = b.input("t", 8);
        inputs.insert("t".into(), m(2, 8, &[0.1; 16]));
        let y = b.power_normalize(a, 4, 1.0);
        b.mse(y, t)
    }));

    checks.push(prim_check("grad/mse", |b, store, inputs| {
        store.insert("a", m(2, 4, &[0.8, -0.4, 1.2, 0.5, -1.0, 0.3, 0.7, -0.9]), true);
        let a = b.param("a");
        let t = b.input("t", 4);
        inputs.insert("t".into(), m(2, 4, &[0.3, 0.1, -0.2, 0.6, 0.4, -0.5, 0.0, 0.2]));
        b.mse(a, t)
    }));

    checks.push(prim_check("grad/softmax_cross_entropy", |b, store, inputs| {
        store.insert("logits", m(3, 4, &[1.2, -0.5, 0.3, 0.8, -1.1, 0.6, 1.5, -0.2, 0.4, 0.9, -0.7, 1.3]), true);
        let logits = b.param("logits");
        let onehot = b.input("y", 4);
        inputs.insert(
            "y".into(),
            m(3, 4, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]),
        );
        b.softmax_cross_entropy(logits, onehot)
    }));

    checks.push(prim_check("grad/cosine_squared", |b, store, _inputs| {
        store.insert("a", m(2, 5, &[0.9, -0.3, 1.2, 0.4, -0.8, 0.2, 1.5, -0.6, 0.7, 1.1]), true);
        store.insert("c", m(2, 5, &[-0.4, 0.8, 0.5, -1.2, 0.3, 1.0, 0.2, 0.9, -0.5, 0.6]), true);
        let a = b.param("a");
        let c = b.param("c");
        b.cosine_squared(a, c)
    }));

    checks.push(prim_check("grad/gaussian_code_length", |b, store, _inputs| {
        store.insert("v", m(2, 3, &[0.3, -1.2, 2.4, 1.7, 0.1, -0.8]), true);
        store.insert("mu", Tensor::vector(vec![0.2, -0.4, 0.9]), true);
        store.insert("sigma", Tensor::vector(vec![0.7, 1.3, 2.1]), true);
        let v = b.param("v");
        let mu = b.param("mu");
        let sigma = b.param("sigma");
        b.gaussian_code_length(v, mu, sigma)
    }));

    checks
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        obs_dim: 10,
        feature_dim: 6,
        symbol_budget: 8,
        classes: 5,
        feat_hidden: vec![12, 8],
        enc_hidden: vec![16, 8],
        dec_hidden: vec![16, 12],
        leaky_slope: 0.01,
    }
}

/// Finite-difference probe of a full training graph: encoders, channel,
/// decoders, classifiers and every regularizer in one loss.
fn composed_check(name: &str, spec: NetSpec, lambda_cos: f64, snr_db: f64) -> SelfCheck {
    const SEED: u64 = 777;
    let n = 4;
    let mut store = ParamStore::new();
    let graph = build_t3(&spec, &mut store, SEED, lambda_cos);

    let mut cfg = TrainConfig::default();
    cfg.snr_train = SnrTrain::Fixed(snr_db);
    let trainer = match Trainer::new(spec.clone(), cfg, SEED, "selfcheck") {
        Ok(t) => t,
        Err(e) => return SelfCheck::failed(name, e.to_string()),
    };

    let mut inputs = observation_inputs(&spec, n, SEED);
    let mut rng = substream(SEED, StreamPurpose::Channel, 1);
    trainer.channel_inputs(n, snr_db, &mut rng, &mut inputs);

    let loss = match graph.output_id(OUT_LOSS) {
        Ok(id) => id,
        Err(e) => return SelfCheck::failed(name, e.to_string()),
    };
    grad_report(name, &graph, &inputs, &mut store, loss, 4)
}

fn composed_digital_check(name: &str) -> SelfCheck {
    const SEED: u64 = 778;
    let n = 4;
    let spec = NetSpec::new(
        tiny_dims(),
        Scheme::Digital,
        Adaptation::Fixed,
        ChannelKind::Awgn,
    );
    let mut store = ParamStore::new();
    let graph = build_digital(&spec, &mut store, SEED, 0.01);

    let mut inputs = observation_inputs(&spec, n, SEED);
    let mut rng = substream(SEED, StreamPurpose::Quantizer, 1);
    let r = spec.dims.feature_dim;
    for slot in [IN_U1, IN_U2] {
        let u: Vec<f64> = (0..n * r).map(|_| rng.random::<f64>() - 0.5).collect();
        inputs.insert(slot.into(), Tensor::matrix(n, r, u));
    }

    let loss = match graph.output_id(OUT_LOSS) {
        Ok(id) => id,
        Err(e) => return SelfCheck::failed(name, e.to_string()),
    };
    grad_report(name, &graph, &inputs, &mut store, loss, 4)
}

fn observation_inputs(spec: &NetSpec, n: usize, seed: u64) -> Inputs {
    let mut rng = substream(seed, StreamPurpose::Dataset, 3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p = spec.dims.obs_dim;
    let mut inputs = Inputs::new();
    let mut draw = |slots: usize| -> Tensor {
        Tensor::matrix(n, slots, (0..n * slots).map(|_| normal.sample(&mut rng)).collect())
    };
    inputs.insert(IN_S1.into(), draw(p));
    if spec.scheme.is_two_device() {
        inputs.insert(IN_S2.into(), draw(p));
    }
    let m = spec.dims.classes;
    let mut labels = vec![0.0; n * m];
    for i in 0..n {
        labels[i * m + (i % m)] = 1.0;
    }
    inputs.insert(IN_LABELS.into(), Tensor::matrix(n, m, labels));
    inputs
}

fn composed_checks() -> Vec<SelfCheck> {
    let dims = tiny_dims;
    let mut checks = Vec::new();

    checks.push(composed_check(
        "grad/composed_noma_plain",
        NetSpec::new(dims(), Scheme::Noma, Adaptation::Fixed, ChannelKind::Awgn),
        0.25,
        0.0,
    ));
    checks.push(composed_check(
        "grad/composed_noma_snr_aware",
        NetSpec::new(dims(), Scheme::Noma, Adaptation::SnrAware, ChannelKind::Awgn),
        0.0,
        4.0,
    ));
    let mut fading = NetSpec::new(
        dims(),
        Scheme::Oma,
        Adaptation::FadingAware,
        ChannelKind::Rayleigh,
    );
    fading.csi_mode = CsiMode::Both;
    checks.push(composed_check("grad/composed_oma_fading_aware", fading, 0.0, 6.0));
    checks.push(composed_check(
        "grad/composed_single_equalized",
        NetSpec::new(dims(), Scheme::Single, Adaptation::Fixed, ChannelKind::Rayleigh),
        0.0,
        2.0,
    ));
    checks.push(composed_digital_check("grad/composed_digital"));
    checks
}

/// The probe must detect a sabotaged adjoint: `WrongAdjointSquare` computes
/// `x^2` forward but back-propagates as if it were `3x^2`. The check passes
/// only if the gradient check fails on it.
fn negative_control() -> SelfCheck {
    let name = "grad/wrong_adjoint_detected";
    let mut b = GraphBuilder::new();
    let mut store = ParamStore::new();
    store.insert("a", m(2, 3, &[0.8, -1.2, 0.5, 1.4, -0.6, 0.9]), true);
    let a = b.param("a");
    let sq = b.op(Op::WrongAdjointSquare, &[a]);
    let t = b.input("t", 3);
    let mut inputs = Inputs::new();
    inputs.insert("t".into(), m(2, 3, &[0.1; 6]));
    let loss = b.mse(sq, t);
    let graph = b.finish();
    match grad_check(&graph, &inputs, &mut store, loss, GRAD_TOL, 16) {
        Ok(report) => {
            let worst = report.worst().map_or(0.0, |w| w.max_rel_err);
            if report.passed() {
                SelfCheck::failed(
                    name,
                    format!("sabotaged adjoint slipped through (worst rel err {worst:.3e})"),
                )
            } else {
                SelfCheck {
                    name: name.into(),
                    passed: true,
                    max_err: worst,
                    tolerance: GRAD_TOL,
                    detail: "probe rejected the sabotaged adjoint as required".into(),
                }
            }
        }
        Err(e) => SelfCheck::failed(name, format!("gradient check aborted: {e}")),
    }
}

// ---------------------------------------------------------------------------
// channel statistics

fn check_awgn_snr() -> SelfCheck {
    let name = "channel/awgn_snr";
    let snr_db = 7.0;
    let symbols = 1_000_000usize;
    let sigma2 = snr_to_sigma2(snr_db, 1.0);
    let mut rng = substream(2024, StreamPurpose::Channel, 42);

    // Unit-power carrier: every symbol (1, 0). The received deviation is the
    // noise itself, so the measured SNR is 1 / mean|y - x|^2.
    let mut row = vec![0.0; 2 * symbols];
    for i in (0..row.len()).step_by(2) {
        row[i] = 1.0;
    }
    if let Err(e) = awgn_in_place(&mut row, sigma2, &mut rng) {
        return SelfCheck::failed(name, e.to_string());
    }
    let noise_power: f64 = row
        .chunks_exact(2)
        .map(|c| (c[0] - 1.0).powi(2) + c[1].powi(2))
        .sum::<f64>()
        / symbols as f64;
    let measured_db = 10.0 * (1.0 / noise_power).log10();
    SelfCheck::measured(
        name,
        (measured_db - snr_db).abs(),
        0.1,
        format!("configured {snr_db} dB, measured {measured_db:.4} dB over {symbols} symbols"),
    )
}

fn check_fading_moment() -> SelfCheck {
    let name = "channel/fading_gain_power";
    let draws = 1_000_000usize;
    let mut max_rel = 0.0f64;
    let mut details = Vec::new();
    for (i, sigma_h2) in [1.0, 1.7].into_iter().enumerate() {
        let mut rng = substream(2025, StreamPurpose::Channel, i as u64);
        let mean: f64 = (0..draws)
            .map(|_| sample_fading(sigma_h2, &mut rng).abs2())
            .sum::<f64>()
            / draws as f64;
        let rel = (mean - sigma_h2).abs() / sigma_h2;
        max_rel = max_rel.max(rel);
        details.push(format!("sigma_h2={sigma_h2}: E|h|^2={mean:.5}"));
    }
    SelfCheck::measured(name, max_rel, 0.01, details.join(", "))
}

fn check_power_constraint() -> SelfCheck {
    let name = "channel/power_normalization";
    let mut rng = substream(2026, StreamPurpose::Channel, 7);
    let normal = Normal::new(0.0, 2.5).unwrap();
    let mut max_rel = 0.0f64;
    for (symbols, power) in [(64usize, 1.0), (32, 0.5), (5, 2.0)] {
        for _ in 0..100 {
            let mut row: Vec<f64> = (0..2 * symbols).map(|_| normal.sample(&mut rng)).collect();
            if normalize_row_in_place(&mut row, symbols, power).is_none() {
                return SelfCheck::failed(name, "normalization rejected a nonzero row");
            }
            let energy: f64 = row.iter().map(|x| x * x).sum();
            let target = symbols as f64 * power;
            max_rel = max_rel.max((energy - target).abs() / target);
        }
    }
    SelfCheck::measured(name, max_rel, EXACT_TOL, "300 random rows, 3 budgets")
}

// ---------------------------------------------------------------------------
// closed forms

fn check_capacity_formula() -> SelfCheck {
    let name = "closed_form/mac_capacity";
    // Independent restatement in nats: with both gains at unity and P = 1,
    // sigma2 = 1 (0 dB), the sum constraint binds at q/2 * ln 3 / ln 2.
    let q = 32usize;
    let ln2 = std::f64::consts::LN_2;
    let cases = [
        (1.0, 1.0, 1.0, 1.0, 16.0 * 3.0f64.ln() / ln2),
        // Weak first user: its single-user constraint binds instead.
        (1.0, 1.0, 0.05, 1.0, {
            let sum = 16.0 * 2.05f64.ln() / ln2;
            let user1 = 32.0 * 1.05f64.ln() / ln2;
            let user2 = 32.0 * 2.0f64.ln() / ln2;
            sum.min(user1).min(user2)
        }),
    ];
    let mut max_err = 0.0f64;
    for (power, sigma2, h1, h2, oracle) in cases {
        match mac_equal_rate_capacity(q, power, sigma2, h1, h2) {
            Ok(got) => max_err = max_err.max((got - oracle).abs()),
            Err(e) => return SelfCheck::failed(name, e.to_string()),
        }
    }
    let headline = mac_equal_rate_capacity(32, 1.0, 1.0, 1.0, 1.0).unwrap();
    SelfCheck::measured(
        name,
        max_err,
        EXACT_TOL,
        format!("q=32 at 0 dB gives {headline:.4} bits/user"),
    )
}

fn erf_cdf(t: f64) -> f64 {
    0.5 * (1.0 + libm::erf(t / std::f64::consts::SQRT_2))
}

fn oracle_bits(w: f64, mu: f64, sigma: f64) -> f64 {
    let p = erf_cdf((w + 0.5 - mu) / sigma) - erf_cdf((w - 0.5 - mu) / sigma);
    -p.max(5.421010862427522e-20).log2()
}

fn check_code_length() -> SelfCheck {
    let name = "closed_form/code_length";
    let model = EntropyModel {
        mu: vec![0.0, 0.25, 0.5],
        sigma: vec![1.0, 0.8, 2.0],
    };
    let values = [0.0, 1.5, -3.0];
    let oracle: f64 = values
        .iter()
        .zip(model.mu.iter().zip(&model.sigma))
        .map(|(&w, (&mu, &sigma))| oracle_bits(w, mu, sigma))
        .sum();
    let got = match model.code_length_bits(&values) {
        Ok(v) => v,
        Err(e) => return SelfCheck::failed(name, e.to_string()),
    };
    let single = EntropyModel {
        mu: vec![0.0],
        sigma: vec![1.0],
    };
    let center = single.code_length_bits(&[0.0]).unwrap();
    SelfCheck::measured(
        name,
        (got - oracle).abs(),
        EXACT_TOL,
        format!("3-dim block {got:.6} bits; central unit bin {center:.7} bits"),
    )
}

fn check_bin_mass() -> SelfCheck {
    let name = "closed_form/bin_mass";
    // The implied probabilities 2^-bits over integer bins must sum to one
    // (up to Gaussian tails beyond 14 sigma).
    let (mu, sigma) = (0.3, 1.1);
    let model = EntropyModel {
        mu: vec![mu],
        sigma: vec![sigma],
    };
    let span = (14.0 * sigma).ceil() as i64;
    let mut mass = 0.0;
    for k in -span..=span {
        match model.code_length_bits(&[k as f64]) {
            Ok(bits) => mass += (-bits).exp2(),
            Err(e) => return SelfCheck::failed(name, e.to_string()),
        }
    }
    SelfCheck::measured(
        name,
        (mass - 1.0).abs(),
        EXACT_TOL,
        format!("sum over {} bins = {mass:.12}", 2 * span + 1),
    )
}

// ---------------------------------------------------------------------------
// retrieval

fn check_retrieval_brute_force() -> SelfCheck {
    let name = "retrieval/brute_force";
    let mut rng = substream(31, StreamPurpose::Eval, 99);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (entries, dim, instances) = (30usize, 5usize, 100usize);
    let mut mismatches = 0usize;
    for _ in 0..instances {
        let features: Vec<Vec<f64>> = (0..entries)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let labels: Vec<u32> = (0..entries as u32).collect();
        let gallery = GalleryIndex::new(features.clone(), labels).unwrap();
        let query: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let ranked = match rank_query(&query, &gallery) {
            Ok(r) => r,
            Err(e) => return SelfCheck::failed(name, e.to_string()),
        };
        // Brute force with explicit loops and the same tie rule (smaller
        // index first).
        let mut order: Vec<usize> = (0..entries).collect();
        let dist = |i: usize| -> f64 {
            let mut d = 0.0;
            for (a, b) in features[i].iter().zip(&query) {
                d += (a - b) * (a - b);
            }
            d
        };
        order.sort_by(|&i, &j| dist(i).total_cmp(&dist(j)).then(i.cmp(&j)));
        if ranked != order {
            mismatches += 1;
        }
    }
    SelfCheck::measured(
        name,
        mismatches as f64,
        0.0,
        format!("{instances} random instances, full rank lists compared"),
    )
}

// ---------------------------------------------------------------------------

pub fn run_selfcheck() -> SelfCheckReport {
    let start = Instant::now();
    let mut checks = primitive_checks();
    checks.extend(composed_checks());
    checks.push(negative_control());
    checks.push(check_awgn_snr());
    checks.push(check_fading_moment());
    checks.push(check_power_constraint());
    checks.push(check_capacity_formula());
    checks.push(check_code_length());
    checks.push(check_bin_mass());
    checks.push(check_retrieval_brute_force());
    SelfCheckReport {
        checks,
        elapsed: start.elapsed(),
    }
}

#[cfg(test)]
mod test {
    use super::*;

    #[test]
    fn battery_passes() {
        let report = run_selfcheck();
        assert!(report.passed(), "self-check failed:\n{}", report.render());
        // The negative control must be present and must have tripped the
        // probe (its recorded error is the sabotage magnitude).
        let neg = report
            .checks
            .iter()
            .find(|c| c.name == "grad/wrong_adjoint_detected")
            .expect("negative control missing");
        assert!(neg.passed);
        assert!(neg.max_err > GRAD_TOL);
    }

    #[test]
    fn render_lists_every_check_with_error() {
        let report = run_selfcheck();
        let text = report.render();
        for check in &report.checks {
            assert!(text.contains(&check.name), "missing line for {}", check.name);
        }
        assert!(text.contains("max err"));
    }
}
