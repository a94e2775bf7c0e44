//! Assembles training and evaluation graphs from the component networks.
//!
//! Every builder registers the parameters it references into the shared
//! [`ParamStore`] if they are not already present, then returns a [`Graph`]
//! whose named outputs the trainer and evaluator look up by the `OUT_*`
//! constants. The in-graph channel reproduces the arithmetic of
//! [`crate::channel`] with `ComplexMul`/`Add` primitives over caller-drawn
//! noise and gain inputs, keeping evaluation a pure function.

use std::collections::HashMap;

use crate::ad::{Graph, GraphBuilder, NodeId, ParamStore};
use crate::nets::init::{init_tensor, InitKind};
use crate::nets::{
    ChannelKind, Device, NetSpec, Scheme, IN_CSI_DEC1, IN_CSI_DEC2,
    IN_CSI_ENC, IN_EQ1, IN_EQ2, IN_H1, IN_H2, IN_LABELS, IN_NOISE, IN_NOISE1, IN_NOISE2, IN_S,
    IN_S1, IN_S2, IN_U1, IN_U2, IN_V1, IN_V2, IN_Y, OUT_BITS, OUT_CE, OUT_COS2, OUT_LOGITS_MAIN,
    OUT_LOSS, OUT_POOLED, OUT_PROBS_MAIN, OUT_V, OUT_V1, OUT_V2, OUT_VHAT1, OUT_VHAT2, OUT_X,
    OUT_X1, OUT_X2,
};

struct NetCtx<'a> {
    b: GraphBuilder,
    store: &'a mut ParamStore,
    seed: u64,
    slope: f64,
    inputs: HashMap<&'static str, NodeId>,
}

impl<'a> NetCtx<'a> {
    fn new(store: &'a mut ParamStore, seed: u64, slope: f64) -> Self {
        Self {
            b: GraphBuilder::new(),
            store,
            seed,
            slope,
            inputs: HashMap::new(),
        }
    }

    fn input(&mut self, name: &'static str, width: usize) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.b.input(name, width);
        self.inputs.insert(name, id);
        id
    }

    fn ensure(&mut self, name: &str, shape: &[usize], kind: InitKind, trainable: bool) {
        if !self.store.contains(name) {
            let value = init_tensor(self.seed, name, shape, kind);
            self.store.insert(name, value, trainable);
        }
    }

    fn param(&mut self, name: &str, shape: &[usize], kind: InitKind) -> NodeId {
        self.ensure(name, shape, kind, true);
        self.b.param(name)
    }

    /// Fully-connected layer `x W + b`.
    fn fc(&mut self, x: NodeId, prefix: &str, i: usize, inw: usize, outw: usize, kind: InitKind) -> NodeId {
        let w = self.param(&format!("{prefix}.fc{i}.weight"), &[inw, outw], kind);
        let b = self.param(&format!("{prefix}.fc{i}.bias"), &[outw], InitKind::Zeros);
        let h = self.b.matmul(x, w);
        self.b.bias_add(h, b)
    }

    /// Batch-norm with its running statistics registered as non-trainable
    /// entries under `<prefix>.bn<i>`.
    fn bn(&mut self, x: NodeId, prefix: &str, i: usize, width: usize) -> NodeId {
        let stats = format!("{prefix}.bn{i}");
        let gamma = self.param(&format!("{stats}.gamma"), &[width], InitKind::Ones);
        let beta = self.param(&format!("{stats}.beta"), &[width], InitKind::Zeros);
        self.ensure(
            &format!("{stats}.running_mean"),
            &[width],
            InitKind::Zeros,
            false,
        );
        self.ensure(
            &format!("{stats}.running_var"),
            &[width],
            InitKind::Ones,
            false,
        );
        self.b.batch_norm(x, gamma, beta, &stats)
    }

    /// AF conditioning module: mask = sigmoid(FC(ReLU(FC([f; csi])))),
    /// applied multiplicatively. Bottleneck width `max(f/4, 8)`.
    fn af(
        &mut self,
        f: NodeId,
        width: usize,
        csi: NodeId,
        csi_width: usize,
        prefix: &str,
        i: usize,
    ) -> NodeId {
        let hidden = (width / 4).max(8);
        let joint = self.b.concat(f, csi);
        let name = format!("{prefix}.af{i}");
        let h = self.fc(joint, &name, 0, width + csi_width, hidden, InitKind::He);
        let h = self.b.relu(h);
        let gate = self.fc(h, &name, 1, hidden, width, InitKind::Linear);
        let mask = self.b.sigmoid(gate);
        self.b.mul(f, mask)
    }

    /// Semantic feature encoder: every layer is FC -> BN -> leaky-ReLU.
    fn feature_encoder(&mut self, s: NodeId, device: Device, spec: &NetSpec) -> NodeId {
        let prefix = format!("feat{}", device.index());
        let dims = &spec.dims;
        let widths: Vec<usize> = std::iter::once(dims.obs_dim)
            .chain(dims.feat_hidden.iter().copied())
            .chain(std::iter::once(dims.feature_dim))
            .collect();
        let mut x = s;
        for i in 0..widths.len() - 1 {
            x = self.fc(x, &prefix, i, widths[i], widths[i + 1], InitKind::He);
            x = self.bn(x, &prefix, i, widths[i + 1]);
            x = self.b.leaky_relu(x, self.slope);
        }
        x
    }

    /// JSCC encoder producing a power-normalized codeword of `2 q_c` reals.
    /// SNR-aware variants interleave AF modules before, between and after
    /// the FC layers.
    fn jscc_encoder(&mut self, v: NodeId, device: Device, spec: &NetSpec, csi: Option<NodeId>) -> NodeId {
        let prefix = format!("enc{}", device.index());
        let dims = &spec.dims;
        let qc = spec.codeword_symbols();
        let widths: Vec<usize> = std::iter::once(dims.feature_dim)
            .chain(dims.enc_hidden.iter().copied())
            .chain(std::iter::once(2 * qc))
            .collect();
        let csi_w = spec.enc_csi_width();
        let mut x = v;
        let last = widths.len() - 2;
        for i in 0..widths.len() - 1 {
            if let (Some(csi), Some(w)) = (csi, csi_w) {
                x = self.af(x, widths[i], csi, w, &prefix, i);
            }
            let kind = if i == last { InitKind::Linear } else { InitKind::He };
            x = self.fc(x, &prefix, i, widths[i], widths[i + 1], kind);
            if i != last {
                x = self.b.leaky_relu(x, self.slope);
            }
        }
        if let (Some(csi), Some(w)) = (csi, csi_w) {
            x = self.af(x, 2 * qc, csi, w, &prefix, widths.len() - 1);
        }
        self.b.power_normalize(x, qc, spec.tx_power)
    }

    /// JSCC decoder mapping the full received signal back to one device's
    /// feature vector. SNR- and fading-aware variants carry AF modules.
    fn decoder(&mut self, y: NodeId, device: Device, spec: &NetSpec, csi: Option<NodeId>) -> NodeId {
        let prefix = format!("dec{}", device.index());
        let dims = &spec.dims;
        let widths: Vec<usize> = std::iter::once(spec.decoder_input_width())
            .chain(dims.dec_hidden.iter().copied())
            .chain(std::iter::once(dims.feature_dim))
            .collect();
        let csi_w = spec.dec_csi_width();
        let mut x = y;
        let last = widths.len() - 2;
        for i in 0..widths.len() - 1 {
            if let (Some(csi), Some(w)) = (csi, csi_w) {
                x = self.af(x, widths[i], csi, w, &prefix, i);
            }
            let kind = if i == last { InitKind::Linear } else { InitKind::He };
            x = self.fc(x, &prefix, i, widths[i], widths[i + 1], kind);
            if i != last {
                x = self.b.leaky_relu(x, self.slope);
            }
        }
        if let (Some(csi), Some(w)) = (csi, csi_w) {
            x = self.af(x, dims.feature_dim, csi, w, &prefix, widths.len() - 1);
        }
        x
    }

    /// Single-FC classifier returning logits.
    fn classifier(&mut self, x: NodeId, name: &str, inw: usize, classes: usize) -> NodeId {
        self.fc(x, name, 0, inw, classes, InitKind::Linear)
    }

    fn cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.b.softmax_cross_entropy(logits, labels)
    }

    /// Mean of two or three cross-entropy scalars.
    fn mean_of(&mut self, terms: &[NodeId]) -> NodeId {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.b.add(acc, t);
        }
        self.b.scale(acc, 1.0 / terms.len() as f64)
    }

    fn enc_csi(&mut self, spec: &NetSpec) -> Option<NodeId> {
        spec.enc_csi_width().map(|w| self.input(IN_CSI_ENC, w))
    }

    fn dec_csi(&mut self, spec: &NetSpec, device: Device) -> Option<NodeId> {
        let name = match device {
            Device::One => IN_CSI_DEC1,
            Device::Two => IN_CSI_DEC2,
        };
        spec.dec_csi_width().map(|w| self.input(name, w))
    }

    /// In-graph channel from power-normalized codewords to the decoder
    /// input, mirroring `crate::channel`: apply gains, add caller-drawn
    /// noise, equalize per link where the scheme calls for it.
    fn channel(&mut self, spec: &NetSpec, x1: NodeId, x2: Option<NodeId>) -> NodeId {
        let fading = spec.channel == ChannelKind::Rayleigh;
        let cw = 2 * spec.codeword_symbols();
        match spec.scheme {
            Scheme::Single => {
                let mut y = x1;
                if fading {
                    let h1 = self.input(IN_H1, cw);
                    y = self.b.complex_mul(y, h1);
                }
                let noise = self.input(IN_NOISE, cw);
                y = self.b.add(y, noise);
                if spec.equalizes() {
                    let eq1 = self.input(IN_EQ1, cw);
                    y = self.b.complex_mul(y, eq1);
                }
                y
            }
            Scheme::Oma => {
                let x2 = x2.expect("OMA needs both codewords");
                let mut halves = [x1, x2];
                for (i, (h_name, n_name, eq_name)) in [
                    (IN_H1, IN_NOISE1, IN_EQ1),
                    (IN_H2, IN_NOISE2, IN_EQ2),
                ]
                .into_iter()
                .enumerate()
                {
                    let mut y = halves[i];
                    if fading {
                        let h = self.input(h_name, cw);
                        y = self.b.complex_mul(y, h);
                    }
                    let noise = self.input(n_name, cw);
                    y = self.b.add(y, noise);
                    if spec.equalizes() {
                        let eq = self.input(eq_name, cw);
                        y = self.b.complex_mul(y, eq);
                    }
                    halves[i] = y;
                }
                self.b.concat(halves[0], halves[1])
            }
            Scheme::Noma => {
                let x2 = x2.expect("NOMA needs both codewords");
                let (mut t1, mut t2) = (x1, x2);
                if fading {
                    let h1 = self.input(IN_H1, cw);
                    let h2 = self.input(IN_H2, cw);
                    t1 = self.b.complex_mul(t1, h1);
                    t2 = self.b.complex_mul(t2, h2);
                }
                let superposed = self.b.add(t1, t2);
                let noise = self.input(IN_NOISE, cw);
                self.b.add(superposed, noise)
            }
            Scheme::Digital => unreachable!("the digital pipeline has no analog channel graph"),
        }
    }

    fn finish(self) -> Graph {
        self.b.finish()
    }
}

/// Stage-1 graph: feature encoders plus classifiers, no channel. Loss is the
/// mean of the auxiliary and main cross-entropies (three for two devices,
/// two for the single-device scheme).
pub fn build_t1(spec: &NetSpec, store: &mut ParamStore, seed: u64) -> Graph {
    let mut ctx = NetCtx::new(store, seed, spec.dims.leaky_slope);
    let (p, r, m) = (spec.dims.obs_dim, spec.dims.feature_dim, spec.dims.classes);
    let two = spec.scheme.is_two_device();

    let s1 = ctx.input(IN_S1, p);
    let labels = ctx.input(IN_LABELS, m);
    let v1 = ctx.feature_encoder(s1, Device::One, spec);
    ctx.b.mark_output(OUT_V1, v1);

    let logits_a1 = ctx.classifier(v1, "cls_aux1", r, m);
    let ce_a1 = ctx.cross_entropy(logits_a1, labels);

    let (logits_main, loss) = if two {
        let s2 = ctx.input(IN_S2, p);
        let v2 = ctx.feature_encoder(s2, Device::Two, spec);
        ctx.b.mark_output(OUT_V2, v2);
        let logits_a2 = ctx.classifier(v2, "cls_aux2", r, m);
        let ce_a2 = ctx.cross_entropy(logits_a2, labels);
        let pooled = ctx.b.concat(v1, v2);
        let logits_main = ctx.classifier(pooled, "cls_main", 2 * r, m);
        let ce_main = ctx.cross_entropy(logits_main, labels);
        let loss = ctx.mean_of(&[ce_a1, ce_a2, ce_main]);
        (logits_main, loss)
    } else {
        let logits_main = ctx.classifier(v1, "cls_main", r, m);
        let ce_main = ctx.cross_entropy(logits_main, labels);
        let loss = ctx.mean_of(&[ce_a1, ce_main]);
        (logits_main, loss)
    };
    ctx.b.mark_output(OUT_LOGITS_MAIN, logits_main);
    let probs = ctx.b.softmax(logits_main);
    ctx.b.mark_output(OUT_PROBS_MAIN, probs);
    ctx.b.mark_output(OUT_LOSS, loss);
    ctx.finish()
}

/// Stage-2 graph: JSCC autoencoders over the channel, trained on frozen
/// pre-extracted features. Loss is the mean reconstruction MSE across
/// devices. Referencing only `enc*`/`dec*` parameters is what freezes the
/// feature encoders — they simply receive no gradient.
pub fn build_t2(spec: &NetSpec, store: &mut ParamStore, seed: u64) -> Graph {
    let mut ctx = NetCtx::new(store, seed, spec.dims.leaky_slope);
    let r = spec.dims.feature_dim;
    let two = spec.scheme.is_two_device();

    let v1 = ctx.input(IN_V1, r);
    let enc_csi = ctx.enc_csi(spec);
    let x1 = ctx.jscc_encoder(v1, Device::One, spec, enc_csi);
    ctx.b.mark_output(OUT_X1, x1);

    let x2 = if two {
        let v2 = ctx.input(IN_V2, r);
        let x2 = ctx.jscc_encoder(v2, Device::Two, spec, enc_csi);
        ctx.b.mark_output(OUT_X2, x2);
        Some(x2)
    } else {
        None
    };

    let dec_in = ctx.channel(spec, x1, x2);
    let csi1 = ctx.dec_csi(spec, Device::One);
    let vhat1 = ctx.decoder(dec_in, Device::One, spec, csi1);
    ctx.b.mark_output(OUT_VHAT1, vhat1);
    let mse1 = ctx.b.mse(vhat1, v1);

    let loss = if two {
        let csi2 = ctx.dec_csi(spec, Device::Two);
        let vhat2 = ctx.decoder(dec_in, Device::Two, spec, csi2);
        ctx.b.mark_output(OUT_VHAT2, vhat2);
        let v2 = ctx.inputs[IN_V2];
        let mse2 = ctx.b.mse(vhat2, v2);
        ctx.mean_of(&[mse1, mse2])
    } else {
        mse1
    };
    ctx.b.mark_output(OUT_LOSS, loss);
    ctx.finish()
}

/// Stage-3 graph: the full pipeline end to end. Loss is the stage-1
/// classification loss on the reconstructed features, plus an optional
/// squared-cosine penalty between the two transmitted codewords.
pub fn build_t3(spec: &NetSpec, store: &mut ParamStore, seed: u64, lambda_cos: f64) -> Graph {
    let mut ctx = NetCtx::new(store, seed, spec.dims.leaky_slope);
    let (p, r, m) = (spec.dims.obs_dim, spec.dims.feature_dim, spec.dims.classes);
    let two = spec.scheme.is_two_device();

    let s1 = ctx.input(IN_S1, p);
    let labels = ctx.input(IN_LABELS, m);
    let v1 = ctx.feature_encoder(s1, Device::One, spec);
    let enc_csi = ctx.enc_csi(spec);
    let x1 = ctx.jscc_encoder(v1, Device::One, spec, enc_csi);
    ctx.b.mark_output(OUT_X1, x1);

    let x2 = if two {
        let s2 = ctx.input(IN_S2, p);
        let v2 = ctx.feature_encoder(s2, Device::Two, spec);
        let x2 = ctx.jscc_encoder(v2, Device::Two, spec, enc_csi);
        ctx.b.mark_output(OUT_X2, x2);
        Some(x2)
    } else {
        None
    };

    let dec_in = ctx.channel(spec, x1, x2);
    let csi1 = ctx.dec_csi(spec, Device::One);
    let vhat1 = ctx.decoder(dec_in, Device::One, spec, csi1);
    ctx.b.mark_output(OUT_VHAT1, vhat1);
    let logits_a1 = ctx.classifier(vhat1, "cls_aux1", r, m);
    let ce_a1 = ctx.cross_entropy(logits_a1, labels);

    let (logits_main, ce) = if two {
        let csi2 = ctx.dec_csi(spec, Device::Two);
        let vhat2 = ctx.decoder(dec_in, Device::Two, spec, csi2);
        ctx.b.mark_output(OUT_VHAT2, vhat2);
        let logits_a2 = ctx.classifier(vhat2, "cls_aux2", r, m);
        let ce_a2 = ctx.cross_entropy(logits_a2, labels);
        let pooled = ctx.b.concat(vhat1, vhat2);
        let logits_main = ctx.classifier(pooled, "cls_main", 2 * r, m);
        let ce_main = ctx.cross_entropy(logits_main, labels);
        let ce = ctx.mean_of(&[ce_a1, ce_a2, ce_main]);
        (logits_main, ce)
    } else {
        let logits_main = ctx.classifier(vhat1, "cls_main", r, m);
        let ce_main = ctx.cross_entropy(logits_main, labels);
        let ce = ctx.mean_of(&[ce_a1, ce_main]);
        (logits_main, ce)
    };
    ctx.b.mark_output(OUT_LOGITS_MAIN, logits_main);
    ctx.b.mark_output(OUT_CE, ce);

    let loss = match x2 {
        Some(x2) => {
            let cos2 = ctx.b.cosine_squared(x1, x2);
            ctx.b.mark_output(OUT_COS2, cos2);
            if lambda_cos > 0.0 {
                let penalty = ctx.b.scale(cos2, lambda_cos);
                ctx.b.add(ce, penalty)
            } else {
                ce
            }
        }
        None => ce,
    };
    ctx.b.mark_output(OUT_LOSS, loss);
    ctx.finish()
}

/// Digital training graph: features perturbed by the quantizer surrogate
/// noise feed the classifiers, and a factorized discretized-Gaussian prior
/// prices their code length. Loss = classification + lambda_rate * bits.
pub fn build_digital(spec: &NetSpec, store: &mut ParamStore, seed: u64, lambda_rate: f64) -> Graph {
    let mut ctx = NetCtx::new(store, seed, spec.dims.leaky_slope);
    let (p, r, m) = (spec.dims.obs_dim, spec.dims.feature_dim, spec.dims.classes);

    let s1 = ctx.input(IN_S1, p);
    let s2 = ctx.input(IN_S2, p);
    let labels = ctx.input(IN_LABELS, m);
    let u1 = ctx.input(IN_U1, r);
    let u2 = ctx.input(IN_U2, r);

    let v1 = ctx.feature_encoder(s1, Device::One, spec);
    let v2 = ctx.feature_encoder(s2, Device::Two, spec);
    let vt1 = ctx.b.add(v1, u1);
    let vt2 = ctx.b.add(v2, u2);

    let logits_a1 = ctx.classifier(vt1, "cls_aux1", r, m);
    let logits_a2 = ctx.classifier(vt2, "cls_aux2", r, m);
    let pooled = ctx.b.concat(vt1, vt2);
    let logits_main = ctx.classifier(pooled, "cls_main", 2 * r, m);
    ctx.b.mark_output(OUT_LOGITS_MAIN, logits_main);
    let ce_a1 = ctx.cross_entropy(logits_a1, labels);
    let ce_a2 = ctx.cross_entropy(logits_a2, labels);
    let ce_main = ctx.cross_entropy(logits_main, labels);
    let ce = ctx.mean_of(&[ce_a1, ce_a2, ce_main]);
    ctx.b.mark_output(OUT_CE, ce);

    let mut bits_terms = Vec::new();
    for (prefix, vt) in [("prior1", vt1), ("prior2", vt2)] {
        let mu = ctx.param(&format!("{prefix}.mu"), &[r], InitKind::Zeros);
        let sigma = ctx.param(&format!("{prefix}.sigma"), &[r], InitKind::Ones);
        bits_terms.push(ctx.b.gaussian_code_length(vt, mu, sigma));
    }
    let bits = ctx.b.add(bits_terms[0], bits_terms[1]);
    ctx.b.mark_output(OUT_BITS, bits);

    let loss = if lambda_rate > 0.0 {
        let rate = ctx.b.scale(bits, lambda_rate);
        ctx.b.add(ce, rate)
    } else {
        ce
    };
    ctx.b.mark_output(OUT_LOSS, loss);
    ctx.finish()
}

/// Inference helper: one device's observation to its semantic feature.
pub fn build_feature(spec: &NetSpec, store: &mut ParamStore, seed: u64, device: Device) -> Graph {
    let mut ctx = NetCtx::new(store, seed, spec.dims.leaky_slope);
    let s = ctx.input(IN_S, spec.dims.obs_dim);
    let v = ctx.feature_encoder(s, device, spec);
    ctx.b.mark_output(OUT_V, v);
    ctx.finish()
}

/// Inference helper: observation to the power-normalized codeword (plus the
/// intermediate feature), for one device.
pub fn build_encode(spec: &NetSpec, store: &mut ParamStore, seed: u64, device: Device) -> Graph {
    let mut ctx = NetCtx::new(store, seed, spec.dims.leaky_slope);
    let s = ctx.input(IN_S, spec.dims.obs_dim);
    let v = ctx.feature_encoder(s, device, spec);
    ctx.b.mark_output(OUT_V, v);
    let enc_csi = ctx.enc_csi(spec);
    let x = ctx.jscc_encoder(v, device, spec, enc_csi);
    ctx.b.mark_output(OUT_X, x);
    ctx.finish()
}

/// Inference helper: received signal to reconstructed features and the
/// pooled retrieval representation.
pub fn build_decode(spec: &NetSpec, store: &mut ParamStore, seed: u64) -> Graph {
    let mut ctx = NetCtx::new(store, seed, spec.dims.leaky_slope);
    let y = ctx.input(IN_Y, spec.decoder_input_width());
    let csi1 = ctx.dec_csi(spec, Device::One);
    let vhat1 = ctx.decoder(y, Device::One, spec, csi1);
    ctx.b.mark_output(OUT_VHAT1, vhat1);
    let pooled = if spec.scheme.is_two_device() {
        let csi2 = ctx.dec_csi(spec, Device::Two);
        let vhat2 = ctx.decoder(y, Device::Two, spec, csi2);
        ctx.b.mark_output(OUT_VHAT2, vhat2);
        ctx.b.concat(vhat1, vhat2)
    } else {
        vhat1
    };
    ctx.b.mark_output(OUT_POOLED, pooled);
    ctx.finish()
}

#[cfg(test)]
mod test {
    use super::*;
    use crate::ad::{Inputs, NodeKind};
    use crate::nets::{component_of, Adaptation, CsiMode, ModelDims, IN_NOISE};
    use crate::tensor::Tensor;

    fn spec(scheme: Scheme, adaptation: Adaptation, channel: ChannelKind) -> NetSpec {
        NetSpec::new(ModelDims::default(), scheme, adaptation, channel)
    }

    /// Deterministic but unstructured batch fill.
    fn fill(rows: usize, cols: usize, phase: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|i| (phase + i as f64 * 0.7).sin())
            .collect();
        Tensor::matrix(rows, cols, data)
    }

    fn onehot_rows(rows: usize, classes: usize) -> Tensor {
        let mut data = vec![0.0; rows * classes];
        for r in 0..rows {
            data[r * classes + (r * 7) % classes] = 1.0;
        }
        Tensor::matrix(rows, classes, data)
    }

    fn slot_width(g: &Graph, name: &str) -> Option<usize> {
        g.input_slots()
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.width)
    }

    #[test]
    fn t1_two_device_outputs_have_expected_shapes() {
        let spec = spec(Scheme::Noma, Adaptation::Fixed, ChannelKind::Awgn);
        let mut store = ParamStore::new();
        let g = build_t1(&spec, &mut store, 3);
        let mut inputs = Inputs::new();
        inputs.insert(IN_S1.into(), fill(4, 64, 0.0));
        inputs.insert(IN_S2.into(), fill(4, 64, 1.0));
        inputs.insert(IN_LABELS.into(), onehot_rows(4, 100));
        let eval = g.eval_train(&inputs, &mut store).unwrap();
        let loss = eval.value(g.output_id(OUT_LOSS).unwrap());
        assert_eq!(loss.len(), 1);
        assert!(loss.item().is_finite() && loss.item() > 0.0);
        assert_eq!(
            eval.value(g.output_id(OUT_LOGITS_MAIN).unwrap()).shape(),
            &[4, 100]
        );
        assert_eq!(eval.value(g.output_id(OUT_V1).unwrap()).shape(), &[4, 32]);
        assert_eq!(eval.value(g.output_id(OUT_V2).unwrap()).shape(), &[4, 32]);
    }

    #[test]
    fn t2_references_only_jscc_parameters() {
        let spec = spec(Scheme::Noma, Adaptation::Fixed, ChannelKind::Awgn);
        let mut store = ParamStore::new();
        let g = build_t2(&spec, &mut store, 3);
        for node in g.nodes() {
            if let NodeKind::Param(name) = node {
                assert_eq!(component_of(name), "jscc", "unexpected parameter {name}");
            }
        }
    }

    #[test]
    fn shared_components_initialize_identically_across_schemes() {
        let mut store_noma = ParamStore::new();
        let mut store_oma = ParamStore::new();
        build_t1(
            &spec(Scheme::Noma, Adaptation::Fixed, ChannelKind::Awgn),
            &mut store_noma,
            9,
        );
        build_t1(
            &spec(Scheme::Oma, Adaptation::Fixed, ChannelKind::Awgn),
            &mut store_oma,
            9,
        );
        for name in ["feat1.fc0.weight", "feat2.fc1.weight", "cls_main.fc0.weight"] {
            let a = store_noma.value(name).unwrap();
            let b = store_oma.value(name).unwrap();
            assert_eq!(a.data(), b.data(), "{name} differs between schemes");
        }
    }

    #[test]
    fn codewords_meet_their_power_budget() {
        for (scheme, expected_sum) in [
            (Scheme::Oma, 32.0),    // 32 symbols at unit power
            (Scheme::Noma, 32.0),   // 64 symbols at half power
            (Scheme::Single, 64.0), // 64 symbols at unit power
        ] {
            let spec = spec(scheme, Adaptation::Fixed, ChannelKind::Awgn);
            let mut store = ParamStore::new();
            let g = build_encode(&spec, &mut store, 5, Device::One);
            let mut inputs = Inputs::new();
            inputs.insert(IN_S.into(), fill(3, 64, 0.3));
            let eval = g.eval_infer(&inputs, &store).unwrap();
            let x = eval.value(g.output_id(OUT_X).unwrap());
            assert_eq!(x.shape(), &[3, 2 * spec.codeword_symbols()]);
            for row in 0..3 {
                let energy: f64 = x.row(row).iter().map(|v| v * v).sum();
                assert!(
                    (energy - expected_sum).abs() < 1e-9,
                    "{scheme} row {row}: energy {energy} != {expected_sum}"
                );
            }
        }
    }

    #[test]
    fn channel_slots_follow_scheme_rules() {
        // OMA over Rayleigh with a plain decoder equalizes per link.
        let g = {
            let spec = spec(Scheme::Oma, Adaptation::Fixed, ChannelKind::Rayleigh);
            build_t2(&spec, &mut ParamStore::new(), 1)
        };
        assert_eq!(slot_width(&g, IN_H1), Some(64));
        assert_eq!(slot_width(&g, IN_EQ1), Some(64));
        assert_eq!(slot_width(&g, IN_EQ2), Some(64));
        assert_eq!(slot_width(&g, IN_NOISE1), Some(64));
        assert!(slot_width(&g, IN_NOISE).is_none());

        // NOMA superposes; no equalizer slots ever appear.
        let g = {
            let spec = spec(Scheme::Noma, Adaptation::Fixed, ChannelKind::Rayleigh);
            build_t2(&spec, &mut ParamStore::new(), 1)
        };
        assert_eq!(slot_width(&g, IN_H1), Some(128));
        assert_eq!(slot_width(&g, IN_H2), Some(128));
        assert_eq!(slot_width(&g, IN_NOISE), Some(128));
        assert!(slot_width(&g, IN_EQ1).is_none());

        // Fading-aware OMA reads raw gains through CSI instead of equalizing.
        let g = {
            let spec = spec(Scheme::Oma, Adaptation::FadingAware, ChannelKind::Rayleigh);
            build_t2(&spec, &mut ParamStore::new(), 1)
        };
        assert!(slot_width(&g, IN_EQ1).is_none());
        assert_eq!(slot_width(&g, IN_CSI_DEC1), Some(4));

        // Own-link CSI narrows the conditioning vector.
        let g = {
            let mut spec = spec(Scheme::Oma, Adaptation::FadingAware, ChannelKind::Rayleigh);
            spec.csi_mode = CsiMode::OwnLink;
            build_t2(&spec, &mut ParamStore::new(), 1)
        };
        assert_eq!(slot_width(&g, IN_CSI_DEC1), Some(2));
    }

    #[test]
    fn snr_aware_graphs_thread_csi_everywhere() {
        let aware = spec(Scheme::Noma, Adaptation::SnrAware, ChannelKind::Awgn);
        let g = build_t3(&aware, &mut ParamStore::new(), 2, 0.0);
        assert_eq!(slot_width(&g, IN_CSI_ENC), Some(1));
        assert_eq!(slot_width(&g, IN_CSI_DEC1), Some(1));
        assert_eq!(slot_width(&g, IN_CSI_DEC2), Some(1));
        // Fixed graphs carry no CSI slots at all.
        let fixed = spec(Scheme::Noma, Adaptation::Fixed, ChannelKind::Awgn);
        let g = build_t3(&fixed, &mut ParamStore::new(), 2, 0.0);
        assert!(slot_width(&g, IN_CSI_ENC).is_none());
        assert!(slot_width(&g, IN_CSI_DEC1).is_none());
    }

    #[test]
    fn decode_pools_per_scheme() {
        let spec_two = spec(Scheme::Noma, Adaptation::Fixed, ChannelKind::Awgn);
        let g = build_decode(&spec_two, &mut ParamStore::new(), 4);
        let mut inputs = Inputs::new();
        inputs.insert(IN_Y.into(), fill(2, 128, 0.2));
        let store = {
            let mut s = ParamStore::new();
            build_decode(&spec_two, &mut s, 4);
            s
        };
        let eval = g.eval_infer(&inputs, &store).unwrap();
        assert_eq!(eval.value(g.output_id(OUT_POOLED).unwrap()).shape(), &[2, 64]);

        let spec_one = spec(Scheme::Single, Adaptation::Fixed, ChannelKind::Awgn);
        let mut store = ParamStore::new();
        let g = build_decode(&spec_one, &mut store, 4);
        let mut inputs = Inputs::new();
        inputs.insert(IN_Y.into(), fill(2, 128, 0.2));
        let eval = g.eval_infer(&inputs, &store).unwrap();
        assert_eq!(eval.value(g.output_id(OUT_POOLED).unwrap()).shape(), &[2, 32]);
    }

    #[test]
    fn digital_loss_is_classification_plus_priced_bits() {
        let spec = spec(Scheme::Digital, Adaptation::Fixed, ChannelKind::Awgn);
        let lambda = 0.01;
        let mut store = ParamStore::new();
        let g = build_digital(&spec, &mut store, 6, lambda);
        let mut inputs = Inputs::new();
        inputs.insert(IN_S1.into(), fill(4, 64, 0.0));
        inputs.insert(IN_S2.into(), fill(4, 64, 1.0));
        inputs.insert(IN_LABELS.into(), onehot_rows(4, 100));
        inputs.insert(IN_U1.into(), Tensor::matrix(4, 32, vec![0.0; 128]));
        inputs.insert(IN_U2.into(), Tensor::matrix(4, 32, vec![0.0; 128]));
        let eval = g.eval_train(&inputs, &mut store).unwrap();
        let ce = eval.value(g.output_id(OUT_CE).unwrap()).item();
        let bits = eval.value(g.output_id(OUT_BITS).unwrap()).item();
        let loss = eval.value(g.output_id(OUT_LOSS).unwrap()).item();
        assert!(bits > 0.0, "code length should be positive, got {bits}");
        assert!((loss - (ce + lambda * bits)).abs() < 1e-12);
    }
}
