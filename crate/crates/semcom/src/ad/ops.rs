//! Forward and adjoint kernels for every graph primitive.
//!
//! Adjoints are exact derivatives of the forward definitions (up to the usual
//! subgradient conventions at kinks) and are validated against central finite
//! differences by `grad_check` and the test suite.

use std::f64::consts::{LN_2, SQRT_2};

use crate::ad::{AdError, BnUpdate, Mode, NodeId, Op, ParamStore};
use crate::tensor::Tensor;

/// Smallest probability admitted by the discretized-Gaussian code-length
/// model; one bin never costs more than 64 bits.
pub const CODE_LENGTH_P_FLOOR: f64 = 5.421010862427522e-20; // 2^-64
/// Scale floor for the entropy model; gradients to sigma vanish below it.
pub const CODE_LENGTH_SIGMA_FLOOR: f64 = 1e-6;

const SQRT_2PI: f64 = 2.5066282746310002;

/// Standard normal cumulative distribution function.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * (1.0 + libm::erf(t / SQRT_2))
}

fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / SQRT_2PI
}

/// Code length in bits of one quantized coordinate under the discretized
/// Gaussian bin model. Shared by the in-graph loss node and the digital
/// baseline's rate accounting, so the two can never disagree.
pub fn discrete_gaussian_bits(w: f64, mu: f64, sigma: f64) -> f64 {
    let (p, _, _) = bin_probability(w, mu, sigma);
    -p.max(CODE_LENGTH_P_FLOOR).ln() / LN_2
}

/// Row-major matrix product `out = A (op) B` with optional transposition of
/// either operand buffer. `m, k, n` are the logical dimensions after
/// transposition.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err(node: NodeId, detail: impl Into<String>) -> AdError {
    AdError::ShapeMismatch {
        node,
        detail: detail.into(),
    }
}

fn expect_same_shape(a: &Tensor, b: &Tensor, node: NodeId, what: &str) -> Result<(), AdError> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            node,
            format!("{what}: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn forward(
    op: &Op,
    args: &[&Tensor],
    mode: Mode,
    node: NodeId,
    store: &ParamStore,
) -> Result<(Tensor, Option<BnUpdate>), AdError> {
    let out = match op {
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, ka) = (a.rows(), a.cols());
            let (kb, n) = (b.rows(), b.cols());
            if a.shape().len() != 2 || b.shape().len() != 2 || ka != kb {
                return Err(shape_err(
                    node,
                    format!("matmul {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, ka, n, a.data(), false, b.data(), false, &mut out);
            Tensor::matrix(m, n, out)
        }
        Op::BiasAdd => {
            let (x, b) = (args[0], args[1]);
            if b.shape().len() != 1 || b.len() != x.cols() {
                return Err(shape_err(
                    node,
                    format!("bias-add {:?} + {:?}", x.shape(), b.shape()),
                ));
            }
            let cols = x.cols();
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % cols];
            }
            out
        }
        Op::Add => {
            expect_same_shape(args[0], args[1], node, "add")?;
            let mut out = args[0].clone();
            for (o, r) in out.data_mut().iter_mut().zip(args[1].data()) {
                *o += r;
            }
            out
        }
        Op::Scale(c) => args[0].map(|v| c * v),
        Op::LeakyRelu(slope) => {
            let s = *slope;
            args[0].map(|v| if v > 0.0 { v } else { s * v })
        }
        Op::Relu => args[0].map(|v| v.max(0.0)),
        Op::Sigmoid => args[0].map(|v| 1.0 / (1.0 + (-v).exp())),
        Op::Softmax => {
            let x = args[0];
            let (rows, cols) = (x.rows(), x.cols());
            let mut out = x.clone();
            for r in 0..rows {
                let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            out
        }
        Op::BatchNorm(attrs) => {
            let (x, gamma, beta) = (args[0], args[1], args[2]);
            let (rows, cols) = (x.rows(), x.cols());
            if x.shape().len() != 2
                || gamma.shape() != [cols]
                || beta.shape() != [cols]
            {
                return Err(shape_err(
                    node,
                    format!(
                        "batch-norm x {:?}, gamma {:?}, beta {:?}",
                        x.shape(),
                        gamma.shape(),
                        beta.shape()
                    ),
                ));
            }
            let (mean, var) = match mode {
                Mode::Train => batch_stats(x),
                Mode::Infer => {
                    let mean = stats_entry(store, &attrs.stats, "running_mean", cols)?;
                    let var = stats_entry(store, &attrs.stats, "running_var", cols)?;
                    (mean, var)
                }
            };
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    let xhat = (x.data()[r * cols + c] - mean[c]) / (var[c] + attrs.eps).sqrt();
                    out[r * cols + c] = gamma.data()[c] * xhat + beta.data()[c];
                }
            }
            let update = match mode {
                Mode::Train => Some(BnUpdate {
                    stats: attrs.stats.clone(),
                    momentum: attrs.momentum,
                    batch_mean: Tensor::vector(mean),
                    batch_var: Tensor::vector(var),
                }),
                Mode::Infer => None,
            };
            return Ok((Tensor::matrix(rows, cols, out), update));
        }
        Op::Concat => {
            let (a, b) = (args[0], args[1]);
            if a.shape().len() != b.shape().len() || a.rows() != b.rows() {
                return Err(shape_err(
                    node,
                    format!("concat {:?} | {:?}", a.shape(), b.shape()),
                ));
            }
            let rows = a.rows();
            let (ca, cb) = (a.cols(), b.cols());
            let mut out = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                out.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
                out.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
            }
            if a.shape().len() == 1 {
                Tensor::vector(out)
            } else {
                Tensor::matrix(rows, ca + cb, out)
            }
        }
        Op::Mul => {
            expect_same_shape(args[0], args[1], node, "mul")?;
            let mut out = args[0].clone();
            for (o, r) in out.data_mut().iter_mut().zip(args[1].data()) {
                *o *= r;
            }
            out
        }
        Op::ComplexMul => {
            expect_same_shape(args[0], args[1], node, "complex-mul")?;
            if args[0].cols() % 2 != 0 {
                return Err(shape_err(node, "complex-mul needs an even last axis"));
            }
            let (a, b) = (args[0].data(), args[1].data());
            let mut out = vec![0.0; a.len()];
            for i in (0..a.len()).step_by(2) {
                out[i] = a[i] * b[i] - a[i + 1] * b[i + 1];
                out[i + 1] = a[i] * b[i + 1] + a[i + 1] * b[i];
            }
            Tensor::new(args[0].shape().to_vec(), out).expect("shape preserved")
        }
        Op::PowerNormalize { symbols, power } => {
            let x = args[0];
            if x.cols() != 2 * symbols {
                return Err(shape_err(
                    node,
                    format!(
                        "power-normalize expects {} interleaved columns, got {}",
                        2 * symbols,
                        x.cols()
                    ),
                ));
            }
            let cols = x.cols();
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
                crate::channel::normalize_row_in_place(row, *symbols, *power)
                    .ok_or(AdError::DegenerateCodeword { node })?;
            }
            out
        }
        Op::Mse => {
            expect_same_shape(args[0], args[1], node, "mse")?;
            let n = args[0].len() as f64;
            let sum: f64 = args[0]
                .data()
                .iter()
                .zip(args[1].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Tensor::scalar(sum / n)
        }
        Op::SoftmaxCrossEntropy => {
            expect_same_shape(args[0], args[1], node, "cross-entropy")?;
            let (z, y) = (args[0], args[1]);
            let (rows, cols) = (z.rows(), z.cols());
            let mut total = 0.0;
            for r in 0..rows {
                let zr = &z.data()[r * cols..(r + 1) * cols];
                let yr = &y.data()[r * cols..(r + 1) * cols];
                let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_sum = zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                total += yr
                    .iter()
                    .zip(zr)
                    .map(|(y, z)| y * (log_sum - z))
                    .sum::<f64>();
            }
            Tensor::scalar(total / rows as f64)
        }
        Op::CosineSquared => {
            expect_same_shape(args[0], args[1], node, "cosine-squared")?;
            let (a, b) = (args[0], args[1]);
            let (rows, cols) = (a.rows(), a.cols());
            let mut total = 0.0;
            for r in 0..rows {
                let ar = &a.data()[r * cols..(r + 1) * cols];
                let br = &b.data()[r * cols..(r + 1) * cols];
                let (na, nb) = (crate::tensor::dot(ar, ar), crate::tensor::dot(br, br));
                if na == 0.0 || nb == 0.0 {
                    return Err(AdError::ZeroNorm { node });
                }
                let ip = crate::tensor::dot(ar, br);
                total += ip * ip / (na * nb);
            }
            Tensor::scalar(total / rows as f64)
        }
        Op::GaussianCodeLength => {
            let (w, mu, sigma) = (args[0], args[1], args[2]);
            let cols = w.cols();
            if mu.shape() != [cols] || sigma.shape() != [cols] {
                return Err(shape_err(
                    node,
                    format!(
                        "code-length values {:?}, mu {:?}, sigma {:?}",
                        w.shape(),
                        mu.shape(),
                        sigma.shape()
                    ),
                ));
            }
            let rows = w.rows();
            let mut total = 0.0;
            for r in 0..rows {
                for c in 0..cols {
                    total += discrete_gaussian_bits(
                        w.data()[r * cols + c],
                        mu.data()[c],
                        sigma.data()[c],
                    );
                }
            }
            Tensor::scalar(total / rows as f64)
        }
        Op::WrongAdjointSquare => args[0].map(|v| v * v),
    };
    Ok((out, None))
}

pub(crate) fn backward(
    op: &Op,
    args: &[&Tensor],
    out: &Tensor,
    grad: &Tensor,
    node: NodeId,
) -> Result<Vec<Option<Tensor>>, AdError> {
    let grads = match op {
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            gemm(m, n, k, grad.data(), false, b.data(), true, &mut ga);
            gemm(k, m, n, a.data(), true, grad.data(), false, &mut gb);
            vec![
                Some(Tensor::matrix(m, k, ga)),
                Some(Tensor::matrix(k, n, gb)),
            ]
        }
        Op::BiasAdd => {
            let cols = args[1].len();
            let mut gb = vec![0.0; cols];
            for (i, g) in grad.data().iter().enumerate() {
                gb[i % cols] += g;
            }
            vec![Some(grad.clone()), Some(Tensor::vector(gb))]
        }
        Op::Add => vec![Some(grad.clone()), Some(grad.clone())],
        Op::Scale(c) => {
            let c = *c;
            vec![Some(grad.map(|g| c * g))]
        }
        Op::LeakyRelu(slope) => {
            let s = *slope;
            let gx = zip_map(grad, args[0], |g, x| if x > 0.0 { g } else { s * g });
            vec![Some(gx)]
        }
        Op::Relu => {
            let gx = zip_map(grad, args[0], |g, x| if x > 0.0 { g } else { 0.0 });
            vec![Some(gx)]
        }
        Op::Sigmoid => {
            let gx = zip_map(grad, out, |g, s| g * s * (1.0 - s));
            vec![Some(gx)]
        }
        Op::Softmax => {
            let (rows, cols) = (out.rows(), out.cols());
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                let p = &out.data()[r * cols..(r + 1) * cols];
                let g = &grad.data()[r * cols..(r + 1) * cols];
                let pg = crate::tensor::dot(p, g);
                for c in 0..cols {
                    gx[r * cols + c] = p[c] * (g[c] - pg);
                }
            }
            vec![Some(clone_shape(args[0], gx))]
        }
        Op::BatchNorm(attrs) => {
            // Backward always uses batch statistics; backward passes are only
            // legal after a train-mode forward.
            let (x, gamma) = (args[0], args[1]);
            let (rows, cols) = (x.rows(), x.cols());
            let m = rows as f64;
            let (mean, var) = batch_stats(x);
            let mut gx = vec![0.0; rows * cols];
            let mut ggamma = vec![0.0; cols];
            let mut gbeta = vec![0.0; cols];
            for c in 0..cols {
                let inv_std = 1.0 / (var[c] + attrs.eps).sqrt();
                let mut sum_gy = 0.0;
                let mut sum_gy_xhat = 0.0;
                for r in 0..rows {
                    let g = grad.data()[r * cols + c];
                    let xhat = (x.data()[r * cols + c] - mean[c]) * inv_std;
                    sum_gy += g;
                    sum_gy_xhat += g * xhat;
                }
                ggamma[c] = sum_gy_xhat;
                gbeta[c] = sum_gy;
                let gscale = gamma.data()[c] * inv_std / m;
                for r in 0..rows {
                    let g = grad.data()[r * cols + c];
                    let xhat = (x.data()[r * cols + c] - mean[c]) * inv_std;
                    gx[r * cols + c] = gscale * (m * g - sum_gy - xhat * sum_gy_xhat);
                }
            }
            vec![
                Some(Tensor::matrix(rows, cols, gx)),
                Some(Tensor::vector(ggamma)),
                Some(Tensor::vector(gbeta)),
            ]
        }
        Op::Concat => {
            let (a, b) = (args[0], args[1]);
            let rows = a.rows();
            let (ca, cb) = (a.cols(), b.cols());
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for r in 0..rows {
                let row = &grad.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            vec![Some(clone_shape(a, ga)), Some(clone_shape(b, gb))]
        }
        Op::Mul => {
            let ga = zip_map(grad, args[1], |g, b| g * b);
            let gb = zip_map(grad, args[0], |g, a| g * a);
            vec![Some(ga), Some(gb)]
        }
        Op::ComplexMul => {
            let (a, b) = (args[0].data(), args[1].data());
            let g = grad.data();
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for i in (0..a.len()).step_by(2) {
                // grad wrt a is g * conj(b); wrt b is g * conj(a)
                ga[i] = g[i] * b[i] + g[i + 1] * b[i + 1];
                ga[i + 1] = g[i + 1] * b[i] - g[i] * b[i + 1];
                gb[i] = g[i] * a[i] + g[i + 1] * a[i + 1];
                gb[i + 1] = g[i + 1] * a[i] - g[i] * a[i + 1];
            }
            vec![Some(clone_shape(args[0], ga)), Some(clone_shape(args[1], gb))]
        }
        Op::PowerNormalize { symbols, power } => {
            let x = args[0];
            let cols = x.cols();
            let c = ((*symbols as f64) * power).sqrt();
            let mut gx = vec![0.0; x.len()];
            for r in 0..x.rows() {
                let xr = &x.data()[r * cols..(r + 1) * cols];
                let gr = &grad.data()[r * cols..(r + 1) * cols];
                let norm = crate::tensor::dot(xr, xr).sqrt();
                let scale = c / norm;
                let xhat: Vec<f64> = xr.iter().map(|v| v / norm).collect();
                let xg = crate::tensor::dot(&xhat, gr);
                for i in 0..cols {
                    gx[r * cols + i] = scale * (gr[i] - xhat[i] * xg);
                }
            }
            vec![Some(clone_shape(x, gx))]
        }
        Op::Mse => {
            let n = args[0].len() as f64;
            let g = grad.item() * 2.0 / n;
            let ga = zip_map(args[0], args[1], |a, b| g * (a - b));
            let gb = ga.map(|v| -v);
            vec![Some(ga), Some(gb)]
        }
        Op::SoftmaxCrossEntropy => {
            let (z, y) = (args[0], args[1]);
            let (rows, cols) = (z.rows(), z.cols());
            let g = grad.item() / rows as f64;
            let mut gz = vec![0.0; rows * cols];
            for r in 0..rows {
                let zr = &z.data()[r * cols..(r + 1) * cols];
                let yr = &y.data()[r * cols..(r + 1) * cols];
                let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = zr.iter().map(|v| (v - max).exp()).sum();
                for c in 0..cols {
                    let p = (zr[c] - max).exp() / sum;
                    gz[r * cols + c] = g * (p - yr[c]);
                }
            }
            vec![Some(clone_shape(z, gz)), None]
        }
        Op::CosineSquared => {
            let (a, b) = (args[0], args[1]);
            let (rows, cols) = (a.rows(), a.cols());
            let g = grad.item() / rows as f64;
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for r in 0..rows {
                let ar = &a.data()[r * cols..(r + 1) * cols];
                let br = &b.data()[r * cols..(r + 1) * cols];
                let na = crate::tensor::dot(ar, ar);
                let nb = crate::tensor::dot(br, br);
                let ip = crate::tensor::dot(ar, br);
                let base = 2.0 * ip / (na * nb);
                for c in 0..cols {
                    ga[r * cols + c] = g * base * (br[c] - ip / na * ar[c]);
                    gb[r * cols + c] = g * base * (ar[c] - ip / nb * br[c]);
                }
            }
            vec![Some(clone_shape(a, ga)), Some(clone_shape(b, gb))]
        }
        Op::GaussianCodeLength => {
            let (w, mu, sigma) = (args[0], args[1], args[2]);
            let (rows, cols) = (w.rows(), w.cols());
            let g = grad.item() / rows as f64;
            let mut gw = vec![0.0; w.len()];
            let mut gmu = vec![0.0; cols];
            let mut gsigma = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    let (p, z_hi, z_lo) =
                        bin_probability(w.data()[r * cols + c], mu.data()[c], sigma.data()[c]);
                    if p < CODE_LENGTH_P_FLOOR {
                        continue; // clamped: the floor kills the gradient
                    }
                    let s = sigma.data()[c].max(CODE_LENGTH_SIGMA_FLOOR);
                    let dbits_dp = -1.0 / (p * LN_2);
                    let dp_dw = (normal_pdf(z_hi) - normal_pdf(z_lo)) / s;
                    gw[r * cols + c] = g * dbits_dp * dp_dw;
                    gmu[c] += -g * dbits_dp * dp_dw;
                    if sigma.data()[c] >= CODE_LENGTH_SIGMA_FLOOR {
                        let dp_ds = -(z_hi * normal_pdf(z_hi) - z_lo * normal_pdf(z_lo)) / s;
                        gsigma[c] += g * dbits_dp * dp_ds;
                    }
                }
            }
            vec![
                Some(clone_shape(w, gw)),
                Some(Tensor::vector(gmu)),
                Some(Tensor::vector(gsigma)),
            ]
        }
        Op::WrongAdjointSquare => {
            // Deliberately wrong: the true adjoint is 2 x g. Kept as a
            // negative control so a broken gradient check cannot go unnoticed.
            let gx = zip_map(grad, args[0], |g, x| 3.0 * x * g);
            vec![Some(gx)]
        }
    };
    let _ = node;
    Ok(grads)
}

/// Bin probability of the discretized Gaussian, with the standardized
/// integration limits. Sigma is floored at [`CODE_LENGTH_SIGMA_FLOOR`].
fn bin_probability(w: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let s = sigma.max(CODE_LENGTH_SIGMA_FLOOR);
    let z_hi = (w - mu + 0.5) / s;
    let z_lo = (w - mu - 0.5) / s;
    (normal_cdf(z_hi) - normal_cdf(z_lo), z_hi, z_lo)
}

fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (x.rows(), x.cols());
    let m = rows as f64;
    let mut mean = vec![0.0; cols];
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += x.data()[r * cols + c];
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for r in 0..rows {
        for c in 0..cols {
            let d = x.data()[r * cols + c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= m; // biased estimator, matching the running-statistics update
    }
    (mean, var)
}

fn stats_entry(
    store: &ParamStore,
    prefix: &str,
    suffix: &str,
    cols: usize,
) -> Result<Vec<f64>, AdError> {
    let name = format!("{prefix}.{suffix}");
    let t = store
        .value(&name)
        .ok_or(AdError::MissingStats { name: name.clone() })?;
    if t.len() != cols {
        return Err(AdError::MissingStats { name });
    }
    Ok(t.data().to_vec())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    clone_shape(a, data)
}

fn clone_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("shape preserved")
}
