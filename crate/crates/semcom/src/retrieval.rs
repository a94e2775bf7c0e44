//! Gallery construction, nearest-neighbor ranking and scheme evaluation.
//!
//! The gallery holds channel-free pooled features of the test split's
//! gallery captures. A query runs the full pipeline of its scheme — encode,
//! transmit, decode, pool — and is ranked against the gallery by squared
//! Euclidean distance. Every query draws its channel realization from its
//! own RNG substream, so results are independent of evaluation batching and
//! of whether chunks run in parallel.

use std::path::Path;

use thiserror::Error;

use crate::ad::{AdError, Graph, Inputs, ParamStore};
use crate::channel::{
    equalize_in_place, sample_fading, snr_to_sigma2, transmit_noma, transmit_oma, transmit_p2p,
    ChannelError, Gain,
};
use crate::dataset::{Split, View};
use crate::digital::{digital_transmit, DigitalError, DigitalOutcome, EntropyModel};
use crate::nets::{
    build_decode, build_encode, build_feature, Adaptation, ChannelKind, CsiMode, Device, NetSpec,
    Scheme, IN_CSI_DEC1, IN_CSI_DEC2, IN_CSI_ENC, IN_S, IN_Y, OUT_POOLED, OUT_V, OUT_X,
};
use crate::parallel::try_par_map;
use crate::rng::{substream, StreamPurpose};
use crate::tensor::Tensor;
use crate::training::cos_sq;

/// Queries are decoded in fixed-size row chunks; chunking never affects
/// results because randomness is drawn per query.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query width {query} != gallery width {gallery}")]
    WidthMismatch { query: usize, gallery: usize },
    #[error("no queries to evaluate")]
    NoQueries,
    #[error(
        "checkpoint does not match the scheme: {missing} parameters were absent and \
         freshly initialized"
    )]
    CheckpointMismatch { missing: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Digital(#[from] DigitalError),
    #[error("metrics i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics write failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Immutable nearest-neighbor index over pooled gallery features.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    features: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

impl GalleryIndex {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self, EvalError> {
        if features.is_empty() {
            return Err(EvalError::EmptyGallery);
        }
        assert_eq!(features.len(), labels.len());
        let width = features[0].len();
        for f in &features {
            assert_eq!(f.len(), width, "gallery features must share one width");
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.features[0].len()
    }

    pub fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }
}

/// Full rank list: gallery indices by ascending squared Euclidean distance,
/// ties broken by ascending index.
pub fn rank_query(query: &[f64], gallery: &GalleryIndex) -> Result<Vec<usize>, EvalError> {
    if query.len() != gallery.width() {
        return Err(EvalError::WidthMismatch {
            query: query.len(),
            gallery: gallery.width(),
        });
    }
    let dist: Vec<f64> = gallery
        .features
        .iter()
        .map(|g| g.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Fraction of queries whose rank-1 gallery entry shares their identity.
pub fn top1_accuracy(
    queries: &[Vec<f64>],
    labels: &[u32],
    gallery: &GalleryIndex,
) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    assert_eq!(queries.len(), labels.len());
    let mut hits = 0usize;
    for (q, &label) in queries.iter().zip(labels) {
        let best = rank_query(q, gallery)?[0];
        if gallery.label(best) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Builds graphs against a cloned store and fails if any parameter had to be
/// freshly initialized — that means the store was trained for a different
/// scheme or architecture.
fn guarded<T>(
    store: &ParamStore,
    build: impl FnOnce(&mut ParamStore) -> T,
) -> Result<(T, ParamStore), EvalError> {
    let mut local = store.clone();
    let before = local.len();
    let out = build(&mut local);
    let grown = local.len() - before;
    if grown > 0 {
        return Err(EvalError::CheckpointMismatch { missing: grown });
    }
    Ok((out, local))
}

fn infer_batch(
    graph: &Graph,
    store: &ParamStore,
    input: &str,
    value: Tensor,
    extra: Option<(&str, Tensor)>,
    output: &str,
) -> Result<Tensor, EvalError> {
    let mut inputs = Inputs::new();
    inputs.insert(input.into(), value);
    if let Some((name, t)) = extra {
        inputs.insert(name.into(), t);
    }
    let eval = graph.eval_infer(&inputs, store)?;
    Ok(eval.value(graph.output_id(output)?).clone())
}

/// Channel-free pooled features of the split's gallery captures, labeled by
/// identity. Two-device schemes pool both views; the single-device scheme
/// keeps its own view's feature.
pub fn build_gallery(
    spec: &NetSpec,
    store: &ParamStore,
    data: &Split,
) -> Result<GalleryIndex, EvalError> {
    let rows = data.gallery_rows();
    if rows.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let (graphs, local) = guarded(store, |s| {
        let g1 = build_feature(spec, s, 0, Device::One);
        let g2 = spec
            .scheme
            .is_two_device()
            .then(|| build_feature(spec, s, 0, Device::Two));
        (g1, g2)
    })?;
    let (g1, g2) = graphs;
    let v1 = infer_batch(&g1, &local, IN_S, data.batch(View::First, &rows), None, OUT_V)?;
    let v2 = match &g2 {
        Some(g2) => Some(infer_batch(
            g2,
            &local,
            IN_S,
            data.batch(View::Second, &rows),
            None,
            OUT_V,
        )?),
        None => None,
    };
    let mut features = Vec::with_capacity(rows.len());
    for i in 0..rows.len() {
        let mut f = v1.row(i).to_vec();
        if let Some(v2) = &v2 {
            f.extend_from_slice(v2.row(i));
        }
        features.push(f);
    }
    let labels = rows.iter().map(|&r| data.identity(r)).collect();
    GalleryIndex::new(features, labels)
}

/// Evaluation result over one query set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub top1: f64,
    /// Mean squared cosine similarity of the two pre-channel codewords;
    /// NaN for schemes without a codeword pair (single-device, digital).
    pub cos_sq: f64,
    /// Fraction of queries lost to digital outage; zero for analog schemes.
    pub outage_rate: f64,
}

/// Per-query channel state drawn from that query's own substream.
struct TaskDraw {
    h1: Gain,
    h2: Gain,
    rng: rand_chacha::ChaCha8Rng,
}

fn task_draw(spec: &NetSpec, seed: u64, query_index: u64) -> TaskDraw {
    let mut rng = substream(seed, StreamPurpose::Eval, query_index);
    let (mut h1, mut h2) = (Gain::UNITY, Gain::UNITY);
    if spec.channel == ChannelKind::Rayleigh {
        h1 = sample_fading(1.0, &mut rng);
        if spec.scheme.is_two_device() {
            h2 = sample_fading(1.0, &mut rng);
        }
    }
    TaskDraw { h1, h2, rng }
}

fn dec_csi_rows(spec: &NetSpec, draws: &[TaskDraw], snr_db: f64) -> Option<(Tensor, Tensor)> {
    let n = draws.len();
    match spec.adaptation {
        Adaptation::Fixed => None,
        Adaptation::SnrAware => {
            let c = Tensor::matrix(n, 1, vec![snr_db / 10.0; n]);
            Some((c.clone(), c))
        }
        Adaptation::FadingAware => {
            let two = spec.scheme.is_two_device();
            if !two || spec.csi_mode == CsiMode::OwnLink {
                let own = |pick: fn(&TaskDraw) -> Gain| {
                    let mut data = Vec::with_capacity(n * 2);
                    for d in draws {
                        let g = pick(d);
                        data.push(g.re);
                        data.push(g.im);
                    }
                    Tensor::matrix(n, 2, data)
                };
                Some((own(|d| d.h1), own(|d| d.h2)))
            } else {
                let mut data = Vec::with_capacity(n * 4);
                for d in draws {
                    data.extend_from_slice(&[d.h1.re, d.h1.im, d.h2.re, d.h2.im]);
                }
                let both = Tensor::matrix(n, 4, data);
                Some((both.clone(), both))
            }
        }
    }
}

fn eval_analog(
    spec: &NetSpec,
    store: &ParamStore,
    data: &Split,
    gallery: &GalleryIndex,
    snr_test_db: f64,
    seed: u64,
) -> Result<EvalOutcome, EvalError> {
    let queries = data.query_rows();
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let two = spec.scheme.is_two_device();
    let (graphs, local) = guarded(store, |s| {
        let e1 = build_encode(spec, s, 0, Device::One);
        let e2 = two.then(|| build_encode(spec, s, 0, Device::Two));
        let dec = build_decode(spec, s, 0);
        (e1, e2, dec)
    })?;
    let (enc1, enc2, dec) = graphs;
    let n = queries.len();

    let enc_csi = || {
        spec.enc_csi_width()
            .map(|_| (IN_CSI_ENC, Tensor::matrix(n, 1, vec![snr_test_db / 10.0; n])))
    };
    let x1 = infer_batch(
        &enc1,
        &local,
        IN_S,
        data.batch(View::First, &queries),
        enc_csi(),
        OUT_X,
    )?;
    let x2 = match &enc2 {
        Some(enc2) => Some(infer_batch(
            enc2,
            &local,
            IN_S,
            data.batch(View::Second, &queries),
            enc_csi(),
            OUT_X,
        )?),
        None => None,
    };

    let cos = match &x2 {
        Some(x2) => {
            (0..n).map(|i| cos_sq(x1.row(i), x2.row(i))).sum::<f64>() / n as f64
        }
        None => f64::NAN,
    };

    let sigma2 = snr_to_sigma2(snr_test_db, 1.0);
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();

    let hits_per_chunk = try_par_map(chunks, |chunk| -> Result<usize, EvalError> {
        let m = chunk.len();
        let width = spec.decoder_input_width();
        let mut y = Vec::with_capacity(m * width);
        let mut draws = Vec::with_capacity(m);
        for &qi in &chunk {
            let mut task = task_draw(spec, seed, qi as u64);
            match spec.scheme {
                Scheme::Single => {
                    let mut row = transmit_p2p(x1.row(qi), task.h1, sigma2, &mut task.rng)?;
                    if spec.equalizes() {
                        equalize_in_place(&mut row, task.h1)?;
                    }
                    y.extend_from_slice(&row);
                }
                Scheme::Oma => {
                    let x2 = x2.as_ref().expect("two-device");
                    let (mut y1, mut y2) = transmit_oma(
                        x1.row(qi),
                        x2.row(qi),
                        task.h1,
                        task.h2,
                        sigma2,
                        &mut task.rng,
                    )?;
                    if spec.equalizes() {
                        equalize_in_place(&mut y1, task.h1)?;
                        equalize_in_place(&mut y2, task.h2)?;
                    }
                    y.extend_from_slice(&y1);
                    y.extend_from_slice(&y2);
                }
                Scheme::Noma => {
                    let x2 = x2.as_ref().expect("two-device");
                    let row = transmit_noma(
                        x1.row(qi),
                        x2.row(qi),
                        task.h1,
                        task.h2,
                        sigma2,
                        &mut task.rng,
                    )?;
                    y.extend_from_slice(&row);
                }
                Scheme::Digital => unreachable!("analog path"),
            }
            draws.push(task);
        }
        let mut inputs = Inputs::new();
        inputs.insert(IN_Y.into(), Tensor::matrix(m, width, y));
        if let Some((c1, c2)) = dec_csi_rows(spec, &draws, snr_test_db) {
            inputs.insert(IN_CSI_DEC1.into(), c1);
            if two {
                inputs.insert(IN_CSI_DEC2.into(), c2);
            }
        }
        let eval = dec.eval_infer(&inputs, &local)?;
        let pooled = eval.value(dec.output_id(OUT_POOLED)?);
        let mut hits = 0;
        for (j, &qi) in chunk.iter().enumerate() {
            let best = rank_query(pooled.row(j), gallery)?[0];
            if gallery.label(best) == data.identity(queries[qi]) {
                hits += 1;
            }
        }
        Ok(hits)
    })?;

    Ok(EvalOutcome {
        top1: hits_per_chunk.iter().sum::<usize>() as f64 / n as f64,
        cos_sq: cos,
        outage_rate: 0.0,
    })
}

fn eval_digital(
    spec: &NetSpec,
    store: &ParamStore,
    data: &Split,
    gallery: &GalleryIndex,
    snr_test_db: f64,
    seed: u64,
) -> Result<EvalOutcome, EvalError> {
    let queries = data.query_rows();
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let (graphs, local) = guarded(store, |s| {
        (
            build_feature(spec, s, 0, Device::One),
            build_feature(spec, s, 0, Device::Two),
        )
    })?;
    let (g1, g2) = graphs;
    let prior1 = EntropyModel::from_store(&local, "prior1")?;
    let prior2 = EntropyModel::from_store(&local, "prior2")?;
    let v1 = infer_batch(&g1, &local, IN_S, data.batch(View::First, &queries), None, OUT_V)?;
    let v2 = infer_batch(&g2, &local, IN_S, data.batch(View::Second, &queries), None, OUT_V)?;

    let sigma2 = snr_to_sigma2(snr_test_db, 1.0);
    let n = queries.len();
    let results = try_par_map((0..n).collect(), |qi: usize| -> Result<(bool, bool), EvalError> {
        let task = task_draw(spec, seed, qi as u64);
        let outcome = digital_transmit(
            v1.row(qi),
            v2.row(qi),
            &prior1,
            &prior2,
            spec.dims.symbol_budget,
            spec.tx_power,
            sigma2,
            task.h1.abs2(),
            task.h2.abs2(),
        )?;
        match outcome {
            DigitalOutcome::Delivered { v1, v2 } => {
                let mut pooled = v1;
                pooled.extend_from_slice(&v2);
                let best = rank_query(&pooled, gallery)?[0];
                let hit = gallery.label(best) == data.identity(queries[qi]);
                Ok((hit, false))
            }
            DigitalOutcome::Outage { .. } => Ok((false, true)),
        }
    })?;

    let hits = results.iter().filter(|(hit, _)| *hit).count();
    let outages = results.iter().filter(|(_, outage)| *outage).count();
    Ok(EvalOutcome {
        top1: hits as f64 / n as f64,
        cos_sq: f64::NAN,
        outage_rate: outages as f64 / n as f64,
    })
}

/// Runs the full retrieval pipeline of `spec` over the split's query set at
/// one test SNR. The gallery is rebuilt channel-free from the same store.
pub fn evaluate_scheme(
    spec: &NetSpec,
    store: &ParamStore,
    data: &Split,
    snr_test_db: f64,
    seed: u64,
) -> Result<EvalOutcome, EvalError> {
    let gallery = build_gallery(spec, store, data)?;
    match spec.scheme {
        Scheme::Digital => eval_digital(spec, store, data, &gallery, snr_test_db, seed),
        _ => eval_analog(spec, store, data, &gallery, snr_test_db, seed),
    }
}

/// Conditioning label for the metrics CSV: how the networks see channel
/// state.
pub fn csi_mode_label(spec: &NetSpec) -> &'static str {
    match spec.adaptation {
        Adaptation::Fixed => "none",
        Adaptation::SnrAware => "snr",
        Adaptation::FadingAware => match spec.csi_mode {
            CsiMode::Both => "fading_both",
            CsiMode::OwnLink => "fading_own",
        },
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scheme: Scheme,
    pub channel: ChannelKind,
    pub csi_mode: String,
    /// Fixed training SNR in dB; NaN (written empty) for range-trained
    /// models.
    pub snr_train_db: f64,
    pub snr_test_db: f64,
    pub q_total: usize,
    pub lambda_cos: f64,
    pub seed: u64,
    pub top1: f64,
    /// NaN (written empty) when the scheme has no codeword pair.
    pub cos_sq: f64,
    pub outage_rate: f64,
}

fn opt_field(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// Writes metrics rows with the fixed column set
/// `scheme, channel, csi_mode, snr_train_db, snr_test_db, q_total,
/// lambda_cos, seed, top1, cos_sq, outage_rate`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "scheme",
        "channel",
        "csi_mode",
        "snr_train_db",
        "snr_test_db",
        "q_total",
        "lambda_cos",
        "seed",
        "top1",
        "cos_sq",
        "outage_rate",
    ])?;
    for r in rows {
        w.write_record([
            r.scheme.as_str().to_string(),
            r.channel.as_str().to_string(),
            r.csi_mode.clone(),
            opt_field(r.snr_train_db),
            r.snr_test_db.to_string(),
            r.q_total.to_string(),
            r.lambda_cos.to_string(),
            r.seed.to_string(),
            r.top1.to_string(),
            opt_field(r.cos_sq),
            r.outage_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod test {
    use super::*;

    fn gallery(entries: &[(&[f64], u32)]) -> GalleryIndex {
        GalleryIndex::new(
            entries.iter().map(|(f, _)| f.to_vec()).collect(),
            entries.iter().map(|(_, l)| *l).collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let g = gallery(&[(&[3.0, 1.0], 1), (&[0.5, -2.0], 2), (&[4.0, 4.0], 3)]);
        assert_eq!(rank_query(&[0.5, -2.0], &g).unwrap()[0], 1);
    }

    #[test]
    fn two_entry_example() {
        let g = gallery(&[(&[0.0, 0.0], 1), (&[1.0, 1.0], 2)]);
        assert_eq!(rank_query(&[0.1, 0.0], &g).unwrap(), vec![0, 1]);
    }

    #[test]
    fn ties_break_by_ascending_index() {
        let g = gallery(&[(&[1.0, 0.0], 5), (&[-2.0, 0.0], 6), (&[1.0, 0.0], 7)]);
        // Entries 0 and 2 are equidistant from the query; 0 must win.
        assert_eq!(rank_query(&[0.0, 0.0], &g).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let g = gallery(&[(&[0.0, 0.0], 1)]);
        assert!(matches!(
            rank_query(&[0.0, 0.0, 0.0], &g),
            Err(EvalError::WidthMismatch { query: 3, gallery: 2 })
        ));
    }

    #[test]
    fn top1_trivial_cases() {
        let g = gallery(&[(&[0.0, 0.0], 1), (&[5.0, 5.0], 2)]);
        // Both queries duplicated in the gallery.
        let q = vec![vec![0.0, 0.0], vec![5.0, 5.0]];
        assert_eq!(top1_accuracy(&q, &[1, 2], &g).unwrap(), 1.0);
        // Labels swapped: no match possible.
        assert_eq!(top1_accuracy(&q, &[2, 1], &g).unwrap(), 0.0);
        // One hit, one miss.
        assert_eq!(top1_accuracy(&q, &[1, 1], &g).unwrap(), 0.5);
    }

    #[test]
    fn rotation_preserves_ranking() {
        let g = gallery(&[(&[1.0, 0.0], 1), (&[0.0, 2.0], 2), (&[-1.0, -1.0], 3)]);
        let q = [0.8, 0.1];
        let rot = |v: &[f64]| vec![-v[1], v[0]]; // 90-degree rotation
        let rotated = gallery(&[
            (&rot(&[1.0, 0.0]), 1),
            (&rot(&[0.0, 2.0]), 2),
            (&rot(&[-1.0, -1.0]), 3),
        ]);
        assert_eq!(
            rank_query(&q, &g).unwrap(),
            rank_query(&rot(&q), &rotated).unwrap()
        );
    }

    #[test]
    fn empty_gallery_is_rejected() {
        assert!(matches!(
            GalleryIndex::new(Vec::new(), Vec::new()),
            Err(EvalError::EmptyGallery)
        ));
    }
}
