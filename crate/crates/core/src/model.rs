//! Convex aggregation, classification head, total loss and its analytic
//! gradient, plus the central-difference checker that verifies it.
//!
//! Per slide with `M` selected patches:
//!
//! ```text
//! H      = attention(E, L)                  M×d_v
//! w      = softmax(θ[..M])                  (or 1/M for mean pooling)
//! h      = Σ_i w_i H_i
//! p      = softmax(W_c h + b)
//! loss_s = -ln p_y + α Σ_ij W_ij ‖H_i - H_j‖²
//! ```
//!
//! The batch loss is the mean over slides. The smoothness sum runs over
//! ordered pairs and equals `2 tr(Hᵀ L H)`, so its gradient is `4 L H`.

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::attention::{attention_forward, AttentionCache, AttentionKind, GlatLayerParams, GraphBias, NodeFeatures};
use crate::data::{GradeLabel, WsiBag};
use crate::error::{GlatError, Result};
use crate::graph::{LaplacianBundle, Sigma};
use crate::linalg::{row_softmax_backward, softmax, softmax_slice};
use crate::rng::SplitMix64;
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Softmax-weighted sum with trainable logits.
    #[default]
    Convex,
    /// Plain mean of the patch features.
    MeanPool,
}

impl FromStr for Aggregation {
    type Err = GlatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convex" => Ok(Self::Convex),
            "mean" => Ok(Self::MeanPool),
            other => Err(GlatError::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Length of the aggregation logit vector (the configured `M`).
    pub m_max: usize,
    pub filter_order: usize,
    pub lambda: f64,
    pub graph_bias: GraphBias,
    pub attention: AttentionKind,
    pub aggregation: Aggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_k: 16,
            d_v: 16,
            m_max: 32,
            filter_order: 2,
            lambda: 0.1,
            graph_bias: GraphBias::Laplacian,
            attention: AttentionKind::Gla,
            aggregation: Aggregation::Convex,
        }
    }
}

/// All trainable parameters plus the non-trainable switches that shape the
/// forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub glat: GlatLayerParams,
    pub agg_logits: Array1<f64>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    pub aggregation: Aggregation,
}

/// Names of the trainable tensors, in checkpoint and iteration order.
pub const PARAM_NAMES: [&str; 7] = ["glat.wq", "glat.wk", "glat.wv", "glat.filter", "agg_logits", "cls_w", "cls_b"];

impl ModelParams {
    /// Projections `N(0, 1/d)`, identity filter, zero logits and zero
    /// classifier: an unbiased MSA with uniform aggregation.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.m_max == 0 {
            return Err(GlatError::invalid("m_max must be >= 1"));
        }
        let mut rng = SplitMix64::new(seed);
        let mut glat = GlatLayerParams::init(
            config.d,
            config.d_k,
            config.d_v,
            config.filter_order,
            config.lambda,
            config.graph_bias,
            &mut rng,
        )?;
        glat.kind = config.attention;
        Ok(Self {
            glat,
            agg_logits: Array1::zeros(config.m_max),
            cls_w: Array2::zeros((NUM_CLASSES, config.d_v)),
            cls_b: Array1::zeros(NUM_CLASSES),
            aggregation: config.aggregation,
        })
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 7] {
        [
            (PARAM_NAMES[0], slice(&self.glat.wq)),
            (PARAM_NAMES[1], slice(&self.glat.wk)),
            (PARAM_NAMES[2], slice(&self.glat.wv)),
            (PARAM_NAMES[3], &self.glat.filter.coeffs),
            (PARAM_NAMES[4], self.agg_logits.as_slice().expect("contiguous")),
            (PARAM_NAMES[5], slice(&self.cls_w)),
            (PARAM_NAMES[6], self.cls_b.as_slice().expect("contiguous")),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 7] {
        [
            (PARAM_NAMES[0], slice_mut(&mut self.glat.wq)),
            (PARAM_NAMES[1], slice_mut(&mut self.glat.wk)),
            (PARAM_NAMES[2], slice_mut(&mut self.glat.wv)),
            (PARAM_NAMES[3], &mut self.glat.filter.coeffs),
            (PARAM_NAMES[4], self.agg_logits.as_slice_mut().expect("contiguous")),
            (PARAM_NAMES[5], slice_mut(&mut self.cls_w)),
            (PARAM_NAMES[6], self.cls_b.as_slice_mut().expect("contiguous")),
        ]
    }

    /// Shapes of the trainable tensors, aligned with [`PARAM_NAMES`].
    pub fn shapes(&self) -> [Vec<usize>; 7] {
        [
            self.glat.wq.shape().to_vec(),
            self.glat.wk.shape().to_vec(),
            self.glat.wv.shape().to_vec(),
            vec![self.glat.filter.coeffs.len()],
            vec![self.agg_logits.len()],
            self.cls_w.shape().to_vec(),
            vec![self.cls_b.len()],
        ]
    }

    pub fn m_max(&self) -> usize {
        self.agg_logits.len()
    }

    pub fn d_v(&self) -> usize {
        self.glat.d_v()
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Gradient of the loss for every trainable tensor of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub filter: Vec<f64>,
    pub agg_logits: Array1<f64>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            wq: Array2::zeros(params.glat.wq.raw_dim()),
            wk: Array2::zeros(params.glat.wk.raw_dim()),
            wv: Array2::zeros(params.glat.wv.raw_dim()),
            filter: vec![0.0; params.glat.filter.coeffs.len()],
            agg_logits: Array1::zeros(params.agg_logits.len()),
            cls_w: Array2::zeros(params.cls_w.raw_dim()),
            cls_b: Array1::zeros(params.cls_b.len()),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 7] {
        [
            (PARAM_NAMES[0], slice(&self.wq)),
            (PARAM_NAMES[1], slice(&self.wk)),
            (PARAM_NAMES[2], slice(&self.wv)),
            (PARAM_NAMES[3], &self.filter),
            (PARAM_NAMES[4], self.agg_logits.as_slice().expect("contiguous")),
            (PARAM_NAMES[5], slice(&self.cls_w)),
            (PARAM_NAMES[6], self.cls_b.as_slice().expect("contiguous")),
        ]
    }

    fn check_finite(&self) -> Result<()> {
        for (name, values) in self.tensors() {
            if !values.iter().all(|v| v.is_finite()) {
                return Err(GlatError::NonFiniteGradient(name.to_string()));
            }
        }
        Ok(())
    }
}

/// A bag with its graph precomputed; the unit consumed by training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBag {
    pub slide_id: String,
    pub label: GradeLabel,
    pub nodes: NodeFeatures,
    pub bundle: LaplacianBundle,
}

impl PreparedBag {
    pub fn new(bag: &WsiBag, sigma: Sigma) -> Result<Self> {
        Self::with_order(bag, &bag.patches.ids(), sigma)
    }

    /// Node `i` is patch `order[i]`; `order` must be a permutation of the
    /// bag's ids. Only the aggregation logits see the order.
    pub fn with_order(bag: &WsiBag, order: &[u64], sigma: Sigma) -> Result<Self> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != bag.patches.ids() {
            return Err(GlatError::invalid("node order must be a permutation of the bag's patch ids"));
        }
        let d = bag.patches.d();
        let mut embeddings = Array2::zeros((order.len(), d));
        for (row, id) in order.iter().enumerate() {
            let rec = bag.patches.get(*id).expect("checked above");
            embeddings.row_mut(row).assign(&ndarray::ArrayView1::from(&rec.embedding[..]));
        }
        let nodes = NodeFeatures {
            ids: order.to_vec(),
            embeddings,
        };
        let bundle = LaplacianBundle::build(nodes.embeddings.view(), &nodes.ids, sigma)?;
        Ok(Self {
            slide_id: bag.slide_id.clone(),
            label: bag.label,
            nodes,
            bundle,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.ids.is_empty()
    }
}

pub fn convex_weights(theta: ArrayView1<f64>) -> Array1<f64> {
    softmax(theta)
}

/// `Σ_i w_i H_i`.
pub fn aggregate_wsi(h: ArrayView2<f64>, w: ArrayView1<f64>) -> Result<Array1<f64>> {
    if h.nrows() != w.len() {
        return Err(GlatError::dims(format!("{} weights for {} patch rows", w.len(), h.nrows())));
    }
    Ok(h.t().dot(&w))
}

pub fn classify(h_wsi: ArrayView1<f64>, cls_w: ArrayView2<f64>, cls_b: ArrayView1<f64>) -> Result<Array1<f64>> {
    if cls_w.ncols() != h_wsi.len() || cls_w.nrows() != cls_b.len() {
        return Err(GlatError::dims(format!(
            "classifier is {}×{} (+{}) but the slide vector has {} entries",
            cls_w.nrows(),
            cls_w.ncols(),
            cls_b.len(),
            h_wsi.len()
        )));
    }
    Ok(softmax((cls_w.dot(&h_wsi) + cls_b).view()))
}

/// `Σ_{i,j} W_ij ‖H_i - H_j‖²` over ordered pairs.
pub fn smoothness_penalty(h: ArrayView2<f64>, w: ArrayView2<f64>) -> Result<f64> {
    let m = h.nrows();
    if w.nrows() != m || w.ncols() != m {
        return Err(GlatError::dims(format!("adjacency {:?} for {m} feature rows", w.shape())));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let d2: f64 = h.row(i).iter().zip(h.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            total += w[[i, j]] * d2;
        }
    }
    Ok(total)
}

/// Everything computed for one slide in the forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub cache: AttentionCache,
    pub weights: Array1<f64>,
    pub h_wsi: Array1<f64>,
    pub probs: Array1<f64>,
    pub ce: f64,
    pub smooth: f64,
}

fn aggregation_weights(params: &ModelParams, m: usize) -> Result<Array1<f64>> {
    match params.aggregation {
        Aggregation::Convex => {
            if m > params.m_max() {
                return Err(GlatError::dims(format!(
                    "slide has {m} patches but only {} aggregation logits",
                    params.m_max()
                )));
            }
            Ok(convex_weights(params.agg_logits.slice(ndarray::s![..m])))
        }
        Aggregation::MeanPool => Ok(Array1::from_elem(m, 1.0 / m as f64)),
    }
}

pub fn forward_sample(bag: &PreparedBag, params: &ModelParams) -> Result<SampleForward> {
    let cache = attention_forward(&bag.nodes, Some(&bag.bundle), &params.glat)?;
    let weights = aggregation_weights(params, bag.len())?;
    let h_wsi = aggregate_wsi(cache.h.view(), weights.view())?;
    if params.cls_w.ncols() != h_wsi.len() {
        return Err(GlatError::dims("classifier width differs from d_v"));
    }
    let logits = params.cls_w.dot(&h_wsi) + &params.cls_b;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let ce = log_z - logits[bag.label.index()];
    let probs = softmax(logits.view());
    let smooth = smoothness_penalty(cache.h.view(), bag.bundle.w.view())?;
    Ok(SampleForward {
        cache,
        weights,
        h_wsi,
        probs,
        ce,
        smooth,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub slide_id: String,
    pub ce: f64,
    pub smooth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `ce_mean + α · smooth_mean`.
    pub total: f64,
    pub ce_mean: f64,
    pub smooth_mean: f64,
    pub per_sample: Vec<SampleLoss>,
}

fn check_batch(batch: &[PreparedBag]) -> Result<()> {
    if batch.is_empty() {
        return Err(GlatError::invalid("empty batch"));
    }
    Ok(())
}

fn report(batch: &[PreparedBag], forwards: &[SampleForward], alpha: f64) -> LossReport {
    let n = batch.len() as f64;
    let ce_mean = forwards.iter().map(|f| f.ce).sum::<f64>() / n;
    let smooth_mean = forwards.iter().map(|f| f.smooth).sum::<f64>() / n;
    LossReport {
        total: ce_mean + alpha * smooth_mean,
        ce_mean,
        smooth_mean,
        per_sample: batch
            .iter()
            .zip(forwards)
            .map(|(b, f)| SampleLoss {
                slide_id: b.slide_id.clone(),
                ce: f.ce,
                smooth: f.smooth,
            })
            .collect(),
    }
}

/// Mean cross-entropy plus `alpha` times the mean smoothness penalty.
pub fn total_loss(batch: &[PreparedBag], params: &ModelParams, alpha: f64) -> Result<LossReport> {
    check_batch(batch)?;
    let forwards = batch
        .iter()
        .map(|b| forward_sample(b, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(batch, &forwards, alpha))
}

/// Analytic gradient of [`total_loss`]; the frozen scorer projections are not
/// part of [`ModelParams`] and so never receive one.
pub fn backward_gradients(batch: &[PreparedBag], params: &ModelParams, alpha: f64) -> Result<(LossReport, Gradients)> {
    check_batch(batch)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut forwards = Vec::with_capacity(batch.len());
    for bag in batch {
        let fwd = forward_sample(bag, params)?;
        accumulate_sample(bag, params, &fwd, alpha, scale, &mut grads);
        forwards.push(fwd);
    }
    grads.check_finite()?;
    Ok((report(batch, &forwards, alpha), grads))
}

fn accumulate_sample(
    bag: &PreparedBag,
    params: &ModelParams,
    fwd: &SampleForward,
    alpha: f64,
    scale: f64,
    grads: &mut Gradients,
) {
    let m = bag.len();
    let cache = &fwd.cache;

    // Classification head.
    let mut dz = fwd.probs.clone();
    dz[bag.label.index()] -= 1.0;
    dz *= scale;
    for c in 0..dz.len() {
        grads.cls_w.row_mut(c).scaled_add(dz[c], &fwd.h_wsi);
    }
    grads.cls_b += &dz;
    let dh_wsi = params.cls_w.t().dot(&dz);

    // Aggregation.
    let mut dh = Array2::zeros(cache.h.raw_dim());
    for (mut row, &w) in dh.axis_iter_mut(Axis(0)).zip(fwd.weights.iter()) {
        row.scaled_add(w, &dh_wsi);
    }
    if params.aggregation == Aggregation::Convex {
        let dw = cache.h.dot(&dh_wsi);
        let inner = fwd.weights.dot(&dw);
        for i in 0..m {
            grads.agg_logits[i] += fwd.weights[i] * (dw[i] - inner);
        }
    }

    // Smoothness: d/dH 2 tr(Hᵀ L H) = 4 L H.
    if alpha != 0.0 {
        dh.scaled_add(4.0 * alpha * scale, &bag.bundle.l.dot(&cache.h));
    }

    // H = A V'.
    let da = dh.dot(&cache.vf.t());
    let dvf = cache.attention.t().dot(&dh);
    let ds = row_softmax_backward(cache.attention.view(), da.view()) / (params.glat.d_k() as f64).sqrt();
    let dqf = ds.dot(&cache.kf);
    let dkf = ds.t().dot(&cache.qf);

    let (dq, dk, dv) = match params.glat.kind {
        AttentionKind::Msa => (dqf, dkf, dvf),
        AttentionKind::Gla => {
            let dfilter = dqf.dot(&cache.q.t()) + dkf.dot(&cache.k.t()) + dvf.dot(&cache.v.t());
            for (g, power) in grads.filter.iter_mut().zip(&cache.powers) {
                *g += (&dfilter * power).sum();
            }
            let ft = cache.filter.t();
            (ft.dot(&dqf), ft.dot(&dkf), ft.dot(&dvf))
        }
    };
    let et = bag.nodes.embeddings.t();
    grads.wq += &et.dot(&dq);
    grads.wk += &et.dot(&dk);
    grads.wv += &et.dot(&dv);
}

/// Per-tensor result of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Index of the worst entry within the tensor.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - g| / max(|a|, |g|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `grads` against central differences of `loss` over every
/// trainable entry of `params`.
pub fn central_difference_report<F>(params: &ModelParams, grads: &Gradients, step: f64, mut loss: F) -> FdReport
where
    F: FnMut(&ModelParams) -> f64,
{
    let mut probe = params.clone();
    let analytic = grads.tensors();
    let mut entries = Vec::with_capacity(PARAM_NAMES.len());
    for (t, (name, g)) in analytic.iter().enumerate() {
        let mut worst = (0.0, 0);
        let mut max_abs = 0.0f64;
        for i in 0..g.len() {
            let original = params.tensors()[t].1[i];
            probe.tensors_mut()[t].1[i] = original + step;
            let plus = loss(&probe);
            probe.tensors_mut()[t].1[i] = original - step;
            let minus = loss(&probe);
            probe.tensors_mut()[t].1[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            max_abs = max_abs.max((g[i] - numeric).abs());
            let err = relative_error(g[i], numeric);
            if err > worst.0 {
                worst = (err, i);
            }
        }
        entries.push(FdEntry {
            name,
            max_rel_error: worst.0,
            max_abs_error: max_abs,
            worst_index: worst.1,
        });
    }
    FdReport { entries }
}

pub fn finite_diff_check(batch: &[PreparedBag], params: &ModelParams, alpha: f64, step: f64) -> Result<FdReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(GlatError::invalid("finite-difference step must be positive"));
    }
    let (_, grads) = backward_gradients(batch, params, alpha)?;
    Ok(central_difference_report(params, &grads, step, |p| {
        total_loss(batch, p, alpha).map(|r| r.total).unwrap_or(f64::NAN)
    }))
}

/// Class probabilities for one slide.
pub fn predict_proba(bag: &PreparedBag, params: &ModelParams) -> Result<[f64; NUM_CLASSES]> {
    let fwd = forward_sample(bag, params)?;
    let mut out = [0.0; NUM_CLASSES];
    out.copy_from_slice(fwd.probs.as_slice().expect("contiguous"));
    Ok(out)
}

pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    softmax_slice(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EmbeddingTable, PatchRecord};
    use crate::graph::FilterParams;
    use crate::linalg::max_abs_diff;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_bag(m: usize, d: usize, label: usize, seed: u64) -> PreparedBag {
        let mut rng = SplitMix64::new(seed);
        let records = (0..m)
            .map(|i| PatchRecord {
                id: i as u64 * 3,
                x: i as u32,
                y: 0,
                embedding: (0..d).map(|_| rng.next_normal()).collect(),
            })
            .collect();
        let table = EmbeddingTable::new(format!("s{seed}"), d, records).unwrap();
        PreparedBag::new(&WsiBag::new(GradeLabel::new(label).unwrap(), table).unwrap(), Sigma::Median).unwrap()
    }

    fn randomize(params: &mut ModelParams, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        for (name, values) in params.tensors_mut() {
            for v in values.iter_mut() {
                *v = match name {
                    "glat.filter" => *v + 0.1 * rng.next_normal(),
                    _ => rng.next_normal() * 0.5,
                };
            }
        }
    }

    fn config(d: usize, m: usize) -> ModelConfig {
        ModelConfig { d, d_k: 3, d_v: 4, m_max: m, ..ModelConfig::default() }
    }

    #[test]
    fn node_order_only_matters_through_aggregation() {
        let base = random_bag(5, 3, 1, 11);
        let table = EmbeddingTable::new(
            "p",
            3,
            base.nodes
                .ids
                .iter()
                .zip(base.nodes.embeddings.rows())
                .map(|(&id, e)| PatchRecord { id, x: id as u32, y: 0, embedding: e.to_vec() })
                .collect(),
        )
        .unwrap();
        let bag = WsiBag::new(GradeLabel::new(1).unwrap(), table).unwrap();
        let order = [12, 0, 6, 3, 9];
        let permuted = PreparedBag::with_order(&bag, &order, Sigma::Median).unwrap();
        assert_eq!(permuted.nodes.ids, order);
        assert_eq!(permuted.nodes.embeddings.row(0), base.nodes.embeddings.row(4));

        let mut params = ModelParams::init(&ModelConfig { aggregation: Aggregation::MeanPool, ..config(3, 5) }, 2).unwrap();
        randomize(&mut params, 3);
        let a = predict_proba(&base, &params).unwrap();
        let b = predict_proba(&permuted, &params).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));

        assert!(PreparedBag::with_order(&bag, &[0, 3, 6, 9], Sigma::Median).is_err());
        assert!(PreparedBag::with_order(&bag, &[0, 3, 6, 9, 9], Sigma::Median).is_err());
    }

    #[test]
    fn convex_weight_examples() {
        let w = convex_weights(array![0.0, 0.0, 0.0].view());
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = convex_weights(array![2f64.ln(), 0.0].view());
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = convex_weights(array![0.3, -1.0, 2.0].view());
        let b = convex_weights(array![1e3 + 0.3, 1e3 - 1.0, 1e3 + 2.0].view());
        assert!(max_abs_diff(a.view().insert_axis(Axis(0)), b.view().insert_axis(Axis(0))) < 1e-12);
    }

    #[test]
    fn aggregation_cases() {
        let h = array![[1.0, -2.0, 3.0]];
        assert_eq!(aggregate_wsi(h.view(), array![1.0].view()).unwrap(), array![1.0, -2.0, 3.0]);
        let h = array![[1.0, 2.0], [3.0, 6.0]];
        assert_eq!(aggregate_wsi(h.view(), array![0.5, 0.5].view()).unwrap(), array![2.0, 4.0]);
        assert!(aggregate_wsi(h.view(), array![1.0].view()).is_err());

        let mut rng = SplitMix64::new(4);
        let h = Array2::from_shape_simple_fn((5, 3), || rng.next_normal());
        let theta = Array1::from_shape_simple_fn(5, || rng.next_normal());
        let w = convex_weights(theta.view());
        let agg = aggregate_wsi(h.view(), w.view()).unwrap();
        for c in 0..3 {
            let col = h.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(agg[c] >= lo && agg[c] <= hi);
            let dot: f64 = (0..5).map(|i| w[i] * h[[i, c]]).sum();
            assert!((agg[c] - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_cases() {
        let w0 = Array2::zeros((4, 3));
        let p = classify(array![1.0, 2.0, 3.0].view(), w0.view(), Array1::zeros(4).view()).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let p = classify(array![1.0, 2.0, 3.0].view(), w0.view(), array![10.0, 0.0, 0.0, 0.0].view()).unwrap();
        let e10 = 10f64.exp();
        assert!((p[0] - e10 / (e10 + 3.0)).abs() < 1e-15);
        assert!(p[0] > 0.9998);

        let mut rng = SplitMix64::new(8);
        let w = Array2::from_shape_simple_fn((4, 3), || rng.next_normal());
        let b = Array1::from_shape_simple_fn(4, || rng.next_normal());
        let h = array![0.5, -1.0, 2.0];
        let p = classify(h.view(), w.view(), b.view()).unwrap();
        let logits: Vec<f64> = (0..4).map(|c| (0..3).map(|k| w[[c, k]] * h[k]).sum::<f64>() + b[c]).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..4 {
            assert!((p[c] - logits[c].exp() / z).abs() < 1e-12);
        }
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(classify(h.view(), Array2::zeros((4, 2)).view(), b.view()).is_err());
    }

    #[test]
    fn smoothness_cases() {
        let h = Array2::from_elem((3, 2), 1.5);
        assert_eq!(smoothness_penalty(h.view(), Array2::from_elem((3, 3), 0.7).view()).unwrap(), 0.0);
        let h = array![[0.0], [1.0]];
        let w = array![[1.0, 0.5], [0.5, 1.0]];
        assert_eq!(smoothness_penalty(h.view(), w.view()).unwrap(), 1.0);

        let bag = random_bag(4, 3, 0, 17);
        let mut rng = SplitMix64::new(3);
        let h = Array2::from_shape_simple_fn((4, 2), || rng.next_normal());
        let quad = 2.0 * h.t().dot(&bag.bundle.l).dot(&h).diag().sum();
        let s = smoothness_penalty(h.view(), bag.bundle.w.view()).unwrap();
        assert!((s - quad).abs() < 1e-10);
    }

    #[test]
    fn loss_decomposition() {
        let bags = [random_bag(4, 5, 1, 1), random_bag(3, 5, 3, 2)];
        let mut p = ModelParams::init(&config(5, 4), 9).unwrap();
        randomize(&mut p, 10);
        let l0 = total_loss(&bags, &p, 0.0).unwrap();
        assert_eq!(l0.total, l0.ce_mean);
        let la = total_loss(&bags, &p, 0.01).unwrap();
        assert!((la.total - l0.total - 0.01 * la.smooth_mean).abs() < 1e-12);
        let per: f64 = bags
            .iter()
            .map(|b| total_loss(std::slice::from_ref(b), &p, 0.01).unwrap().total)
            .sum::<f64>()
            / 2.0;
        assert!((la.total - per).abs() < 1e-12);
        assert_eq!(la.per_sample.len(), 2);
    }

    #[test]
    fn ce_limit_for_confident_correct_predictions() {
        let bag = random_bag(3, 4, 2, 5);
        let mut p = ModelParams::init(&config(4, 3), 1).unwrap();
        p.cls_b = array![0.0, 0.0, 60.0, 0.0];
        let r = total_loss(std::slice::from_ref(&bag), &p, 0.01).unwrap();
        assert!(r.ce_mean < 1e-20);
        assert!((r.total - 0.01 * r.smooth_mean).abs() < 1e-20);
    }

    #[test]
    fn classifier_gradient_is_outer_product() {
        let bag = random_bag(4, 5, 1, 21);
        let mut p = ModelParams::init(&config(5, 4), 2).unwrap();
        randomize(&mut p, 22);
        let (_, g) = backward_gradients(std::slice::from_ref(&bag), &p, 0.0).unwrap();
        let fwd = forward_sample(&bag, &p).unwrap();
        let mut dz = fwd.probs.clone();
        dz[1] -= 1.0;
        for c in 0..4 {
            for k in 0..4 {
                assert!((g.cls_w[[c, k]] - dz[c] * fwd.h_wsi[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_loss_construction_has_vanishing_gradients() {
        // Identical embeddings give identical H rows; a huge bias on the true
        // class drives p_y to 1.
        let table = EmbeddingTable::new(
            "z",
            3,
            (0..4).map(|i| PatchRecord { id: i, x: i as u32, y: 0, embedding: vec![0.2, -0.4, 1.0] }).collect(),
        )
        .unwrap();
        let bag = PreparedBag::new(&WsiBag::new(GradeLabel::new(0).unwrap(), table).unwrap(), Sigma::Median).unwrap();
        let mut p = ModelParams::init(&config(3, 4), 4).unwrap();
        randomize(&mut p, 5);
        p.cls_b = array![80.0, 0.0, 0.0, 0.0];
        let (_, g) = backward_gradients(std::slice::from_ref(&bag), &p, 0.0).unwrap();
        for (name, values) in g.tensors() {
            assert!(values.iter().all(|v| v.abs() < 1e-8), "{name}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, &(m, d, alpha)) in [(2, 4, 0.0), (4, 8, 0.01), (8, 4, 0.01), (4, 4, 0.0)].iter().enumerate() {
            let seed = 100 + k as u64;
            let bags = [random_bag(m, d, k % 4, seed), random_bag(m, d, (k + 1) % 4, seed + 50)];
            let mut p = ModelParams::init(&config(d, m), seed).unwrap();
            randomize(&mut p, seed + 7);
            let report = finite_diff_check(&bags, &p, alpha, 1e-5).unwrap();
            assert!(report.max_rel_error() < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn msa_and_mean_pool_gradients() {
        let bags = [random_bag(5, 4, 2, 61)];
        let mut cfg = config(4, 6);
        cfg.attention = AttentionKind::Msa;
        cfg.aggregation = Aggregation::MeanPool;
        let mut p = ModelParams::init(&cfg, 1).unwrap();
        randomize(&mut p, 2);
        let report = finite_diff_check(&bags, &p, 0.01, 1e-5).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
        let (_, g) = backward_gradients(&bags, &p, 0.01).unwrap();
        assert!(g.filter.iter().all(|&v| v == 0.0));
        assert!(g.agg_logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_toy_loss_checks_exactly() {
        let p = ModelParams::init(&config(3, 2), 1).unwrap();
        let mut coef = Gradients::zeros_like(&p);
        let mut rng = SplitMix64::new(1);
        coef.wq.mapv_inplace(|_| rng.next_normal());
        coef.cls_w.mapv_inplace(|_| rng.next_normal());
        coef.filter = vec![0.5, -1.5, 2.0];
        let c = coef.clone();
        let report = central_difference_report(&p, &coef, 1e-3, |q| {
            q.tensors()
                .iter()
                .zip(c.tensors().iter())
                .map(|((_, x), (_, k))| x.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        });
        assert!(report.max_rel_error() < 1e-10, "{report:?}");
    }

    #[test]
    fn large_step_degrades_the_check() {
        let bags = [random_bag(4, 4, 1, 70)];
        let mut p = ModelParams::init(&config(4, 4), 3).unwrap();
        randomize(&mut p, 4);
        let fine = finite_diff_check(&bags, &p, 0.01, 1e-5).unwrap().max_rel_error();
        let coarse = finite_diff_check(&bags, &p, 0.01, 1e-1).unwrap().max_rel_error();
        assert!(coarse > fine * 10.0, "coarse {coarse} fine {fine}");
        assert!(finite_diff_check(&bags, &p, 0.01, 0.0).is_err());
    }

    #[test]
    fn identity_init_is_uniform_msa() {
        let bag = random_bag(4, 5, 0, 2);
        let mut cfg = config(5, 4);
        cfg.lambda = 0.0;
        let p = ModelParams::init(&cfg, 7).unwrap();
        assert_eq!(p.glat.filter, FilterParams::identity(2).unwrap());
        let fwd = forward_sample(&bag, &p).unwrap();
        assert!(fwd.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
        assert!(fwd.probs.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let msa = crate::attention::msa_baseline(bag.nodes.embeddings.view(), &p.glat).unwrap();
        assert!(max_abs_diff(fwd.cache.h.view(), msa.h.view()) < 1e-12);
    }

    #[test]
    fn too_many_patches_for_logits() {
        let bag = random_bag(5, 3, 0, 2);
        let p = ModelParams::init(&config(3, 4), 7).unwrap();
        assert!(matches!(forward_sample(&bag, &p), Err(GlatError::DimensionMismatch(_))));
    }

    proptest! {
        #[test]
        fn smoothness_identity_holds(seed in any::<u64>(), m in 1usize..9, dv in 1usize..5) {
            let bag = random_bag(m, 3, 0, seed);
            let mut rng = SplitMix64::new(seed ^ 1);
            let h = Array2::from_shape_simple_fn((m, dv), || rng.next_normal() * 3.0);
            let quad = 2.0 * h.t().dot(&bag.bundle.l).dot(&h).diag().sum();
            let s = smoothness_penalty(h.view(), bag.bundle.w.view()).unwrap();
            prop_assert!(s >= 0.0);
            prop_assert!((s - quad).abs() < 1e-10 * s.max(1.0));
        }
    }
}
