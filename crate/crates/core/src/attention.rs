//! Graph Laplacian attention and the plain single-head MSA baseline.
//!
//! ```text
//! Q, K, V    = E Wq, E Wk, E Wv
//! Q', K', V' = L_θ Q, L_θ K, L_θ V
//! A'         = softmax((Q' K'ᵀ + λ B) / √d_k)     B ∈ {L, -L, W}
//! H          = A' V'
//! ```

use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{GlatError, Result};
use crate::graph::{apply_filter, filter_from_powers, laplacian_powers, FilterParams, LaplacianBundle};
use crate::linalg::row_softmax;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphBias {
    /// `+λL`, the literal form: similar patches are pushed apart.
    #[default]
    Laplacian,
    /// `-λL`.
    NegativeLaplacian,
    /// `+λW`.
    Adjacency,
}

impl FromStr for GraphBias {
    type Err = GlatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplacian" => Ok(Self::Laplacian),
            "negative-laplacian" => Ok(Self::NegativeLaplacian),
            "adjacency" => Ok(Self::Adjacency),
            other => Err(GlatError::Config(format!("unknown graph bias {other:?}"))),
        }
    }
}

impl GraphBias {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Laplacian => "laplacian",
            Self::NegativeLaplacian => "negative-laplacian",
            Self::Adjacency => "adjacency",
        }
    }

    pub fn matrix(self, bundle: &LaplacianBundle) -> Array2<f64> {
        match self {
            Self::Laplacian => bundle.l.clone(),
            Self::NegativeLaplacian => -&bundle.l,
            Self::Adjacency => bundle.w.clone(),
        }
    }
}

/// Which attention the layer runs; `Msa` ignores the filter and graph bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionKind {
    #[default]
    Gla,
    Msa,
}

impl FromStr for AttentionKind {
    type Err = GlatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gla" => Ok(Self::Gla),
            "msa" => Ok(Self::Msa),
            other => Err(GlatError::Config(format!("unknown attention kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlatLayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub filter: FilterParams,
    pub lambda: f64,
    pub graph_bias: GraphBias,
    pub kind: AttentionKind,
}

impl GlatLayerParams {
    /// Projections drawn `N(0, 1/d)`, identity filter.
    pub fn init(
        d: usize,
        d_k: usize,
        d_v: usize,
        filter_order: usize,
        lambda: f64,
        graph_bias: GraphBias,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if d == 0 || d_k == 0 || d_v == 0 {
            return Err(GlatError::invalid("attention dimensions must be >= 1"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(GlatError::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut draw = |rows, cols| Array2::from_shape_simple_fn((rows, cols), || rng.next_normal() * scale);
        let wq = draw(d, d_k);
        let wk = draw(d, d_k);
        let wv = draw(d, d_v);
        Ok(Self {
            wq,
            wk,
            wv,
            filter: FilterParams::identity(filter_order)?,
            lambda,
            graph_bias,
            kind: AttentionKind::Gla,
        })
    }

    pub fn d(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.wq.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.wv.ncols()
    }

    fn check_input(&self, e: ArrayView2<f64>) -> Result<()> {
        if e.nrows() == 0 {
            return Err(GlatError::invalid("attention input has no rows"));
        }
        if e.ncols() != self.d() || self.wk.nrows() != self.d() || self.wv.nrows() != self.d() {
            return Err(GlatError::dims(format!(
                "input width {} does not match projection input dim {}",
                e.ncols(),
                self.d()
            )));
        }
        if self.wk.ncols() != self.d_k() {
            return Err(GlatError::dims("Wq and Wk widths differ"));
        }
        Ok(())
    }
}

/// Embeddings of the selected patches with their ids (row order).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub ids: Vec<u64>,
    pub embeddings: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub attention: Array2<f64>,
    pub h: Array2<f64>,
}

/// Every intermediate of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub qf: Array2<f64>,
    pub kf: Array2<f64>,
    pub vf: Array2<f64>,
    /// `[I, L, …, L^K]`; only `[I]` for MSA.
    pub powers: Vec<Array2<f64>>,
    pub filter: Array2<f64>,
    pub attention: Array2<f64>,
    pub h: Array2<f64>,
}

impl AttentionCache {
    pub fn output(&self) -> AttentionOutput {
        AttentionOutput {
            attention: self.attention.clone(),
            h: self.h.clone(),
        }
    }
}

fn scaled_attention(
    qf: &Array2<f64>,
    kf: &Array2<f64>,
    bias: Option<(f64, Array2<f64>)>,
    d_k: usize,
) -> Array2<f64> {
    let mut logits = qf.dot(&kf.t());
    if let Some((lambda, b)) = bias {
        logits.scaled_add(lambda, &b);
    }
    logits /= (d_k as f64).sqrt();
    row_softmax(logits.view())
}

/// Forward pass honouring `params.kind`; `bundle` is required for GLA.
pub fn attention_forward(
    nodes: &NodeFeatures,
    bundle: Option<&LaplacianBundle>,
    params: &GlatLayerParams,
) -> Result<AttentionCache> {
    let e = nodes.embeddings.view();
    params.check_input(e)?;
    if nodes.ids.len() != e.nrows() {
        return Err(GlatError::dims("node ids and embedding rows differ"));
    }
    let q = e.dot(&params.wq);
    let k = e.dot(&params.wk);
    let v = e.dot(&params.wv);
    match params.kind {
        AttentionKind::Msa => {
            let attention = scaled_attention(&q, &k, None, params.d_k());
            let h = attention.dot(&v);
            Ok(AttentionCache {
                qf: q.clone(),
                kf: k.clone(),
                vf: v.clone(),
                powers: vec![Array2::eye(e.nrows())],
                filter: Array2::eye(e.nrows()),
                q,
                k,
                v,
                attention,
                h,
            })
        }
        AttentionKind::Gla => {
            let bundle = bundle.ok_or_else(|| GlatError::invalid("graph attention needs a Laplacian bundle"))?;
            if bundle.node_ids != nodes.ids {
                return Err(GlatError::dims("bundle node order differs from the attention input"));
            }
            let powers = laplacian_powers(bundle.l.view(), params.filter.order());
            let filter = filter_from_powers(&params.filter, &powers);
            let (qf, kf, vf) = apply_filter(filter.view(), q.view(), k.view(), v.view())?;
            let bias = (params.lambda, params.graph_bias.matrix(bundle));
            let attention = scaled_attention(&qf, &kf, Some(bias), params.d_k());
            let h = attention.dot(&vf);
            Ok(AttentionCache {
                q,
                k,
                v,
                qf,
                kf,
                vf,
                powers,
                filter,
                attention,
                h,
            })
        }
    }
}

/// Graph Laplacian attention, regardless of `params.kind`.
pub fn gla_attention(
    nodes: &NodeFeatures,
    bundle: &LaplacianBundle,
    params: &GlatLayerParams,
) -> Result<AttentionOutput> {
    let params = GlatLayerParams {
        kind: AttentionKind::Gla,
        ..params.clone()
    };
    Ok(attention_forward(nodes, Some(bundle), &params)?.output())
}

/// Standard scaled dot-product attention with the same projections.
pub fn msa_baseline(e_sel: ArrayView2<f64>, params: &GlatLayerParams) -> Result<AttentionOutput> {
    params.check_input(e_sel)?;
    let q = e_sel.dot(&params.wq);
    let k = e_sel.dot(&params.wk);
    let v = e_sel.dot(&params.wv);
    let attention = scaled_attention(&q, &k, None, params.d_k());
    let h = attention.dot(&v);
    Ok(AttentionOutput { attention, h })
}

/// Mean attention each node receives (column mean), used for heatmaps.
pub fn attention_received(attention: ArrayView2<f64>) -> Vec<f64> {
    let m = attention.nrows() as f64;
    attention.sum_axis(ndarray::Axis(0)).mapv(|s| s / m).to_vec()
}
