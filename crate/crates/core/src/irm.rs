//! Frozen-attention importance scoring and progressive top-M selection.
//!
//! Patch ids are shuffled with a seeded stream and cut into `T` contiguous
//! subsets (the first `T-1` of size `⌊N/T⌋`, the last takes the remainder).
//! Iteration 0 scores subset 0; iteration `t > 0` scores the previously
//! selected patches together with subset `t`. Each pass keeps the `M` best
//! scored patches, ties going to the smaller id.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};

use crate::data::EmbeddingTable;
use crate::error::{GlatError, Result};
use crate::linalg::row_softmax;
use crate::provider::FrozenProjections;
use crate::rng::SplitMix64;

/// Row-stochastic attention over a pool of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub matrix: Array2<f64>,
    pub pool_ids: Vec<u64>,
}

impl AttentionMap {
    pub fn len(&self) -> usize {
        self.pool_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// Mean attention a patch receives (column mean).
    #[default]
    Received,
    /// Mean of the patch's own attention row; constant `1/P`.
    RowMean,
}

impl FromStr for ScoreMode {
    type Err = GlatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "received" => Ok(Self::Received),
            "row-mean" => Ok(Self::RowMean),
            other => Err(GlatError::Config(format!("unknown score mode {other:?}"))),
        }
    }
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Received => "received",
            Self::RowMean => "row-mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    /// Completed iterations.
    pub t: usize,
    pub selected_ids: Vec<u64>,
    /// Scores of `selected_ids` from the last pass, aligned by position.
    pub scores: ScoreVector,
    pub m: usize,
    pub total_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub t: usize,
    pub pool_ids: Vec<u64>,
    pub scores: ScoreVector,
    pub selected_ids: Vec<u64>,
    /// Refined pool embeddings `A·V`, rows aligned with `pool_ids`.
    pub refined: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrmOutcome {
    pub state: SelectionState,
    pub trace: Vec<IterationTrace>,
}

impl IrmOutcome {
    /// Score of every patch from the last pass it took part in.
    pub fn last_seen_scores(&self) -> Vec<(u64, f64)> {
        let mut latest = std::collections::BTreeMap::new();
        for it in &self.trace {
            for (&id, &s) in it.pool_ids.iter().zip(&it.scores.0) {
                latest.insert(id, s);
            }
        }
        latest.into_iter().collect()
    }
}

fn check_projection_dim(pool: &EmbeddingTable, proj: &FrozenProjections) -> Result<()> {
    if pool.d() != proj.d() {
        return Err(GlatError::dims(format!(
            "pool embeddings have d={} but projections expect d={}",
            pool.d(),
            proj.d()
        )));
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √d_k)` row-wise with `Q = E W_Q`, `K = E W_K`.
pub fn attention_matrix(pool: &EmbeddingTable, proj: &FrozenProjections) -> Result<AttentionMap> {
    if pool.is_empty() {
        return Err(GlatError::invalid("attention pool is empty"));
    }
    check_projection_dim(pool, proj)?;
    let e = pool.embedding_matrix();
    let q = e.dot(proj.w_q());
    let k = e.dot(proj.w_k());
    let logits = q.dot(&k.t()) / (proj.d_k() as f64).sqrt();
    Ok(AttentionMap {
        matrix: row_softmax(logits.view()),
        pool_ids: pool.ids(),
    })
}

/// `E' = A·(E W_V)`.
pub fn refine_embeddings(
    pool: &EmbeddingTable,
    attention: &AttentionMap,
    proj: &FrozenProjections,
) -> Result<Array2<f64>> {
    check_projection_dim(pool, proj)?;
    if attention.pool_ids != pool.ids() {
        return Err(GlatError::dims("attention map was built over a different pool"));
    }
    let v = pool.embedding_matrix().dot(proj.w_v());
    Ok(attention.matrix.dot(&v))
}

/// Scores are quantized to [`SCORE_DECIMALS`] decimal places so that
/// rounding noise in the softmax never decides a tie.
pub const SCORE_DECIMALS: i32 = 12;

pub fn quantize_score(s: f64) -> f64 {
    let scale = 10f64.powi(SCORE_DECIMALS);
    (s * scale).round() / scale
}

pub fn importance_scores(attention: &AttentionMap, mode: ScoreMode) -> ScoreVector {
    let p = attention.len() as f64;
    let axis = match mode {
        ScoreMode::Received => Axis(0),
        ScoreMode::RowMean => Axis(1),
    };
    ScoreVector(
        attention
            .matrix
            .sum_axis(axis)
            .iter()
            .map(|s| quantize_score(s / p))
            .collect(),
    )
}

/// Ids of the `min(m, P)` highest scores, ties to the smaller id, returned in
/// ascending id order.
pub fn select_top_m(scores: &[f64], pool_ids: &[u64], m: usize) -> Vec<u64> {
    let mut order: Vec<usize> = (0..pool_ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(pool_ids[a].cmp(&pool_ids[b]))
    });
    let mut out: Vec<u64> = order.into_iter().take(m).map(|i| pool_ids[i]).collect();
    out.sort_unstable();
    out
}

/// Seeded shuffle of `ids` cut into `t` contiguous subsets.
pub fn partition_subsets(ids: &[u64], t: usize, shuffle_seed: u64) -> Result<Vec<Vec<u64>>> {
    if t == 0 {
        return Err(GlatError::invalid("T must be >= 1"));
    }
    if t > ids.len() {
        return Err(GlatError::invalid(format!(
            "T={t} exceeds the {} available patches",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    SplitMix64::new(shuffle_seed).shuffle(&mut shuffled);
    let size = ids.len() / t;
    let mut subsets: Vec<Vec<u64>> = (0..t - 1)
        .map(|i| shuffled[i * size..(i + 1) * size].to_vec())
        .collect();
    subsets.push(shuffled[(t - 1) * size..].to_vec());
    Ok(subsets)
}

pub fn irm_run(
    table: &EmbeddingTable,
    proj: &FrozenProjections,
    m: usize,
    t: usize,
    shuffle_seed: u64,
    mode: ScoreMode,
) -> Result<IrmOutcome> {
    if table.is_empty() {
        return Err(GlatError::invalid("cannot select from an empty table"));
    }
    if m == 0 {
        return Err(GlatError::invalid("M must be >= 1"));
    }
    check_projection_dim(table, proj)?;
    let subsets = partition_subsets(&table.ids(), t, shuffle_seed)?;

    let mut selected: Vec<u64> = Vec::new();
    let mut trace = Vec::with_capacity(t);
    for (iteration, subset) in subsets.iter().enumerate() {
        let mut pool_ids: Vec<u64> = selected.iter().chain(subset).copied().collect();
        pool_ids.sort_unstable();
        let pool = table.restrict(&pool_ids)?;
        let attention = attention_matrix(&pool, proj)?;
        let refined = refine_embeddings(&pool, &attention, proj)?;
        let scores = importance_scores(&attention, mode);
        selected = select_top_m(&scores.0, &attention.pool_ids, m);
        trace.push(IterationTrace {
            t: iteration,
            pool_ids: attention.pool_ids,
            scores,
            selected_ids: selected.clone(),
            refined,
        });
    }

    let last = trace.last().expect("t >= 1");
    let final_scores = selected
        .iter()
        .map(|id| {
            let pos = last.pool_ids.binary_search(id).expect("selected ⊆ pool");
            last.scores.0[pos]
        })
        .collect();
    Ok(IrmOutcome {
        state: SelectionState {
            t,
            selected_ids: selected,
            scores: ScoreVector(final_scores),
            m,
            total_iterations: t,
        },
        trace,
    })
}

pub const TRACE_HEADER: &str = "t,pool_size,selected_ids";

/// One header line plus `t,pool_size,selected_ids...` per iteration.
pub fn format_trace(trace: &[IterationTrace]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for it in trace {
        let _ = write!(out, "{},{}", it.t, it.pool_ids.len());
        for id in &it.selected_ids {
            let _ = write!(out, ",{id}");
        }
        out.push('\n');
    }
    out
}

pub fn write_trace(trace: &[IterationTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_trace(trace)).map_err(|e| GlatError::io(path, e))
}
