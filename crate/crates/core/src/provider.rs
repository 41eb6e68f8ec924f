//! Deterministic stand-ins for the pretrained local extractor and the frozen
//! scorer projections.

use std::str::FromStr;

use ndarray::Array2;

use crate::data::EmbeddingTable;
use crate::error::{GlatError, Result};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    /// Ingested vectors are already embeddings.
    Passthrough,
    /// `E·R` for a seeded Gaussian matrix `R` (d×out_dim) scaled by `1/√d`.
    RandomProjection,
}

impl FromStr for ProviderKind {
    type Err = GlatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passthrough" => Ok(Self::Passthrough),
            "random-projection" => Ok(Self::RandomProjection),
            other => Err(GlatError::Config(format!("unknown provider kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureProviderSpec {
    pub kind: ProviderKind,
    pub seed: u64,
    pub out_dim: usize,
}

/// Seeded `rows × cols` matrix with i.i.d. `N(0, 1) * scale` entries, filled
/// row-major from one [`SplitMix64`] stream.
pub fn gaussian_matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut rng = SplitMix64::new(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.next_normal() * scale)
}

pub fn random_projection_matrix(seed: u64, d: usize, out_dim: usize) -> Array2<f64> {
    gaussian_matrix(seed, d, out_dim, 1.0 / (d as f64).sqrt())
}

pub fn local_extract(spec: &FeatureProviderSpec, table: &EmbeddingTable) -> Result<EmbeddingTable> {
    match spec.kind {
        ProviderKind::Passthrough => Ok(table.clone()),
        ProviderKind::RandomProjection => {
            if spec.out_dim == 0 {
                return Err(GlatError::invalid("provider out_dim must be >= 1"));
            }
            let r = random_projection_matrix(spec.seed, table.d(), spec.out_dim);
            let projected = table.embedding_matrix().dot(&r);
            table.with_embeddings(&projected)
        }
    }
}

/// Frozen query/key/value projections of the importance scorer.
///
/// Entries are `N(0, 1/d)`. The query and key projections are one shared
/// matrix, which makes the scorer's similarity `E W_Q W_Kᵀ Eᵀ` positive
/// semidefinite: every patch attends most strongly to patches like itself.
/// The value projection comes from an independent stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenProjections {
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    seed: u64,
}

impl FrozenProjections {
    pub fn w_q(&self) -> &Array2<f64> {
        &self.w_q
    }

    pub fn w_k(&self) -> &Array2<f64> {
        &self.w_k
    }

    pub fn w_v(&self) -> &Array2<f64> {
        &self.w_v
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.ncols()
    }
}

pub fn make_frozen_projections(seed: u64, d: usize, d_k: usize, d_v: usize) -> Result<FrozenProjections> {
    if d == 0 || d_k == 0 || d_v == 0 {
        return Err(GlatError::invalid("projection dimensions must be >= 1"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let w_q = gaussian_matrix(derive_seed(seed, 0), d, d_k, scale);
    let w_v = gaussian_matrix(derive_seed(seed, 2), d, d_v, scale);
    Ok(FrozenProjections {
        w_k: w_q.clone(),
        w_q,
        w_v,
        seed,
    })
}
