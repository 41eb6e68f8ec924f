//! Bag-of-patches slide classification with iterative top-M patch selection
//! and graph Laplacian attention.
//!
//! The pipeline, in order:
//!
//! 1. [`data`] ingests per-patch embedding tables.
//! 2. [`provider`] supplies the local feature extractor stand-in and the
//!    frozen scorer projections.
//! 3. [`irm`] scores patches with frozen self-attention and keeps the top `M`
//!    over `T` progressive subsets.
//! 4. [`graph`] builds the Gaussian similarity graph, its Laplacian and the
//!    polynomial spectral filter.
//! 5. [`attention`] runs graph Laplacian attention (or the plain MSA baseline).
//! 6. [`model`], [`optim`], [`train`] and [`metrics`] cover aggregation, the
//!    classification head, analytic gradients, Adam and evaluation.
//! 7. [`synth`], [`heatmap`], [`config`], [`checkpoint`], [`pipeline`] and
//!    [`commands`] back the `glat` command-line tool.

pub mod attention;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod heatmap;
pub mod irm;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod provider;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{GlatError, Result};

/// Number of grade classes (normal, grade 3, grade 4, grade 5).
pub const NUM_CLASSES: usize = 4;
