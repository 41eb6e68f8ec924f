//! Gaussian similarity graph over selected patches, its combinatorial
//! Laplacian, and the polynomial spectral filter `L_θ = Σ c_k L^k`.

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{GlatError, Result};

/// Highest supported filter order.
pub const MAX_FILTER_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Sigma {
    /// Median of the nonzero pairwise distances (1 when all are zero).
    #[default]
    Median,
    Fixed(f64),
}

impl FromStr for Sigma {
    type Err = GlatError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(Sigma::Median);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Sigma::Fixed(v)),
            _ => Err(GlatError::Config(format!("sigma must be `median` or a positive number, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianBundle {
    pub w: Array2<f64>,
    /// Diagonal of the degree matrix.
    pub degree: Array1<f64>,
    pub l: Array2<f64>,
    pub sigma: f64,
    pub node_ids: Vec<u64>,
}

impl LaplacianBundle {
    pub fn build(embeddings: ArrayView2<f64>, node_ids: &[u64], sigma: Sigma) -> Result<Self> {
        if embeddings.nrows() != node_ids.len() {
            return Err(GlatError::dims(format!(
                "{} embedding rows for {} node ids",
                embeddings.nrows(),
                node_ids.len()
            )));
        }
        let (w, sigma) = adjacency_gaussian(embeddings, sigma)?;
        let (degree, l) = laplacian(w.view())?;
        Ok(Self {
            w,
            degree,
            l,
            sigma,
            node_ids: node_ids.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn degree_matrix(&self) -> Array2<f64> {
        Array2::from_diag(&self.degree)
    }
}

fn pairwise_sq_distances(e: ArrayView2<f64>) -> Array2<f64> {
    let m = e.nrows();
    let mut d2 = Array2::zeros((m, m));
    for i in 0..m {
        for j in i + 1..m {
            let s: f64 = e
                .row(i)
                .iter()
                .zip(e.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[[i, j]] = s;
            d2[[j, i]] = s;
        }
    }
    d2
}

/// Median of the nonzero distances among unordered pairs; 1 if none.
pub fn median_sigma(sq_distances: ArrayView2<f64>) -> f64 {
    let m = sq_distances.nrows();
    let mut dists: Vec<f64> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .map(|(i, j)| sq_distances[[i, j]].sqrt())
        .filter(|&d| d > 0.0)
        .collect();
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    }
}

/// `W_ij = exp(-‖E_i - E_j‖² / 2σ²)`; returns `W` and the resolved σ.
pub fn adjacency_gaussian(embeddings: ArrayView2<f64>, sigma: Sigma) -> Result<(Array2<f64>, f64)> {
    if embeddings.nrows() == 0 {
        return Err(GlatError::invalid("adjacency needs at least one node"));
    }
    if !embeddings.iter().all(|v| v.is_finite()) {
        return Err(GlatError::invalid("non-finite embeddings in adjacency"));
    }
    let d2 = pairwise_sq_distances(embeddings);
    let sigma = match sigma {
        Sigma::Median => median_sigma(d2.view()),
        Sigma::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Sigma::Fixed(s) => return Err(GlatError::invalid(format!("sigma must be positive, got {s}"))),
    };
    let denom = 2.0 * sigma * sigma;
    Ok((d2.mapv(|v| (-v / denom).exp()), sigma))
}

/// Degree vector and `L = D - W`.
pub fn laplacian(w: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let m = w.nrows();
    if w.ncols() != m {
        return Err(GlatError::dims("adjacency must be square"));
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(GlatError::invalid("non-finite adjacency"));
    }
    for i in 0..m {
        for j in i + 1..m {
            if (w[[i, j]] - w[[j, i]]).abs() > 1e-12 {
                return Err(GlatError::invalid(format!("adjacency asymmetric at ({i}, {j})")));
            }
        }
    }
    let degree = w.sum_axis(Axis(1));
    let mut l = -w.to_owned();
    for i in 0..m {
        l[[i, i]] += degree[i];
    }
    Ok((degree, l))
}

/// Coefficients `c_0..c_K` of the Laplacian polynomial filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    pub coeffs: Vec<f64>,
}

impl FilterParams {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() || coeffs.len() > MAX_FILTER_ORDER + 1 {
            return Err(GlatError::invalid(format!(
                "filter needs 1..={} coefficients, got {}",
                MAX_FILTER_ORDER + 1,
                coeffs.len()
            )));
        }
        if !coeffs.iter().all(|c| c.is_finite()) {
            return Err(GlatError::invalid("non-finite filter coefficient"));
        }
        Ok(Self { coeffs })
    }

    /// `c_0 = 1`, higher terms zero: the filter is the identity.
    pub fn identity(order: usize) -> Result<Self> {
        let mut coeffs = vec![0.0; order + 1];
        coeffs[0] = 1.0;
        Self::new(coeffs)
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }
}

/// `[I, L, L², …, L^k]` by repeated multiplication.
pub fn laplacian_powers(l: ArrayView2<f64>, k: usize) -> Vec<Array2<f64>> {
    let mut powers = Vec::with_capacity(k + 1);
    powers.push(Array2::eye(l.nrows()));
    for p in 1..=k {
        let next = if p == 1 { l.to_owned() } else { powers[p - 1].dot(&l) };
        powers.push(next);
    }
    powers
}

pub fn filter_from_powers(params: &FilterParams, powers: &[Array2<f64>]) -> Array2<f64> {
    let mut out = Array2::zeros(powers[0].raw_dim());
    for (c, p) in params.coeffs.iter().zip(powers) {
        out.scaled_add(*c, p);
    }
    out
}

pub fn filter_matrix(params: &FilterParams, l: ArrayView2<f64>) -> Array2<f64> {
    filter_from_powers(params, &laplacian_powers(l, params.order()))
}

/// Left-multiplies queries, keys and values by the filter.
pub fn apply_filter(
    filter: ArrayView2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let m = filter.nrows();
    if filter.ncols() != m || q.nrows() != m || k.nrows() != m || v.nrows() != m {
        return Err(GlatError::dims(format!(
            "filter is {}×{} but Q/K/V have {}/{}/{} rows",
            filter.nrows(),
            filter.ncols(),
            q.nrows(),
            k.nrows(),
            v.nrows()
        )));
    }
    if q.ncols() != k.ncols() {
        return Err(GlatError::dims("queries and keys differ in width"));
    }
    Ok((filter.dot(&q), filter.dot(&k), filter.dot(&v)))
}
