//! Small dense helpers shared by the attention, graph and head code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Numerically stable softmax of a vector (max subtraction).
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    softmax(ArrayView1::from(logits)).to_vec()
}

/// Row-wise stable softmax.
pub fn row_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let s = softmax(row.view());
        row.assign(&s);
    }
    out
}

/// Backward through a row softmax: given `a = row_softmax(s)` and `da`,
/// returns `ds` with `ds_ij = a_ij (da_ij - sum_k a_ik da_ik)`.
pub fn row_softmax_backward(a: ArrayView2<f64>, da: ArrayView2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(a.raw_dim());
    for ((a_row, da_row), mut ds_row) in a
        .axis_iter(Axis(0))
        .zip(da.axis_iter(Axis(0)))
        .zip(ds.axis_iter_mut(Axis(0)))
    {
        let inner = a_row.dot(&da_row);
        for ((d, &ai), &dai) in ds_row.iter_mut().zip(a_row.iter()).zip(da_row.iter()) {
            *d = ai * (dai - inner);
        }
    }
    ds
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

pub fn identity(n: usize) -> Array2<f64> {
    Array2::eye(n)
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
