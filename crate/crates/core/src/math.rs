//! Numerics shared by the heads.

use ndarray::{Array2, ArrayView1, ArrayView2};

pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values
        .into_iter()
        .map(|v| (v - max).exp())
        .sum::<f64>()
        .ln()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over rows and its gradient with respect to the
/// logits, `(softmax - onehot) / rows`.
pub fn mean_cross_entropy(logits: ArrayView2<'_, f64>, gold: &[usize]) -> (f64, Array2<f64>) {
    let rows = logits.nrows();
    let mut grad = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, &y) in gold.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[y];
        let mut g = grad.row_mut(i);
        for (k, &v) in row.iter().enumerate() {
            g[k] = (v - lse).exp() / rows as f64;
        }
        g[y] -= 1.0 / rows as f64;
    }
    (loss / rows as f64, grad)
}
