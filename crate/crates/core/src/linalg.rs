//! Small dense helpers shared by pooling, the heads and the losses.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};

/// Row-wise l2 normalization. Returns the normalized rows and the row norms.
pub fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut y = x.to_owned();
    for (mut row, &n) in y.rows_mut().into_iter().zip(norms.iter()) {
        row /= n;
    }
    (y, norms)
}

/// Pulls a gradient on `y = x / |x|` back to `x`:
/// `dx = (dy - y <y, dy>) / |x|`.
pub fn normalize_backward_row(y: ArrayView1<f64>, norm: f64, dy: ArrayView1<f64>, mut dx: ArrayViewMut1<f64>) {
    let proj = y.dot(&dy);
    for ((d, &yi), &gi) in dx.iter_mut().zip(y.iter()).zip(dy.iter()) {
        *d = (gi - yi * proj) / norm;
    }
}

pub fn normalize_rows_backward(y: ArrayView2<f64>, norms: ArrayView1<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.raw_dim());
    for (i, row) in dx.rows_mut().into_iter().enumerate() {
        normalize_backward_row(y.row(i), norms[i], dy.row(i), row);
    }
    dx
}

/// Stable `log(sum(exp(x)))` over the entries yielded by `values`.
pub fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
