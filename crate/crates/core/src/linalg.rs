//! Small dense helpers with a fixed summation order.
//!
//! Every reduction runs in ascending index order so results are bit-identical
//! regardless of how callers schedule work.

use ndarray::{Array1, Array2, ArrayView1};

pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub fn norm2(a: ArrayView1<'_, f64>) -> f64 {
    dot(a, a).sqrt()
}

/// `A x`.
pub fn matvec(a: &Array2<f64>, x: ArrayView1<'_, f64>) -> Array1<f64> {
    debug_assert_eq!(a.ncols(), x.len());
    Array1::from_iter(a.rows().into_iter().map(|row| dot(row, x)))
}

/// `A^T x`.
pub fn matvec_t(a: &Array2<f64>, x: ArrayView1<'_, f64>) -> Array1<f64> {
    debug_assert_eq!(a.nrows(), x.len());
    Array1::from_iter(a.columns().into_iter().map(|col| dot(col, x)))
}

/// `A B`.
pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension");
    let bt = b.t().to_owned();
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for (i, row) in a.rows().into_iter().enumerate() {
        for (j, col) in bt.rows().into_iter().enumerate() {
            out[[i, j]] = dot(row, col);
        }
    }
    out
}

/// `D^T D`.
pub fn gram(d: &Array2<f64>) -> Array2<f64> {
    let dt = d.t().to_owned();
    matmul(&dt, d)
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    for v in a.iter() {
        acc += v * v;
    }
    acc.sqrt()
}

pub fn max_abs(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_matches_hand_product() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(matmul(&a, &b), array![[2.0, 1.0], [4.0, 3.0]]);
        assert_eq!(gram(&a), array![[10.0, 14.0], [14.0, 20.0]]);
    }

    #[test]
    fn matvec_and_transpose() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(matvec(&a, array![1.0, 0.0, 1.0].view()), array![4.0, 10.0]);
        assert_eq!(matvec_t(&a, array![1.0, 1.0].view()), array![5.0, 7.0, 9.0]);
    }
}
