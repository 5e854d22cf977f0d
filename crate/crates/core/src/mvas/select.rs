use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dot products between single-view window descriptors (rows) and the
/// stacked multi-view window descriptors (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix<T> {
    /// `[a², (v-1)·a²]`
    pub values: Tensor<T>,
}

/// For each single-view window, the indices of its `k` best-correlated
/// multi-view windows, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKSelection {
    indices: Vec<usize>,
    rows: usize,
    k: usize,
}

impl TopKSelection {
    pub fn new(indices: Vec<usize>, rows: usize, k: usize) -> Result<Self> {
        if indices.len() != rows * k {
            return Err(Error::Dimension(format!(
                "selection of {rows}x{k} needs {} indices, got {}",
                rows * k,
                indices.len()
            )));
        }
        Ok(TopKSelection { indices, rows, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Row-major `[rows, k]` index matrix.
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

/// Per-window mean over tokens of projected queries and keys.
///
/// `q_s: [a², t, c]`, `k_m: [(v-1)·a², t, c]`.
pub fn window_descriptors<T: Scalar>(q_s: &Tensor<T>, k_m: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if q_s.rank() != 3 || k_m.rank() != 3 || q_s.shape()[1] == 0 {
        return Err(Error::Dimension(format!(
            "descriptors expect [windows, tokens>=1, c], got {:?} and {:?}",
            q_s.shape(),
            k_m.shape()
        )));
    }
    Ok((q_s.mean_dim(1)?, k_m.mean_dim(1)?))
}

/// `A_c = A_s · A_mᵀ`, unnormalized and unscaled.
pub fn correlation<T: Scalar>(a_s: &Tensor<T>, a_m: &Tensor<T>) -> Result<CorrelationMatrix<T>> {
    if a_s.rank() != 2 || a_m.rank() != 2 || a_s.shape()[1] != a_m.shape()[1] {
        return Err(Error::Dimension(format!(
            "correlation expects [n, c] x [m, c], got {:?} and {:?}",
            a_s.shape(),
            a_m.shape()
        )));
    }
    Ok(CorrelationMatrix {
        values: a_s.matmul(&a_m.transpose()?)?,
    })
}

/// Indices of the `k` largest entries per row: descending value, ties broken
/// by ascending index.
pub fn topk_indices<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<TopKSelection> {
    if scores.rank() != 2 {
        return Err(Error::Dimension(format!(
            "top-k expects a matrix, got {:?}",
            scores.shape()
        )));
    }
    let (rows, n) = (scores.shape()[0], scores.shape()[1]);
    if k == 0 || k > n {
        return Err(Error::Index(format!("top-k with k={k} over {n} candidates")));
    }
    let mut indices = Vec::with_capacity(rows * k);
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    for r in 0..rows {
        let row = &scores.data()[r * n..(r + 1) * n];
        let order = |&i: &usize, &j: &usize| {
            row[j]
                .partial_cmp(&row[i])
                .unwrap_or(Ordering::Equal)
                .then(i.cmp(&j))
        };
        idx.clear();
        idx.extend(0..n);
        if k < n {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_unstable_by(order);
        indices.extend_from_slice(&idx);
    }
    TopKSelection::new(indices, rows, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, v.len() / rows], v.to_vec()).unwrap()
    }

    #[test]
    fn ordering_and_tie_break() {
        let s = topk_indices(&m(1, &[0.9, 0.1, 0.5]), 2).unwrap();
        assert_eq!(s.row(0), &[0, 2]);
        let s = topk_indices(&m(1, &[0.5, 0.5, 0.1]), 1).unwrap();
        assert_eq!(s.row(0), &[0]);
        let s = topk_indices(&m(1, &[0.1, 0.5, 0.5, 0.5]), 3).unwrap();
        assert_eq!(s.row(0), &[1, 2, 3]);
        // signed zeros tie
        let s = topk_indices(&m(1, &[0.0, -0.0]), 2).unwrap();
        assert_eq!(s.row(0), &[0, 1]);
    }

    #[test]
    fn k_out_of_range() {
        let x = m(1, &[1.0, 2.0]);
        assert!(matches!(topk_indices(&x, 0), Err(Error::Index(_))));
        assert!(matches!(topk_indices(&x, 3), Err(Error::Index(_))));
    }

    #[test]
    fn descriptor_examples() {
        let single = Tensor::<f64>::from_fn(vec![3, 1, 2], |i| i as f64);
        let (a_s, _) = window_descriptors(&single, &single).unwrap();
        assert_eq!(a_s.data(), single.data());
        let two = Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap();
        let (a_s, _) = window_descriptors(&two, &two).unwrap();
        assert_eq!(a_s.data(), &[2.0]);
    }

    #[test]
    fn correlation_geometry() {
        // A_s row equal to A_m row 1, others orthogonal
        let a_s = m(1, &[0.0, 1.0, 0.0]);
        let a_m = m(3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let c = correlation(&a_s, &a_m).unwrap();
        assert_eq!(c.values.data(), &[0.0, 1.0, 0.0]);
        let z = correlation(&a_s, &Tensor::zeros(vec![3, 3])).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
        assert!(correlation(&a_s, &Tensor::zeros(vec![3, 2])).is_err());
    }
}
