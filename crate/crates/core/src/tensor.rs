//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a contiguous buffer. Gradient
//! participation (the `requires_grad` flag and the gradient buffer) lives on
//! the [`Tape`](crate::autograd::Tape) node that wraps a tensor.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements, buffer has {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of(z * std)
        })
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim >= self.rank() {
            return Err(dim_err!("dim {} out of range for rank {}", dim, self.rank()));
        }
        Ok(())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, self.rank())?;
        let (shape, data) = kernels::permute(&self.shape, perm, &self.data);
        Ok(Tensor { shape, data })
    }

    /// Contiguous range `[start, start+len)` along `dim`.
    pub fn slice(&self, dim: usize, start: usize, len: usize) -> Result<Self> {
        self.check_dim(dim)?;
        if start + len > self.shape[dim] {
            return Err(Error::Index(format!(
                "slice {}..{} exceeds extent {} on dim {}",
                start,
                start + len,
                self.shape[dim],
                dim
            )));
        }
        let (outer, d, inner) = kernels::split_at_dim(&self.shape, dim);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[dim] = len;
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Self], dim: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        first.check_dim(dim)?;
        for p in parts {
            if p.rank() != first.rank()
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != dim && a != b)
            {
                return Err(dim_err!(
                    "concat on dim {}: incompatible shapes {:?} and {:?}",
                    dim,
                    first.shape,
                    p.shape
                ));
            }
        }
        let outer: usize = first.shape[..dim].iter().product();
        let inner: usize = first.shape[dim + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[dim]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[dim] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[dim] = total;
        Ok(Tensor { shape, data })
    }

    /// Select entries `index` along `dim`; output extent on `dim` is `index.len()`.
    pub fn gather(&self, dim: usize, index: &[usize]) -> Result<Self> {
        self.check_dim(dim)?;
        let (outer, d, inner) = kernels::split_at_dim(&self.shape, dim);
        if let Some(&bad) = index.iter().find(|&&i| i >= d) {
            return Err(Error::Index(format!(
                "gather index {} out of bounds for extent {}",
                bad, d
            )));
        }
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * d + i) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[dim] = index.len();
        Ok(Tensor { shape, data })
    }

    /// Batched matrix product.
    ///
    /// Leading batch dims must either agree exactly or `other` must be a bare
    /// matrix shared by every batch entry.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); plan.batch * plan.m * plan.p];
        plan.run(&self.data, &other.data, &mut out);
        let mut shape = self.shape[..self.rank() - 1].to_vec();
        shape.push(plan.p);
        Ok(Tensor { shape, data: out })
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(dim_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(self.rank() - 2, self.rank() - 1);
        self.permute(&perm)
    }

    pub fn softmax(&self, dim: usize) -> Result<Self> {
        self.check_dim(dim)?;
        let (o, d, i) = kernels::split_at_dim(&self.shape, dim);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: kernels::softmax(&self.data, o, d, i),
        })
    }

    /// Mean over `dim`, removing it.
    pub fn mean_dim(&self, dim: usize) -> Result<Self> {
        self.check_dim(dim)?;
        let (outer, d, inner) = kernels::split_at_dim(&self.shape, dim);
        let scale = T::one() / T::of(d as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let src = &self.data[(o * d + j) * inner..(o * d + j + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v = *v * scale);
        let mut shape = self.shape.clone();
        shape.remove(dim);
        Ok(Tensor { shape, data })
    }

    /// Nearest-neighbour upsampling of the last two axes by `factor`.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        if self.rank() < 2 || factor == 0 {
            return Err(dim_err!("upsample needs rank >= 2 and factor >= 1"));
        }
        let r = self.rank();
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let planes = self.numel() / (h * w).max(1);
        let (ho, wo) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &self.data[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for x in 0..wo {
                    data.push(row[x / factor]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(dim_err!("permutation {:?} does not match rank {}", perm, rank));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(dim_err!("invalid permutation {:?}", perm));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Resolved geometry of a batched matmul.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub n: usize,
    pub p: usize,
    /// `true` when the right operand is one matrix shared across the batch.
    pub shared_rhs: bool,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(dim_err!("matmul needs rank >= 2, got {:?} x {:?}", a, b));
        }
        let (m, n) = (a[a.len() - 2], a[a.len() - 1]);
        let (n2, p) = (b[b.len() - 2], b[b.len() - 1]);
        if n != n2 {
            return Err(dim_err!("matmul inner extents differ: {:?} x {:?}", a, b));
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let shared_rhs = b_batch.is_empty();
        if !shared_rhs && a_batch != b_batch {
            return Err(dim_err!("matmul batch extents differ: {:?} x {:?}", a, b));
        }
        Ok(MatmulPlan {
            batch: a_batch.iter().product(),
            m,
            n,
            p,
            shared_rhs,
        })
    }

    pub fn run<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, n, p) = (self.m, self.n, self.p);
        if self.shared_rhs {
            // one tall product
            kernels::gemm_acc(self.batch * m, n, p, a, b, out);
            return;
        }
        for bi in 0..self.batch {
            kernels::gemm_acc(
                m,
                n,
                p,
                &a[bi * m * n..(bi + 1) * m * n],
                &b[bi * n * p..(bi + 1) * n * p],
                &mut out[bi * m * p..(bi + 1) * m * p],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn matmul_identity_and_row_selector() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul(&m).unwrap(), m);
        let sel = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(sel.matmul(&b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
        let a = Tensor::<f64>::zeros(vec![2, 2, 3]);
        let b = Tensor::<f64>::zeros(vec![3, 3, 1]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn gather_mean_upsample_examples() {
        let x = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(x.gather(0, &[2, 0]).unwrap().data(), &[30.0, 10.0]);
        assert!(matches!(x.gather(0, &[3]), Err(Error::Index(_))));
        let m = t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(m.mean_dim(1).unwrap().data(), &[2.0, 6.0]);
        let one = t(&[1, 1], &[1.0]);
        let up = one.upsample_nearest(2).unwrap();
        assert_eq!(up.shape(), &[2, 2]);
        assert_eq!(up.data(), &[1.0; 4]);
    }

    #[test]
    fn softmax_examples() {
        let z = t(&[3], &[0.0, 0.0, 0.0]).softmax(0).unwrap();
        for v in z.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t(&[2], &[1000.0, 0.0]).softmax(0).unwrap();
        assert!(big.all_finite());
        assert_eq!(big.data()[0], 1.0);
        assert!(big.data()[1] < 1e-300);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let x = Tensor::<f64>::from_fn(vec![2, 5, 3], |i| i as f64);
        let a = x.slice(1, 0, 2).unwrap();
        let b = x.slice(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
        assert!(matches!(x.slice(1, 4, 2), Err(Error::Index(_))));
    }
}
