//! Dense cross-attention: every query token of one view attends over every
//! token of all other views. Quadratic in `h·w`; used as the correctness
//! reference and the benchmark baseline.

use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::block::QkvWeights;

fn project<T: Scalar>(tokens: &[T], c: usize, w: &Tensor<T>) -> Vec<T> {
    let wd = w.data();
    let n = tokens.len() / c;
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let x = &tokens[i * c..(i + 1) * c];
        let y = &mut out[i * c..(i + 1) * c];
        for (d, &xd) in x.iter().enumerate() {
            let row = &wd[d * c..(d + 1) * c];
            for (ye, &we) in y.iter_mut().zip(row) {
                *ye = *ye + xd * we;
            }
        }
    }
    out
}

/// `x_s: [h, w, c]` attends over `x_m: [n_views, h', w', c]`; returns `[h, w, c]`.
pub fn dense_cross_attention_oracle<T: Scalar>(
    x_s: &Tensor<T>,
    x_m: &Tensor<T>,
    qkv: &QkvWeights<Tensor<T>>,
) -> Result<Tensor<T>> {
    if x_s.rank() != 3 || x_m.rank() != 4 || x_s.shape()[2] != x_m.shape()[3] {
        return Err(Error::Dimension(format!(
            "dense oracle expects [h, w, c] and [views, h, w, c], got {:?} and {:?}",
            x_s.shape(),
            x_m.shape()
        )));
    }
    let c = x_s.shape()[2];
    for w in [&qkv.wq, &qkv.wk, &qkv.wv] {
        if w.shape() != [c, c] {
            return Err(Error::Dimension(format!("projection must be [{c}, {c}]")));
        }
    }
    let q = project(x_s.data(), c, &qkv.wq);
    let k = project(x_m.data(), c, &qkv.wk);
    let v = project(x_m.data(), c, &qkv.wv);
    let n_keys = k.len() / c;
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut logits = vec![T::zero(); n_keys];
    for (qi, y) in q.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mut max = T::neg_infinity();
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(qi, &k[j * c..(j + 1) * c]) * scale;
            max = max.max(*l);
        }
        let mut total = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total = total + *l;
        }
        let inv = T::one() / total;
        for (j, &p) in logits.iter().enumerate() {
            let wgt = p * inv;
            for (ye, &ve) in y.iter_mut().zip(&v[j * c..(j + 1) * c]) {
                *ye = *ye + wgt * ve;
            }
        }
    }
    Tensor::new(x_s.shape().to_vec(), out)
}

/// Dense oracle for every view of `x: [v, h, w, c]`, stacked in view order.
pub fn dense_cross_attention_all<T: Scalar>(x: &Tensor<T>, qkv: &QkvWeights<Tensor<T>>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape()[0] < 2 {
        return Err(Error::Dimension(format!(
            "dense oracle expects [v>=2, h, w, c], got {:?}",
            x.shape()
        )));
    }
    let (v, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut outs = Vec::with_capacity(v);
    for j in 0..v {
        let single = x.slice(0, j, 1)?.into_reshape(vec![h, w, c])?;
        let mut parts = Vec::new();
        if j > 0 {
            parts.push(x.slice(0, 0, j)?);
        }
        if j + 1 < v {
            parts.push(x.slice(0, j + 1, v - j - 1)?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let others = Tensor::concat(&refs, 0)?;
        outs.push(dense_cross_attention_oracle(&single, &others, qkv)?.into_reshape(vec![1, h, w, c])?);
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    Tensor::concat(&refs, 0)
}
