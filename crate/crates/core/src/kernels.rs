//! Raw slice kernels shared by the eager tensor methods and the tape.

use crate::scalar::Scalar;

/// `c[m×p] += a[m×n] · b[n×p]`, row-major.
pub(crate) fn gemm_acc<T: Scalar>(m: usize, n: usize, p: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * p..(i + 1) * p];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

/// Transpose a row-major `rows×cols` matrix.
pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Split a shape around `dim` into (outer, extent, inner).
pub(crate) fn split_at_dim(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

/// Generic axis permutation: `out[i_0..i_r] = src[i_perm...]`, output axis `d`
/// is input axis `perm[d]`.
pub(crate) fn permute<T: Scalar>(shape: &[usize], perm: &[usize], src: &[T]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    if rank == 0 {
        out.push(src[0]);
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let last_extent = out_shape[last];
    let last_stride = src_strides[last];
    loop {
        for j in 0..last_extent {
            out.push(src[offset + j * last_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                return (out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Max-subtracted softmax over the middle axis of an (outer, d, inner) view.
pub(crate) fn softmax<T: Scalar>(src: &[T], outer: usize, d: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    if inner == 1 {
        for o in 0..outer {
            let row = &src[o * d..(o + 1) * d];
            let dst = &mut out[o * d..(o + 1) * d];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (y, &x) in dst.iter_mut().zip(row) {
                *y = (x - max).exp();
                sum = sum + *y;
            }
            let inv = T::one() / sum;
            for y in dst.iter_mut() {
                *y = *y * inv;
            }
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..d {
                max = max.max(src[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..d {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum = sum + e;
            }
            for j in 0..d {
                out[base + j * inner] = out[base + j * inner] / sum;
            }
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold one image `[c_in, h, w]` into `[c_in·kh·kw, h_out·w_out]`.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let n_cols = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, dv) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *dv = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image gradient.
pub(crate) fn col2im_acc<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let n_cols = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let p = iy as usize * g.w + ix as usize;
                        plane[p] = plane[p] + src[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `[c_out, c_in, kh, kw]`.
pub(crate) fn conv2d<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let out_plane = g.col_cols();
    let mut out = vec![T::zero(); g.batch * g.c_out * out_plane];
    let mut cols = vec![T::zero(); g.col_rows() * out_plane];
    let in_img = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &x[b * in_img..(b + 1) * in_img], &mut cols);
        let dst = &mut out[b * g.c_out * out_plane..(b + 1) * g.c_out * out_plane];
        if let Some(bias) = bias {
            for (co, plane) in dst.chunks_mut(out_plane).enumerate() {
                plane.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        gemm_acc(g.c_out, g.col_rows(), out_plane, weight, &cols, dst);
    }
    out
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s = s + a[i] * b[i];
    }
    acc.iter().fold(T::zero(), |t, &v| t + v) + s
}
