//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly, appends a node to the [`Tape`] and returns a
//! [`Var`] handle. [`Tape::backward`] walks the nodes in exact reverse
//! execution order. Nodes that do not depend on any `requires_grad` leaf
//! never receive a gradient buffer.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{check_perm, MatmulPlan, Tensor};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower clamp on vector norms inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

const GELU_COEFF: f64 = 0.044715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddSuffix(Var, Var),
    Relu(Var),
    Gelu(Var),
    MatMul(Var, Var, MatmulPlan),
    Softmax {
        x: Var,
        dim: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dim: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MeanDim {
        x: Var,
        dim: usize,
    },
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        dim: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        dim: usize,
        start: usize,
    },
    Gather {
        x: Var,
        dim: usize,
        index: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Cosine {
        a: Var,
        b: Var,
        dim: usize,
    },
    Mse {
        a: Var,
        b: Var,
        denom: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed ops.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf that accumulates a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    /// Clear gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), f)
            .map_err(|e| dim_err!("{}: {}", name, e))?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), rg, "scale")
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias / positional add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err!("add_broadcast: {:?} is not a suffix of {:?}", sb, sa));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(nb) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                *x = *x + y;
            }
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::AddSuffix(a, b), rg, "add_broadcast")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (k, c) = (T::of(GELU_SCALE), T::of(GELU_COEFF));
        let half = T::of(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), rg, "gelu")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b, plan), rg, "matmul")
    }

    pub fn softmax(&mut self, x: Var, dim: usize) -> Result<Var> {
        let value = self.value(x).softmax(dim)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax { x, dim }, rg, "softmax")
    }

    /// Normalize each slice along `dim` to zero mean and unit variance
    /// (biased estimator, eps = [`LAYER_NORM_EPS`]), then apply `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, dim: usize, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.check_dim(dim)?;
        let (outer, d, inner) = kernels::split_at_dim(xv.shape(), dim);
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(dim_err!("layer_norm: gamma/beta must have shape [{}]", d));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let src = xv.data();
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * d + j) * inner + i;
                let mean = (0..d).map(|j| src[at(j)]).sum::<T>() * inv_d;
                let var = (0..d)
                    .map(|j| (src[at(j)] - mean) * (src[at(j)] - mean))
                    .sum::<T>()
                    * inv_d;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..d {
                    let xh = (src[at(j)] - mean) * is;
                    xhat[at(j)] = xh;
                    out[at(j)] = xh * g[j] + bt[j];
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Cross-correlation of `x: [b, c_in, h, w]` with `weight: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err!("conv2d: expected rank-4 input and weight, got {:?}, {:?}", xs, ws));
        }
        if !(1..=2).contains(&stride) {
            return Err(dim_err!("conv2d: stride must be 1 or 2, got {}", stride));
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc_in != c_in {
            return Err(dim_err!("conv2d: weight expects {} input channels, got {}", wc_in, c_in));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(dim_err!("conv2d: kernel {}x{} does not fit {}x{} with pad {}", kh, kw, h, w, pad));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(dim_err!("conv2d: bias must have shape [{}]", c_out));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![batch, c_out, geom.h_out, geom.w_out], out)?;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        self.push(value, Op::Conv2d { x, w: weight, b: bias, geom }, rg, "conv2d")
    }

    pub fn mean_dim(&mut self, x: Var, dim: usize) -> Result<Var> {
        let value = self.value(x).mean_dim(dim)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::MeanDim { x, dim }, rg, "mean")
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg, "sum")
    }

    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&refs, dim)?;
        let rg = self.any_grad(parts);
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                dim,
            },
            rg,
            "concat",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        check_perm(perm, self.value(x).rank())?;
        let value = self.value(x).permute(perm)?;
        let rg = self.any_grad(&[x]);
        self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
            "permute",
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(dim_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn slice(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice(dim, start, len)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Slice { x, dim, start }, rg, "slice")
    }

    pub fn gather(&mut self, x: Var, dim: usize, index: &[usize]) -> Result<Var> {
        let value = self.value(x).gather(dim, index)?;
        let rg = self.any_grad(&[x]);
        self.push(
            value,
            Op::Gather {
                x,
                dim,
                index: index.to_vec(),
            },
            rg,
            "gather",
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = self.value(x).upsample_nearest(factor)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Upsample { x, factor }, rg, "upsample_nearest")
    }

    /// Cosine similarity of the vectors along `dim`, which is removed.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, dim: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv)?;
        av.check_dim(dim)?;
        let (outer, d, inner) = kernels::split_at_dim(av.shape(), dim);
        let eps = T::of(COSINE_EPS);
        let (x, y) = (av.data(), bv.data());
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                for j in 0..d {
                    let p = (o * d + j) * inner + i;
                    dot = dot + x[p] * y[p];
                    na = na + x[p] * x[p];
                    nb = nb + y[p] * y[p];
                }
                out.push(dot / (na.sqrt().max(eps) * nb.sqrt().max(eps)));
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(dim);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Cosine { a, b, dim }, rg, "cosine_similarity")
    }

    /// Squared error summed over channels and normalized by the spatial
    /// extent (last two axes) and by any leading batch axes.
    ///
    /// Rank 2 is `[h, w]`, rank 3 `[c, h, w]`, rank >= 4 `[batch.., c, h, w]`.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv)?;
        let s = av.shape();
        if s.len() < 2 {
            return Err(dim_err!("mse_loss needs rank >= 2, got {:?}", s));
        }
        let spatial = s[s.len() - 2] * s[s.len() - 1];
        let batch: usize = if s.len() >= 4 { s[..s.len() - 3].iter().product() } else { 1 };
        let denom = T::of((spatial * batch) as f64);
        let total: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / denom);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mse { a, b, denom }, rg, "mse_loss")
    }

    /// Propagate d(root)/d(leaf) for every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward called twice without reset".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(dim_err!("backward root must be a scalar, got shape {:?}", self.shape(root)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward".into()));
                }
                grads[i] = Some(g);
                continue;
            }
            backprop(nodes, &mut grads, node, &g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Accumulate into the gradient buffer of `v`, allocating it on first use.
fn acc<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d = *d - s;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *d = *d + s * y;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *d = *d + s * x;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for (d, &v) in ga.iter_mut().zip(g) {
                    *d = *d + *s * v;
                }
            }
        }
        Op::AddSuffix(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let nb = gb.len();
                for chunk in g.chunks(nb) {
                    add_into(gb, chunk);
                }
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    if x > T::zero() {
                        *d = *d + s;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let (k, c) = (T::of(GELU_SCALE), T::of(GELU_COEFF));
            let (half, three) = (T::of(0.5), T::of(3.0));
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    let t = (k * (x + c * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * k * (T::one() + three * c * x * x);
                    *d = *d + s * (half * (T::one() + t) + half * x * dt);
                }
            }
        }
        Op::MatMul(a, b, plan) => {
            let (m, n, p) = (plan.m, plan.n, plan.p);
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(nodes, grads, *a) {
                if plan.shared_rhs {
                    let bt = kernels::transpose(n, p, bv);
                    kernels::gemm_acc(plan.batch * m, p, n, g, &bt, ga);
                } else {
                    for bi in 0..plan.batch {
                        let bt = kernels::transpose(n, p, &bv[bi * n * p..(bi + 1) * n * p]);
                        kernels::gemm_acc(
                            m,
                            p,
                            n,
                            &g[bi * m * p..(bi + 1) * m * p],
                            &bt,
                            &mut ga[bi * m * n..(bi + 1) * m * n],
                        );
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                if plan.shared_rhs {
                    let at = kernels::transpose(plan.batch * m, n, av);
                    kernels::gemm_acc(n, plan.batch * m, p, &at, g, gb);
                } else {
                    for bi in 0..plan.batch {
                        let at = kernels::transpose(m, n, &av[bi * m * n..(bi + 1) * m * n]);
                        kernels::gemm_acc(
                            n,
                            m,
                            p,
                            &at,
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut gb[bi * n * p..(bi + 1) * n * p],
                        );
                    }
                }
            }
        }
        Op::Softmax { x, dim } => {
            let y = node.value.data();
            let (outer, d, inner) = kernels::split_at_dim(node.value.shape(), *dim);
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * d + j) * inner + i;
                        let s: T = (0..d).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..d {
                            gx[at(j)] = gx[at(j)] + y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            dim,
            xhat,
            inv_std,
        } => {
            let (outer, d, inner) = kernels::split_at_dim(node.value.shape(), *dim);
            let gm = val(*gamma);
            let df = T::of(d as f64);
            if let Some(gx) = acc(nodes, grads, *x) {
                let mut gxh = vec![T::zero(); d];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * d + j) * inner + i;
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..d {
                            gxh[j] = g[at(j)] * gm[j];
                            s1 = s1 + gxh[j];
                            s2 = s2 + gxh[j] * xhat[at(j)];
                        }
                        let is = inv_std[o * inner + i] / df;
                        for j in 0..d {
                            gx[at(j)] = gx[at(j)] + is * (df * gxh[j] - s1 - xhat[at(j)] * s2);
                        }
                    }
                }
            }
            if let Some(gg) = acc(nodes, grads, *gamma) {
                for o in 0..outer {
                    for (j, gj) in gg.iter_mut().enumerate().take(d) {
                        for i in 0..inner {
                            let p = (o * d + j) * inner + i;
                            *gj = *gj + g[p] * xhat[p];
                        }
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *beta) {
                for o in 0..outer {
                    for j in 0..d {
                        for i in 0..inner {
                            gb[j] = gb[j] + g[(o * d + j) * inner + i];
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
            let in_img = geom.c_in * geom.h * geom.w;
            let out_img = geom.c_out * cols_n;
            let xv = val(*x);
            let wv = val(*w);
            if let Some(b) = b {
                if let Some(gb) = acc(nodes, grads, *b) {
                    for bi in 0..geom.batch {
                        for co in 0..geom.c_out {
                            let plane = &g[bi * out_img + co * cols_n..bi * out_img + (co + 1) * cols_n];
                            gb[co] = gb[co] + plane.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            let want_w = nodes[w.0].requires_grad;
            let want_x = nodes[x.0].requires_grad;
            if want_w {
                let mut cols = vec![T::zero(); rows * cols_n];
                let mut gw_local = vec![T::zero(); geom.c_out * rows];
                for bi in 0..geom.batch {
                    kernels::im2col(geom, &xv[bi * in_img..(bi + 1) * in_img], &mut cols);
                    let ct = kernels::transpose(rows, cols_n, &cols);
                    kernels::gemm_acc(
                        geom.c_out,
                        cols_n,
                        rows,
                        &g[bi * out_img..(bi + 1) * out_img],
                        &ct,
                        &mut gw_local,
                    );
                }
                add_into(acc(nodes, grads, *w).unwrap(), &gw_local);
            }
            if want_x {
                let wt = kernels::transpose(geom.c_out, rows, wv);
                let mut gcols = vec![T::zero(); rows * cols_n];
                let gx = acc(nodes, grads, *x).unwrap();
                for bi in 0..geom.batch {
                    gcols.iter_mut().for_each(|v| *v = T::zero());
                    kernels::gemm_acc(rows, geom.c_out, cols_n, &wt, &g[bi * out_img..(bi + 1) * out_img], &mut gcols);
                    kernels::col2im_acc(geom, &gcols, &mut gx[bi * in_img..(bi + 1) * in_img]);
                }
            }
        }
        Op::MeanDim { x, dim } => {
            let (outer, d, inner) = kernels::split_at_dim(nodes[x.0].value.shape(), *dim);
            let scale = T::one() / T::of(d as f64);
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for j in 0..d {
                        let dst = &mut gx[(o * d + j) * inner..(o * d + j + 1) * inner];
                        for (t, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *t = *t + s * scale;
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|v| *v = *v + g[0]);
            }
        }
        Op::Concat { parts, dim } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*dim].iter().product();
            let inner: usize = out_shape[dim + 1..].iter().product();
            let total = out_shape[*dim];
            let mut offset = 0;
            for p in parts {
                let ext = nodes[p.0].value.shape()[*dim];
                if let Some(gp) = acc(nodes, grads, *p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                        add_into(&mut gp[o * ext * inner..(o + 1) * ext * inner], src);
                    }
                }
                offset += ext;
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                add_into(gx, g);
            }
        }
        Op::Permute { x, perm } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv = kernels::inverse_perm(perm);
                let (_, back) = kernels::permute(node.value.shape(), &inv, g);
                add_into(gx, &back);
            }
        }
        Op::Slice { x, dim, start } => {
            let (outer, d, inner) = kernels::split_at_dim(nodes[x.0].value.shape(), *dim);
            let len = node.value.shape()[*dim];
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * d + start) * inner..(o * d + start + len) * inner];
                    add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Gather { x, dim, index } => {
            let (outer, d, inner) = kernels::split_at_dim(nodes[x.0].value.shape(), *dim);
            let n = index.len();
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for (j, &src) in index.iter().enumerate() {
                        let dst = &mut gx[(o * d + src) * inner..(o * d + src + 1) * inner];
                        add_into(dst, &g[(o * n + j) * inner..(o * n + j + 1) * inner]);
                    }
                }
            }
        }
        Op::Upsample { x, factor } => {
            let s = nodes[x.0].value.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let (ho, wo) = (h * factor, w * factor);
            if let Some(gx) = acc(nodes, grads, *x) {
                let planes = gx.len() / (h * w).max(1);
                for p in 0..planes {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let t = p * h * w + (y / factor) * w + xx / factor;
                            gx[t] = gx[t] + g[p * ho * wo + y * wo + xx];
                        }
                    }
                }
            }
        }
        Op::Cosine { a, b, dim } => {
            let (outer, d, inner) = kernels::split_at_dim(nodes[a.0].value.shape(), *dim);
            let eps = T::of(COSINE_EPS);
            let (x, y) = (val(*a), val(*b));
            let mut da = vec![T::zero(); x.len()];
            let mut db = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * d + j) * inner + i;
                    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                    for j in 0..d {
                        dot = dot + x[at(j)] * y[at(j)];
                        na = na + x[at(j)] * x[at(j)];
                        nb = nb + y[at(j)] * y[at(j)];
                    }
                    let (na, nb) = (na.sqrt(), nb.sqrt());
                    let (ca, cb) = (na.max(eps), nb.max(eps));
                    let gs = g[o * inner + i];
                    let cos = dot / (ca * cb);
                    for j in 0..d {
                        let mut ga = y[at(j)] / (ca * cb);
                        if na > eps {
                            ga = ga - cos * x[at(j)] / (na * na);
                        }
                        let mut gb = x[at(j)] / (ca * cb);
                        if nb > eps {
                            gb = gb - cos * y[at(j)] / (nb * nb);
                        }
                        da[at(j)] = gs * ga;
                        db[at(j)] = gs * gb;
                    }
                }
            }
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, &da);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                add_into(gb, &db);
            }
        }
        Op::Mse { a, b, denom } => {
            let two = T::of(2.0) * g[0] / *denom;
            let (x, y) = (val(*a), val(*b));
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &p), &q) in ga.iter_mut().zip(x).zip(y) {
                    *d = *d + two * (p - q);
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((d, &p), &q) in gb.iter_mut().zip(x).zip(y) {
                    *d = *d - two * (p - q);
                }
            }
        }
    }
}
