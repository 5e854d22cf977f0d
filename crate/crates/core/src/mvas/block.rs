use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::attention::mvas_forward;

/// Square `c × c` projections, applied as `X W`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvWeights<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
}

/// Token-wise affine map `x W + b`, `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

/// Layer-norm affine pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

/// Parameters of one MVAS block. `positional` is a fixed table and is never
/// trained; every other field is.
#[derive(Debug, Clone, PartialEq)]
pub struct MvasBlockParams<P> {
    pub qkv: QkvWeights<P>,
    pub mlp_in: Linear<P>,
    pub mlp_out: Linear<P>,
    pub norm_attn: Norm<P>,
    pub norm_mlp: Norm<P>,
    /// `[h, w, c]`
    pub positional: P,
}

impl<P> Linear<P> {
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&P, bool) -> Result<Q, E>) -> Result<Linear<Q>, E> {
        Ok(Linear {
            w: f(&self.w, true)?,
            b: f(&self.b, true)?,
        })
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P, bool)) {
        f(&self.w, true);
        f(&self.b, true);
    }
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut P, bool)) {
        f(&mut self.w, true);
        f(&mut self.b, true);
    }
}

impl<P> Norm<P> {
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&P, bool) -> Result<Q, E>) -> Result<Norm<Q>, E> {
        Ok(Norm {
            gamma: f(&self.gamma, true)?,
            beta: f(&self.beta, true)?,
        })
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P, bool)) {
        f(&self.gamma, true);
        f(&self.beta, true);
    }
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut P, bool)) {
        f(&mut self.gamma, true);
        f(&mut self.beta, true);
    }
}

impl<P> QkvWeights<P> {
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&P, bool) -> Result<Q, E>) -> Result<QkvWeights<Q>, E> {
        Ok(QkvWeights {
            wq: f(&self.wq, true)?,
            wk: f(&self.wk, true)?,
            wv: f(&self.wv, true)?,
        })
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P, bool)) {
        f(&self.wq, true);
        f(&self.wk, true);
        f(&self.wv, true);
    }
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut P, bool)) {
        f(&mut self.wq, true);
        f(&mut self.wk, true);
        f(&mut self.wv, true);
    }
}

impl<P> MvasBlockParams<P> {
    /// Map every field; the flag tells whether the field is trainable.
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&P, bool) -> Result<Q, E>) -> Result<MvasBlockParams<Q>, E> {
        Ok(MvasBlockParams {
            qkv: self.qkv.try_map(f)?,
            mlp_in: self.mlp_in.try_map(f)?,
            mlp_out: self.mlp_out.try_map(f)?,
            norm_attn: self.norm_attn.try_map(f)?,
            norm_mlp: self.norm_mlp.try_map(f)?,
            positional: f(&self.positional, false)?,
        })
    }
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a P, bool)) {
        self.qkv.visit(f);
        self.mlp_in.visit(f);
        self.mlp_out.visit(f);
        self.norm_attn.visit(f);
        self.norm_mlp.visit(f);
        f(&self.positional, false);
    }
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut P, bool)) {
        self.qkv.visit_mut(f);
        self.mlp_in.visit_mut(f);
        self.mlp_out.visit_mut(f);
        self.norm_attn.visit_mut(f);
        self.norm_mlp.visit_mut(f);
        f(&mut self.positional, false);
    }
}

/// Initial gain of both residual-branch norms.
pub const RESIDUAL_GAIN_INIT: f64 = 0.1;

impl<T: Scalar> QkvWeights<Tensor<T>> {
    pub fn random(c: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        QkvWeights {
            wq: Tensor::randn(vec![c, c], std, rng),
            wk: Tensor::randn(vec![c, c], std, rng),
            wv: Tensor::randn(vec![c, c], std, rng),
        }
    }

    pub fn identity(c: usize) -> Self {
        let eye = Tensor::from_fn(vec![c, c], |i| if i / c == i % c { T::one() } else { T::zero() });
        QkvWeights {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye,
        }
    }

    /// Bind as tape leaves.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<QkvWeights<Var>> {
        self.try_map(&mut |t, _| tape.leaf(t.clone(), trainable))
    }
}

impl<T: Scalar> MvasBlockParams<Tensor<T>> {
    /// Random projections and MLP (hidden width `4c`), norms with gain
    /// [`RESIDUAL_GAIN_INIT`], and the sinusoidal positional table for an
    /// `h × w` map.
    pub fn random(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Self {
        let hidden = 4 * c;
        MvasBlockParams {
            qkv: QkvWeights::random(c, rng),
            mlp_in: Linear {
                w: Tensor::randn(vec![c, hidden], (2.0 / c as f64).sqrt(), rng),
                b: Tensor::zeros(vec![hidden]),
            },
            mlp_out: Linear {
                w: Tensor::randn(vec![hidden, c], (1.0 / hidden as f64).sqrt(), rng),
                b: Tensor::zeros(vec![c]),
            },
            norm_attn: Norm {
                gamma: Tensor::full(vec![c], T::of(RESIDUAL_GAIN_INIT)),
                beta: Tensor::zeros(vec![c]),
            },
            norm_mlp: Norm {
                gamma: Tensor::full(vec![c], T::of(RESIDUAL_GAIN_INIT)),
                beta: Tensor::zeros(vec![c]),
            },
            positional: positional_encoding(h, w, c),
        }
    }

    pub fn channels(&self) -> usize {
        self.qkv.wq.shape()[0]
    }

    /// Bind every field as a tape leaf; trainable fields get gradients when
    /// `trainable` is set, the positional table never does.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<MvasBlockParams<Var>> {
        self.try_map(&mut |t, flag| tape.leaf(t.clone(), trainable && flag))
    }
}

/// Fixed 2-D sinusoidal table `[h, w, c]`: the first `⌈c/2⌉` channels encode
/// the row, the rest the column.
pub fn positional_encoding<T: Scalar>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let row_ch = c - c / 2;
    let col_ch = c / 2;
    let enc = |pos: usize, j: usize, d: usize| -> f64 {
        let freq = (2 * (j / 2)) as f64 / d.max(1) as f64;
        let angle = pos as f64 / 10000f64.powf(freq);
        if j.is_multiple_of(2) {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    Tensor::from_fn(vec![h, w, c], |i| {
        let ch = i % c;
        let x = (i / c) % w;
        let y = i / (c * w);
        if ch < row_ch {
            T::of(enc(y, ch, row_ch))
        } else {
            T::of(enc(x, ch - row_ch, col_ch))
        }
    })
}

/// `X_o = LN(MVAS(X_i + P)) + X_i`, then `X_o = LN(MLP(X_o)) + X_o`.
///
/// The MLP is token-wise `c -> 4c -> c` with GELU.
pub fn mvas_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &MvasBlockParams<Var>,
    a: usize,
    k: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || tape.shape(params.positional) != &shape[1..] {
        return Err(Error::Dimension(format!(
            "mvas_block: positional table {:?} does not match input {:?}",
            tape.shape(params.positional),
            shape
        )));
    }
    let (v, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let with_pos = tape.add_broadcast(x, params.positional)?;
    let fused = mvas_forward(tape, with_pos, a, k, &params.qkv)?;
    let normed = tape.layer_norm(fused, 3, params.norm_attn.gamma, params.norm_attn.beta)?;
    let x_o = tape.add(normed, x)?;

    let tokens = tape.reshape(x_o, &[v * h * w, c])?;
    let hidden = tape.matmul(tokens, params.mlp_in.w)?;
    let hidden = tape.add_broadcast(hidden, params.mlp_in.b)?;
    let hidden = tape.gelu(hidden)?;
    let out = tape.matmul(hidden, params.mlp_out.w)?;
    let out = tape.add_broadcast(out, params.mlp_out.b)?;
    let out = tape.reshape(out, &[v, h, w, c])?;
    let normed = tape.layer_norm(out, 3, params.norm_mlp.gamma, params.norm_mlp.beta)?;
    tape.add(normed, x_o)
}
