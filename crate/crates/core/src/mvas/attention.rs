use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::block::QkvWeights;
use super::select::{correlation, topk_indices, window_descriptors, TopKSelection};
use super::window::{partition_var, unpartition_var};

/// Check `X_i: [v, h, w, c]` against the window grid `a` and selection `k`.
pub fn validate_geometry(shape: &[usize], a: usize, k: usize) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "multi-view input must be [v, h, w, c], got {shape:?}"
        )));
    }
    let (v, h, w) = (shape[0], shape[1], shape[2]);
    if v < 2 {
        return Err(Error::Geometry(format!("need at least 2 views, got {v}")));
    }
    if a == 0 || h % a != 0 || w % a != 0 {
        return Err(Error::Geometry(format!(
            "window grid a={a} must divide the {h}x{w} feature map"
        )));
    }
    let candidates = (v - 1) * a * a;
    if k == 0 || k > candidates {
        return Err(Error::Geometry(format!(
            "top-k k={k} outside 1..={candidates} for v={v}, a={a}"
        )));
    }
    Ok(())
}

/// `Q_s = X_s W_q`, `K_m = X_m W_k`, `V_m = X_m W_v` on windowed tokens.
///
/// `x_s: [a², t, c]`, `x_m: [(v-1)·a², t, c]` (view-major).
pub fn project_qkv<T: Scalar>(
    tape: &mut Tape<T>,
    x_s: Var,
    x_m: Var,
    qkv: &QkvWeights<Var>,
) -> Result<(Var, Var, Var)> {
    let (ss, sm) = (tape.shape(x_s).to_vec(), tape.shape(x_m).to_vec());
    if ss.len() != 3 || sm.len() != 3 || ss[1..] != sm[1..] {
        return Err(Error::Dimension(format!(
            "project_qkv: single-view {ss:?} and multi-view {sm:?} windows disagree"
        )));
    }
    let q = tape.matmul(x_s, qkv.wq)?;
    let k = tape.matmul(x_m, qkv.wk)?;
    let v = tape.matmul(x_m, qkv.wv)?;
    Ok((q, k, v))
}

/// Collect, for query window `i`, the tokens of its selected windows in
/// selection order: `[a², k·t, c]` each.
pub fn gather_topk<T: Scalar>(
    tape: &mut Tape<T>,
    k_m: Var,
    v_m: Var,
    sel: &TopKSelection,
) -> Result<(Var, Var)> {
    let s = tape.shape(k_m).to_vec();
    if s.len() != 3 || tape.shape(v_m) != s.as_slice() {
        return Err(Error::Dimension(format!(
            "gather_topk: keys {:?} and values {:?} must share [windows, t, c]",
            s,
            tape.shape(v_m)
        )));
    }
    let (t, c) = (s[1], s[2]);
    let shape = [sel.rows(), sel.k() * t, c];
    let kg = tape.gather(k_m, 0, sel.flat())?;
    let kg = tape.reshape(kg, &shape)?;
    let vg = tape.gather(v_m, 0, sel.flat())?;
    let vg = tape.reshape(vg, &shape)?;
    Ok((kg, vg))
}

/// Per-window `softmax(Q Kᵀ / √c) V`.
pub fn neighborhood_cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_s: Var,
    k_sel: Var,
    v_sel: Var,
    c: usize,
) -> Result<Var> {
    let kt = tape.transpose(k_sel)?;
    let logits = tape.matmul(q_s, kt)?;
    let logits = tape.scale(logits, T::one() / T::of(c as f64).sqrt())?;
    let rank = tape.shape(logits).len();
    let attn = tape.softmax(logits, rank - 1)?;
    tape.matmul(attn, v_sel)
}

/// Enhanced features of view `j`, `[h, w, c]`: one iteration of the
/// per-view loop.
pub fn fuse_view<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    j: usize,
    a: usize,
    k: usize,
    qkv: &QkvWeights<Var>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    validate_geometry(&shape, a, k)?;
    let (v, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if j >= v {
        return Err(Error::Index(format!("view {j} out of range for {v} views")));
    }
    let single = tape.slice(x, 0, j, 1)?;
    let single = tape.reshape(single, &[h, w, c])?;
    let x_s = partition_var(tape, single, a)?;

    let mut others = Vec::with_capacity(2);
    if j > 0 {
        others.push(tape.slice(x, 0, 0, j)?);
    }
    if j + 1 < v {
        others.push(tape.slice(x, 0, j + 1, v - j - 1)?);
    }
    let multi = if others.len() == 1 {
        others[0]
    } else {
        tape.concat(&others, 0)?
    };
    let multi = partition_var(tape, multi, a)?;
    let t = (h / a) * (w / a);
    let x_m = tape.reshape(multi, &[(v - 1) * a * a, t, c])?;

    let (q_s, k_m, v_m) = project_qkv(tape, x_s, x_m, qkv)?;
    // selection is piecewise constant, so it is computed off-tape
    let (a_s, a_m) = window_descriptors(tape.value(q_s), tape.value(k_m))?;
    let corr = correlation(&a_s, &a_m)?;
    let sel = topk_indices(&corr.values, k)?;
    let (k_sel, v_sel) = gather_topk(tape, k_m, v_m, &sel)?;
    let y = neighborhood_cross_attention(tape, q_s, k_sel, v_sel, c)?;
    unpartition_var(tape, y, a, h, w)
}

/// MVAS over all views of one sample: `[v, h, w, c] -> [v, h, w, c]`.
pub fn mvas_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    a: usize,
    k: usize,
    qkv: &QkvWeights<Var>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    validate_geometry(&shape, a, k)?;
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    let mut outs = Vec::with_capacity(shape[0]);
    for j in 0..shape[0] {
        let y = fuse_view(tape, x, j, a, k, qkv)?;
        outs.push(tape.reshape(y, &[1, h, w, c])?);
    }
    tape.concat(&outs, 0)
}
