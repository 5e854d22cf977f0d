//! Analytic operation counts for MVAS and dense cross-attention.
//!
//! MVAS: `2c(v·a⁴ + k·(hw)²/a⁴)`; dense: `(2c+1)·v·(hw)²`. The MVAS count is
//! minimized where the two terms are equal, at `a = (k/v)^{1/8}·(hw)^{1/4}`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCounts {
    pub mvas: u128,
    pub dense: u128,
}

impl FlopCounts {
    pub fn ratio(&self) -> f64 {
        self.dense as f64 / self.mvas as f64
    }
}

fn check(h: usize, w: usize, v: usize, a: usize, k: usize) -> Result<()> {
    if h == 0 || w == 0 || v < 2 {
        return Err(Error::Geometry(format!("invalid map {h}x{w} with {v} views")));
    }
    if a == 0 || !h.is_multiple_of(a) || !w.is_multiple_of(a) {
        return Err(Error::Geometry(format!("a={a} does not divide {h}x{w}")));
    }
    let candidates = (v - 1) * a * a;
    if k == 0 || k > candidates {
        return Err(Error::Geometry(format!(
            "k={k} outside 1..={candidates} for v={v}, a={a}"
        )));
    }
    Ok(())
}

/// The two summands `(v·a⁴, k·(hw)²/a⁴)` of the MVAS count.
pub fn am_gm_terms(h: usize, w: usize, v: usize, a: usize, k: usize) -> Result<(u128, u128)> {
    check(h, w, v, a, k)?;
    let a4 = (a as u128).pow(4);
    // (hw)²/a⁴ = t² with t = hw/a²
    let t = (h as u128 * w as u128) / (a as u128 * a as u128);
    Ok((v as u128 * a4, k as u128 * t * t))
}

pub fn flop_model(h: usize, w: usize, c: usize, v: usize, a: usize, k: usize) -> Result<FlopCounts> {
    let (sel, attn) = am_gm_terms(h, w, v, a, k)?;
    let c = c as u128;
    let hw = h as u128 * w as u128;
    Ok(FlopCounts {
        mvas: 2 * c * (sel + attn),
        dense: (2 * c + 1) * v as u128 * hw * hw,
    })
}

/// Continuous optimum `(k/v)^{1/8}·(hw)^{1/4}`.
pub fn optimal_window(h: usize, w: usize, v: usize, k: usize) -> f64 {
    // nested square roots are exact on perfect powers
    let ratio = (k as f64 / v as f64).sqrt().sqrt().sqrt();
    let hw = (h as f64 * w as f64).sqrt().sqrt();
    ratio * hw
}

/// Grid sizes `a` that divide both `h` and `w` and admit `k` candidates.
pub fn valid_windows(h: usize, w: usize, v: usize, k: usize) -> Vec<usize> {
    (1..=h.min(w))
        .filter(|&a| check(h, w, v, a, k).is_ok())
        .collect()
}

/// Nearest legal grid on either side of the continuous optimum, picking the
/// one with the smaller MVAS count (smaller `a` on ties).
pub fn optimal_window_divisor(h: usize, w: usize, v: usize, k: usize) -> Result<usize> {
    let valid = valid_windows(h, w, v, k);
    if valid.is_empty() {
        return Err(Error::Geometry(format!(
            "no window grid divides {h}x{w} with k={k}, v={v}"
        )));
    }
    let target = optimal_window(h, w, v, k);
    let below = valid.iter().copied().filter(|&a| a as f64 <= target).max();
    let above = valid.iter().copied().filter(|&a| a as f64 >= target).min();
    let cost = |a: usize| -> u128 {
        let (s, t) = am_gm_terms(h, w, v, a, k).expect("validated");
        s + t
    };
    Ok(match (below, above) {
        (Some(lo), Some(hi)) => {
            if cost(hi) < cost(lo) {
                hi
            } else {
                lo
            }
        }
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!(),
    })
}

/// Elements of the gathered key (or value) tensor: `a²·k·t·c`.
pub fn gathered_kv_elements(h: usize, w: usize, c: usize, a: usize, k: usize) -> u128 {
    let t = (h * w / (a * a)) as u128;
    (a * a) as u128 * k as u128 * t * c as u128
}
