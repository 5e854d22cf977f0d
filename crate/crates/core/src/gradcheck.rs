//! Central-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare tape gradients of a scalar function against central differences.
///
/// Returns the maximum over all coordinates of all inputs of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&mut tape, &vars)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.param(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = f(&mut tape, &vars)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; x.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for (coord, &analytic_g) in grad.iter().enumerate() {
            let orig = inputs[which].data()[coord];
            probe[which].data_mut()[coord] = orig + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[coord] = orig - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[coord] = orig;
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() || !analytic_g.is_finite() {
                return Err(Error::NonFinite("grad_check".into()));
            }
            let err = (analytic_g - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_multi`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_multi(|tape, v| f(tape, v[0]), std::slice::from_ref(x), h)
}

fn scalar_of(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::Dimension(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let s = v.item();
    if !s.is_finite() {
        return Err(Error::NonFinite("grad_check".into()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu's subgradient at exactly 0 disagrees with the central difference
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.relu(x)?;
                t.sum(y)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn non_scalar_is_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|_, x| Ok(x), &x, DEFAULT_STEP).is_err());
    }
}
