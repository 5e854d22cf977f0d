//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub tensor: Tensor<T>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(tensor: Tensor<T>) -> Self {
        let n = tensor.numel();
        Parameter {
            tensor,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            ..Default::default()
        }
    }

    /// One update of `param` given its gradient.
    pub fn step<T: Scalar>(&self, param: &mut Parameter<T>, grad: &[T]) -> Result<()> {
        if grad.len() != param.tensor.numel() {
            return Err(dim_err!(
                "adamw: gradient has {} entries, parameter {}",
                grad.len(),
                param.tensor.numel()
            ));
        }
        param.step += 1;
        let t = param.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let lr = T::of(self.lr);
        let decay = T::one() - T::of(self.lr * self.weight_decay);
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let eps = T::of(self.eps);
        let values = param.tensor.data_mut();
        for (((p, m), v), &g) in values
            .iter_mut()
            .zip(param.first_moment.iter_mut())
            .zip(param.second_moment.iter_mut())
            .zip(grad)
        {
            *p = *p * decay;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
