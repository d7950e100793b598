use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_half_life: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 4e-4,
            warmup_steps: 1000,
            decay_half_life: 20_000,
        }
    }
}

impl Schedule {
    /// `base_lr · min(step / warmup, 1) · 0.5^(step / half_life)`; a zero
    /// warmup or half-life disables that factor.
    pub fn lr(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = if self.decay_half_life == 0 {
            1.0
        } else {
            0.5f64.powf(step as f64 / self.decay_half_life as f64)
        };
        self.base_lr * warm * decay
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let c1 = T::lit(1.0 - ADAM_BETA1.powi(self.step as i32));
        let c2 = T::lit(1.0 - ADAM_BETA2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(TensorError::Shape {
                    op: "adam",
                    left: g.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
