//! Adam and the cosine-annealing learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update of every trainable parameter that has
    /// a gradient. Parameters without a gradient keep their moments.
    pub fn step(
        &self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.params_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::Param(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            for (((w, &gi), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *w -= (lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / total)) / 2`.
///
/// Epoch 0 gives `lr_max`; epoch `total` gives `lr_min`.
pub fn cosine_lr(lr_max: f64, lr_min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = epoch.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}
