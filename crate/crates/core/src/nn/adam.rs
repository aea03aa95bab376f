use serde::{Deserialize, Serialize};

use super::{ParamTensor, Scalar};
use crate::{Error, Result};

/// Adam hyper-parameters plus the step counter used for bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("beta {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update; gradients are zeroed afterwards.
pub fn adam_step<T: Scalar>(params: &mut [ParamTensor<T>], config: &mut AdamConfig) -> Result<()> {
    config.validate()?;
    if let Some(p) = params.iter().find(|p| !p.grad_ready) {
        return Err(Error::InvalidState(format!("no gradient for `{}`", p.name)));
    }
    let t = config.step_count + 1;
    let bc1 = 1.0 - config.beta1.powf(t as f64);
    let bc2 = 1.0 - config.beta2.powf(t as f64);
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one = T::one();
    // lr * m_hat / (sqrt(v_hat) + eps) with the corrections folded in.
    let step = T::from_f64(config.lr / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(config.epsilon);
    for p in params.iter_mut() {
        for (((theta, g), m), v) in p
            .value
            .iter_mut()
            .zip(p.grad.iter_mut())
            .zip(p.adam_m.iter_mut())
            .zip(p.adam_v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            *theta = *theta - step * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
            *g = T::zero();
        }
        p.grad_ready = false;
    }
    config.step_count = t;
    Ok(())
}
