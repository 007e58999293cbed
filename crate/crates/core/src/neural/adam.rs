use serde::{Deserialize, Serialize};

use super::Params;
use crate::{Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Params,
    second: Params,
}

impl AdamState {
    pub fn new(params: &Params, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Params::zeros_like(params),
            second: Params::zeros_like(params),
        }
    }

    /// Applies one update.  `name` prefixes the parameter name reported when a
    /// gradient is not finite; parameters are left untouched in that case.
    pub fn step(&mut self, params: &mut Params, grads: &Params, name: &str) -> Result<()> {
        for (label, values) in grads.named() {
            if values.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{name}.{label}")));
            }
        }
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::input("gradient shape does not match the parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let moments = self.first.iter_mut().zip(self.second.iter_mut());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads.iter()).zip(moments) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
