//! Bias-corrected Adam.

use super::Parameter;
use crate::error::{Result, WbError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies one update to every parameter. Gradients are validated first,
    /// so on error no parameter has been touched.
    pub fn step(&self, params: &mut [Parameter], grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(WbError::shape("adam_step", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.len() {
                return Err(WbError::shape("adam_step", format!("{} ({})", p.len(), p.name), g.len()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(WbError::NonFiniteGradient { name: p.name.clone() });
            }
        }
        for (p, g) in params.iter_mut().zip(grads) {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let values = p.tensor.data_mut();
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let m = self.beta1 * p.adam_m[i] as f64 + (1.0 - self.beta1) * gi;
                let v = self.beta2 * p.adam_v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                p.adam_m[i] = m as f32;
                p.adam_v[i] = v as f32;
                let update = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                values[i] = (values[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
