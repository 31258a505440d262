use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment state for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl AdamState {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first: vec![0.0; dim],
            second: vec![0.0; dim],
            steps: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Advances the moments with `grad` and returns the additive update
    /// `lr · m̂ / (√v̂ + eps)`. Add it to ascend, subtract it to descend.
    ///
    /// A non-finite gradient is rejected before any state is touched.
    pub fn step(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        check_len("adam gradient", self.first.len(), grad.len())?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "adam gradient[{i}] = {} at step {}",
                grad[i],
                self.steps + 1
            )));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut delta = Vec::with_capacity(grad.len());
        for ((m, v), &g) in self.first.iter_mut().zip(&mut self.second).zip(grad) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            delta.push(lr * m_hat / (v_hat.sqrt() + eps));
        }
        Ok(delta)
    }

    /// Gradient-ascent step applied in place.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("adam parameters", self.first.len(), params.len())?;
        let delta = self.step(grad)?;
        for (p, d) in params.iter_mut().zip(delta) {
            *p += d;
        }
        Ok(())
    }
}
