//! Server-held factors for the shared parameters γ = (b, σ).

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::math::{positive, positive_grad, positive_inv, HALF_LN_2PI};
use crate::models::{ModelSpec, ScalarPrior, SharedParam, SharedValues};

/// Scalar Gaussian factor `N(mean, positive(raw))` on the stored coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarFactor {
    pub mean: f64,
    pub raw_scale: f64,
}

impl ScalarFactor {
    pub fn new(mean: f64, scale: f64) -> Self {
        Self {
            mean,
            raw_scale: positive_inv(scale),
        }
    }

    pub fn scale(&self) -> f64 {
        positive(self.raw_scale)
    }

    pub fn sample(&self, eps: f64) -> f64 {
        self.mean + self.scale() * eps
    }

    pub fn log_density_at(&self, eps: f64) -> f64 {
        -HALF_LN_2PI - self.scale().ln() - 0.5 * eps * eps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SharedSlot {
    Absent,
    Fixed { value: f64 },
    Learned { factor: ScalarFactor, prior: ScalarPrior },
}

/// The server's shared-parameter state. σ is handled on `u = ln σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedState {
    pub intercept: SharedSlot,
    pub log_sigma: SharedSlot,
}

/// One draw of the shared parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharedDraw {
    pub values: SharedValues,
    /// Noise used for each learned slot, intercept first.
    pub eps: [f64; 2],
}

impl SharedState {
    pub fn from_spec(spec: &ModelSpec, init_scale: f64) -> Self {
        let slot = |p: SharedParam, log: bool| match p {
            SharedParam::Absent => SharedSlot::Absent,
            SharedParam::Fixed { value } => SharedSlot::Fixed {
                value: if log { value.ln() } else { value },
            },
            SharedParam::Learned { prior, init } => SharedSlot::Learned {
                factor: ScalarFactor::new(if log { init.ln() } else { init }, init_scale),
                prior,
            },
        };
        Self {
            intercept: slot(spec.intercept, false),
            log_sigma: slot(spec.sigma, true),
        }
    }

    fn slots(&self) -> [&SharedSlot; 2] {
        [&self.intercept, &self.log_sigma]
    }

    /// Number of standard-normal draws consumed by [`SharedState::draw`].
    pub fn num_learned(&self) -> usize {
        self.slots()
            .iter()
            .filter(|s| matches!(s, SharedSlot::Learned { .. }))
            .count()
    }

    pub fn param_count(&self) -> usize {
        2 * self.num_learned()
    }

    pub fn draw(&self, noise: &[f64]) -> Result<SharedDraw> {
        check_len("shared noise", self.num_learned(), noise.len())?;
        let mut it = noise.iter();
        let mut eps = [0.0; 2];
        let mut stored = [0.0; 2];
        for (k, slot) in self.slots().into_iter().enumerate() {
            stored[k] = match slot {
                // b = 0 and ln σ = 0
                SharedSlot::Absent => 0.0,
                SharedSlot::Fixed { value } => *value,
                SharedSlot::Learned { factor, .. } => {
                    eps[k] = *it.next().unwrap();
                    factor.sample(eps[k])
                }
            };
        }
        Ok(SharedDraw {
            values: SharedValues {
                intercept: stored[0],
                sigma: stored[1].exp(),
            },
            eps,
        })
    }

    /// Posterior means on the natural scale (`exp` of the log-scale mean for σ).
    pub fn point_values(&self) -> SharedValues {
        let v = |s: &SharedSlot, default: f64| match s {
            SharedSlot::Absent => default,
            SharedSlot::Fixed { value } => *value,
            SharedSlot::Learned { factor, .. } => factor.mean,
        };
        SharedValues {
            intercept: v(&self.intercept, 0.0),
            sigma: v(&self.log_sigma, 0.0).exp(),
        }
    }

    /// STL gradient for the learned slots given the likelihood derivatives
    /// `∂L₀/∂b` and `∂L₀/∂σ` (natural scale). Returns the flat gradient
    /// `[mean, raw]` per learned slot and the value `log p(γ) − log q(γ)`.
    pub fn gradients(&self, draw: &SharedDraw, d_intercept: f64, d_sigma: f64) -> (Vec<f64>, f64) {
        let mut grad = Vec::with_capacity(self.param_count());
        let mut value = 0.0;
        let lik = [d_intercept, d_sigma * draw.values.sigma];
        for (k, slot) in self.slots().into_iter().enumerate() {
            if let SharedSlot::Learned { factor, prior } = slot {
                let eps = draw.eps[k];
                let u = factor.sample(eps);
                let (lp, dp) = prior.eval(u);
                let d = lik[k] + dp + eps / factor.scale();
                grad.push(d);
                grad.push(d * eps * positive_grad(factor.raw_scale));
                value += lp - factor.log_density_at(eps);
            }
        }
        (grad, value)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for slot in self.slots() {
            if let SharedSlot::Learned { factor, .. } = slot {
                out.push(factor.mean);
                out.push(factor.raw_scale);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("shared params", self.param_count(), flat.len())?;
        let mut it = flat.chunks_exact(2);
        for slot in [&mut self.intercept, &mut self.log_sigma] {
            if let SharedSlot::Learned { factor, .. } = slot {
                let c = it.next().unwrap();
                factor.mean = c[0];
                factor.raw_scale = c[1];
            }
        }
        Ok(())
    }
}
