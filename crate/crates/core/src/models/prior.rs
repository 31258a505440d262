use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::HALF_LN_2PI;

use super::predictor::PredictorKind;

/// Prior over one client's parameter vector θ_j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorSpec {
    /// Independent N(mean, sd) on every component.
    Normal { mean: f64, sd: f64 },
    /// Varying slopes: β^r ~ N(μ^r, σ^r), μ^r ~ N(0, mean_sd), σ^r ~ HN(scale).
    /// σ is parameterized on the log scale; the Jacobian is included.
    Hierarchical { mean_sd: f64, scale: f64 },
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Normal { mean: 0.0, sd: 1.0 }
    }
}

/// Prior over a scalar shared parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScalarPrior {
    /// On the natural scale.
    Normal { mean: f64, sd: f64 },
    /// Half-normal on a positive parameter stored as `u = ln s`; includes the
    /// `+u` Jacobian so the density is over `u`.
    HalfNormal { scale: f64 },
    /// Improper flat density on the stored coordinate.
    Flat,
}

/// `log N(x; m, s)` and its derivative in `x`.
#[inline]
fn normal(x: f64, m: f64, s: f64) -> (f64, f64) {
    let r = (x - m) / s;
    (-HALF_LN_2PI - s.ln() - 0.5 * r * r, -r / s)
}

/// log HN(s; scale) on the natural scale, for s > 0.
#[inline]
pub fn half_normal_logpdf(s: f64, scale: f64) -> f64 {
    std::f64::consts::LN_2 - HALF_LN_2PI - scale.ln() - 0.5 * (s / scale).powi(2)
}

impl ScalarPrior {
    /// Log density in the stored coordinate and its derivative.
    pub fn eval(self, u: f64) -> (f64, f64) {
        match self {
            ScalarPrior::Normal { mean, sd } => normal(u, mean, sd),
            ScalarPrior::HalfNormal { scale } => {
                let s = u.exp();
                let v = half_normal_logpdf(s, scale) + u;
                let d = -s * s / (scale * scale) + 1.0;
                (v, d)
            }
            ScalarPrior::Flat => (0.0, 0.0),
        }
    }
}

/// `log p(θ_j)` and `∂/∂θ_j` for the given parameter layout.
pub fn log_prior(theta: &[f64], kind: &PredictorKind, prior: &PriorSpec) -> Result<(f64, Vec<f64>)> {
    check_len("theta", kind.theta_dim(), theta.len())?;
    match (kind, prior) {
        (PredictorKind::Multilevel { .. }, PriorSpec::Normal { .. }) => Err(Error::Config(
            "multilevel slopes need a hierarchical prior".into(),
        )),
        (_, PriorSpec::Normal { mean, sd }) => {
            if !(*sd > 0.0) {
                return Err(Error::Domain(format!("prior sd must be > 0, got {sd}")));
            }
            let mut value = 0.0;
            let mut grad = Vec::with_capacity(theta.len());
            for &t in theta {
                let (v, d) = normal(t, *mean, *sd);
                value += v;
                grad.push(d);
            }
            Ok((value, grad))
        }
        (PredictorKind::Multilevel { p, levels }, PriorSpec::Hierarchical { mean_sd, scale }) => {
            if !(*mean_sd > 0.0 && *scale > 0.0) {
                return Err(Error::Domain("hierarchical prior scales must be > 0".into()));
            }
            let block = p * levels;
            let (beta, rest) = theta.split_at(block);
            let (mu, log_sigma) = rest.split_at(block);
            let mut value = 0.0;
            let mut grad = vec![0.0; theta.len()];
            for i in 0..block {
                let (vm, dm) = normal(mu[i], 0.0, *mean_sd);
                let u = log_sigma[i];
                let s = u.exp();
                let vs = half_normal_logpdf(s, *scale) + u;
                let r = beta[i] - mu[i];
                let vb = -HALF_LN_2PI - u - 0.5 * r * r / (s * s);
                value += vm + vs + vb;
                grad[i] = -r / (s * s);
                grad[block + i] = dm + r / (s * s);
                grad[2 * block + i] = -s * s / (scale * scale) + r * r / (s * s);
            }
            Ok((value, grad))
        }
        (_, PriorSpec::Hierarchical { .. }) => Err(Error::Config(
            "hierarchical prior is only defined for multilevel slopes".into(),
        )),
    }
}
