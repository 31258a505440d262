//! Observation models over a linear predictor η, and the two ways the
//! predictor is assembled from client contributions.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_len, Error, Result};
use crate::math::{sigmoid, softplus, HALF_LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    Gaussian,
    Bernoulli,
    Poisson,
}

/// Values of the shared parameters γ seen by a likelihood evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedValues {
    /// Intercept `b` (0 when the model has none).
    pub intercept: f64,
    /// Observation scale of the Gaussian likelihood (ignored otherwise).
    pub sigma: f64,
}

impl Default for SharedValues {
    fn default() -> Self {
        Self {
            intercept: 0.0,
            sigma: 1.0,
        }
    }
}

/// Log-likelihood value with its derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LikEval {
    pub value: f64,
    /// ∂/∂ηᵢ; equal to ∂/∂z_{ij} for every client j whose z enters η.
    pub d_eta: Vec<f64>,
    pub d_intercept: f64,
    pub d_sigma: f64,
}

impl Likelihood {
    /// Rejects responses outside the family's support.
    pub fn validate_response(self, y: &[f64]) -> Result<()> {
        match self {
            Likelihood::Gaussian => crate::error::check_finite("response", y),
            Likelihood::Bernoulli => match y.iter().position(|v| *v != 0.0 && *v != 1.0) {
                Some(i) => Err(Error::Domain(format!(
                    "bernoulli response must be 0/1, y[{i}] = {}",
                    y[i]
                ))),
                None => Ok(()),
            },
            Likelihood::Poisson => {
                match y.iter().position(|v| *v < 0.0 || v.fract() != 0.0 || !v.is_finite()) {
                    Some(i) => Err(Error::Domain(format!(
                        "poisson response must be a non-negative count, y[{i}] = {}",
                        y[i]
                    ))),
                    None => Ok(()),
                }
            }
        }
    }

    /// `Σᵢ log p(yᵢ | ηᵢ, γ)` and derivatives. The intercept is assumed to be
    /// already folded into `eta`; `d_intercept` is `Σ ∂/∂ηᵢ`.
    pub fn eval(self, y: &[f64], eta: &[f64], sigma: f64) -> Result<LikEval> {
        check_len("linear predictor", y.len(), eta.len())?;
        let mut value = 0.0;
        let mut d_eta = Vec::with_capacity(y.len());
        let mut d_sigma = 0.0;
        match self {
            Likelihood::Gaussian => {
                if !(sigma > 0.0) {
                    return Err(Error::Domain(format!("gaussian sigma must be > 0, got {sigma}")));
                }
                let s2 = sigma * sigma;
                for (&yi, &e) in y.iter().zip(eta) {
                    let r = yi - e;
                    value += -HALF_LN_2PI - sigma.ln() - 0.5 * r * r / s2;
                    d_eta.push(r / s2);
                    d_sigma += r * r / (s2 * sigma) - 1.0 / sigma;
                }
            }
            Likelihood::Bernoulli => {
                for (&yi, &e) in y.iter().zip(eta) {
                    value += yi * e - softplus(e);
                    d_eta.push(yi - sigmoid(e));
                }
            }
            Likelihood::Poisson => {
                for (&yi, &e) in y.iter().zip(eta) {
                    let rate = e.exp();
                    value += yi * e - rate - ln_gamma(yi + 1.0);
                    d_eta.push(yi - rate);
                }
            }
        }
        let d_intercept = d_eta.iter().sum();
        Ok(LikEval {
            value,
            d_eta,
            d_intercept,
            d_sigma,
        })
    }
}

/// `ηᵢ = b + offsetᵢ + Σ_j parts_j[i]`, summing parts in client order.
pub fn linear_predictor(
    n: usize,
    intercept: f64,
    offset: Option<&[f64]>,
    parts: &[&[f64]],
) -> Result<Vec<f64>> {
    let mut eta = vec![intercept; n];
    if let Some(off) = offset {
        check_len("offset", n, off.len())?;
        for (e, o) in eta.iter_mut().zip(off) {
            *e += o;
        }
    }
    for p in parts {
        check_len("predictor block", n, p.len())?;
        for (e, v) in eta.iter_mut().zip(*p) {
            *e += v;
        }
    }
    Ok(eta)
}

/// Augmented-variable likelihood `log p(y | z, γ)` with `η = b + offset + Σ_j z_j`.
pub fn loglik_aux(
    lik: Likelihood,
    y: &[f64],
    z: &[&[f64]],
    offset: Option<&[f64]>,
    shared: SharedValues,
) -> Result<LikEval> {
    let eta = linear_predictor(y.len(), shared.intercept, offset, z)?;
    lik.eval(y, &eta, shared.sigma)
}

/// Client `j`'s weighted contribution to the power likelihood,
/// `(1/J) · log p(y | b + offset + g_j + Σ_{k≠j} z_k, γ)`.
///
/// All returned derivatives carry the `1/J` weight. `d_eta` is both
/// `∂/∂g_j` and `∂/∂z_k` for every `k ≠ j`.
pub fn loglik_power_j(
    lik: Likelihood,
    y: &[f64],
    g_j: &[f64],
    z: &[&[f64]],
    j: usize,
    offset: Option<&[f64]>,
    shared: SharedValues,
) -> Result<LikEval> {
    let num_clients = z.len();
    if j >= num_clients {
        return Err(Error::Shape(format!(
            "client index {j} out of {num_clients} blocks"
        )));
    }
    let mut parts: Vec<&[f64]> = Vec::with_capacity(num_clients);
    for (k, zk) in z.iter().enumerate() {
        parts.push(if k == j { g_j } else { zk });
    }
    let eta = linear_predictor(y.len(), shared.intercept, offset, &parts)?;
    let mut ev = lik.eval(y, &eta, shared.sigma)?;
    let w = 1.0 / num_clients as f64;
    ev.value *= w;
    ev.d_eta.iter_mut().for_each(|d| *d *= w);
    ev.d_intercept *= w;
    ev.d_sigma *= w;
    Ok(ev)
}
