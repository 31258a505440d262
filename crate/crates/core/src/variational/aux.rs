use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{positive, positive_grad, positive_inv, Mat, RngStream, HALF_LN_2PI};
use crate::neural::{mlp_backward, mlp_forward, Activation, ForwardTape, MlpParams, MlpSpec};

/// What the amortization network sees for each observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmortizedInput {
    /// `g_ij` only (augmented-variable model).
    Predictor,
    /// `(g_ij, y_i)` (power-likelihood model).
    PredictorAndY,
}

impl AmortizedInput {
    pub fn width(self) -> usize {
        match self {
            AmortizedInput::Predictor => 1,
            AmortizedInput::PredictorAndY => 2,
        }
    }
}

/// Variational factor for one client's auxiliary vector `z_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AuxFactor {
    /// `q(z_j) = N(μ, σ)` with per-observation parameters.
    MeanField { mean: Vec<f64>, raw_scale: Vec<f64> },
    /// `q(z_j | θ_j) = N(m(u_i), σ(u_i))` per row with `u_i` the network input;
    /// output column 0 is the mean, column 1 the unconstrained scale.
    Amortized { net: MlpParams, input: AmortizedInput },
}

impl AuxFactor {
    pub fn mean_field(n: usize, scale: f64) -> Self {
        AuxFactor::MeanField {
            mean: vec![0.0; n],
            raw_scale: vec![positive_inv(scale); n],
        }
    }

    /// Network `[input, hidden…, 2]` with standard initialization and the
    /// scale-head bias set so that σ starts at `scale`.
    pub fn amortized(
        hidden: &[usize],
        activation: Activation,
        input: AmortizedInput,
        scale: f64,
        stream: &mut RngStream,
    ) -> Result<Self> {
        let mut widths = vec![input.width()];
        widths.extend(hidden);
        widths.push(2);
        let spec = MlpSpec::new(widths, activation);
        let mut net = MlpParams::init(&spec, stream)?;
        net.layers.last_mut().unwrap().bias[1] = positive_inv(scale);
        Ok(AuxFactor::Amortized { net, input })
    }

    pub fn param_count(&self) -> usize {
        match self {
            AuxFactor::MeanField { mean, raw_scale } => mean.len() + raw_scale.len(),
            AuxFactor::Amortized { net, .. } => net.param_count(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        match self {
            AuxFactor::MeanField { mean, raw_scale } => mean.iter().chain(raw_scale).copied().collect(),
            AuxFactor::Amortized { net, .. } => net.flatten(),
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("aux factor params", self.param_count(), flat.len())?;
        match self {
            AuxFactor::MeanField { mean, raw_scale } => {
                let n = mean.len();
                mean.copy_from_slice(&flat[..n]);
                raw_scale.copy_from_slice(&flat[n..]);
                Ok(())
            }
            AuxFactor::Amortized { net, .. } => net.set_flat(flat),
        }
    }

    fn inputs(input: AmortizedInput, pred: &[f64], y: Option<&[f64]>) -> Result<Mat> {
        let n = pred.len();
        match (input, y) {
            (AmortizedInput::Predictor, _) => Ok(Mat::column(pred)),
            (AmortizedInput::PredictorAndY, Some(y)) => {
                check_len("response", n, y.len())?;
                let mut m = Mat::zeros(n, 2);
                for i in 0..n {
                    m[(i, 0)] = pred[i];
                    m[(i, 1)] = y[i];
                }
                Ok(m)
            }
            (AmortizedInput::PredictorAndY, None) => Err(Error::Contract(
                "amortized factor takes (predictor, y) but no response was given".into(),
            )),
        }
    }

    /// Reparameterized draw `z = m + σ ⊙ τ`.
    pub fn sample(&self, pred: &[f64], y: Option<&[f64]>, tau: &[f64]) -> Result<AuxDraw> {
        check_len("aux noise", pred.len(), tau.len())?;
        match self {
            AuxFactor::MeanField { mean, raw_scale } => {
                check_len("mean-field aux dimension", mean.len(), pred.len())?;
                let sigma: Vec<f64> = raw_scale.iter().map(|&r| positive(r)).collect();
                let z = (0..tau.len()).map(|i| mean[i] + sigma[i] * tau[i]).collect();
                Ok(AuxDraw {
                    z,
                    mean: mean.clone(),
                    sigma,
                    raw_scale: raw_scale.clone(),
                    tape: None,
                })
            }
            AuxFactor::Amortized { net, input } => {
                let x = Self::inputs(*input, pred, y)?;
                let (out, tape) = mlp_forward(net, &x)?;
                let n = pred.len();
                let mut mean = Vec::with_capacity(n);
                let mut raw = Vec::with_capacity(n);
                for i in 0..n {
                    mean.push(out[(i, 0)]);
                    raw.push(out[(i, 1)]);
                }
                let sigma: Vec<f64> = raw.iter().map(|&r| positive(r)).collect();
                let z = (0..n).map(|i| mean[i] + sigma[i] * tau[i]).collect();
                Ok(AuxDraw {
                    z,
                    mean,
                    sigma,
                    raw_scale: raw,
                    tape: Some(tape),
                })
            }
        }
    }
}

/// One draw from an [`AuxFactor`] with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct AuxDraw {
    pub z: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub raw_scale: Vec<f64>,
    tape: Option<ForwardTape>,
}

impl AuxDraw {
    /// `log q(z | ·)` at the drawn point.
    pub fn log_density(&self) -> f64 {
        self.z
            .iter()
            .zip(&self.mean)
            .zip(&self.sigma)
            .map(|((z, m), s)| {
                let r = (z - m) / s;
                -HALF_LN_2PI - s.ln() - 0.5 * r * r
            })
            .sum()
    }

    /// `∂/∂z [−log q̄(z)]` with the factor held fixed: `τ / σ`.
    pub fn stl_entropy_grad(&self, tau: &[f64]) -> Vec<f64> {
        tau.iter().zip(&self.sigma).map(|(t, s)| t / s).collect()
    }
}

/// Result of pulling the z-path gradient back through an aux factor.
#[derive(Debug, Clone)]
pub struct AuxPullback {
    /// Gradient for the flattened factor parameters.
    pub params: Vec<f64>,
    /// Gradient reaching the predictor `g` (zero for mean-field): the
    /// z-path `(∂m/∂g + τ ∂σ/∂g) ⊙ G_z` plus the conditioning path of
    /// `−log q̄(z | g)`.
    pub d_pred: Vec<f64>,
}

impl AuxFactor {
    /// Back-propagates `G_z = ∂L/∂z` through `z = m + σ τ`, and adds the
    /// dependence of `−log q̄(z | g)` on its conditioning input.
    pub fn pullback(&self, draw: &AuxDraw, tau: &[f64], g_z: &[f64]) -> Result<AuxPullback> {
        let n = draw.z.len();
        check_len("z gradient", n, g_z.len())?;
        match self {
            AuxFactor::MeanField { raw_scale, .. } => {
                let mut params = Vec::with_capacity(2 * n);
                params.extend(g_z);
                for i in 0..n {
                    params.push(g_z[i] * tau[i] * positive_grad(raw_scale[i]));
                }
                Ok(AuxPullback {
                    params,
                    d_pred: vec![0.0; n],
                })
            }
            AuxFactor::Amortized { net, .. } => {
                let tape = draw
                    .tape
                    .as_ref()
                    .ok_or_else(|| Error::Contract("amortized draw carries no tape".into()))?;
                let mut up_z = Mat::zeros(n, 2);
                let mut up_q = Mat::zeros(n, 2);
                for i in 0..n {
                    let dsig = positive_grad(draw.raw_scale[i]);
                    let s = draw.sigma[i];
                    up_z[(i, 0)] = g_z[i];
                    up_z[(i, 1)] = g_z[i] * tau[i] * dsig;
                    // −log N(z; m, s): ∂/∂m = −τ/s, ∂/∂s = (1 − τ²)/s
                    up_q[(i, 0)] = -tau[i] / s;
                    up_q[(i, 1)] = (1.0 - tau[i] * tau[i]) / s * dsig;
                }
                let through_z = mlp_backward(net, tape, &up_z)?;
                let through_q = mlp_backward(net, tape, &up_q)?;
                let d_pred = (0..n)
                    .map(|i| through_z.inputs[(i, 0)] + through_q.inputs[(i, 0)])
                    .collect();
                Ok(AuxPullback {
                    params: through_z.params,
                    d_pred,
                })
            }
        }
    }
}
