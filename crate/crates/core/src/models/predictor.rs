use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::Mat;
use crate::neural::{mlp_backward, mlp_forward, ForwardTape, MlpParams, MlpSpec};

/// Layout of one client's parameter vector θ_j and the map `g_j(x_j, θ_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PredictorKind {
    /// `θ = β ∈ R^p`, `g = xβ`.
    Linear { p: usize },
    /// `θ = [β^0 … β^{L-1}, μ^0 … μ^{L-1}, ln σ^0 … ln σ^{L-1}]`, each block of
    /// length `p`; row `i` uses the slope of its own level.
    Multilevel { p: usize, levels: usize },
    /// `θ = w ∈ R^k`, `g = f_κ(x)·w`, where the feature network `f_κ` is a
    /// point-estimated parameter held next to the variational state.
    SplitNn { net: MlpSpec },
}

impl PredictorKind {
    pub fn theta_dim(&self) -> usize {
        match self {
            PredictorKind::Linear { p } => *p,
            PredictorKind::Multilevel { p, levels } => 3 * p * levels,
            PredictorKind::SplitNn { net } => net.output_dim(),
        }
    }

    /// Number of covariate columns this predictor consumes.
    pub fn input_dim(&self) -> usize {
        match self {
            PredictorKind::Linear { p } | PredictorKind::Multilevel { p, .. } => *p,
            PredictorKind::SplitNn { net } => net.input_dim(),
        }
    }

    /// Human-readable names for the components of θ_j, used in exports.
    pub fn param_names(&self, client: usize) -> Vec<String> {
        match self {
            PredictorKind::Linear { p } => (0..*p).map(|k| format!("beta_{client}_{k}")).collect(),
            PredictorKind::Multilevel { p, levels } => {
                let mut out = Vec::with_capacity(3 * p * levels);
                for prefix in ["beta", "mu", "log_sigma"] {
                    for r in 0..*levels {
                        for k in 0..*p {
                            out.push(format!("{prefix}_{client}_{k}_level{r}"));
                        }
                    }
                }
                out
            }
            PredictorKind::SplitNn { net } => {
                (0..net.output_dim()).map(|k| format!("w_{client}_{k}")).collect()
            }
        }
    }
}

/// Covariates a client evaluates its predictor on.
#[derive(Debug, Clone, Copy)]
pub struct ClientInputs<'a> {
    pub x: &'a Mat,
    pub group: Option<&'a [usize]>,
}

/// Predictor values plus whatever is needed for the backward pass.
#[derive(Debug, Clone)]
pub struct PredictorEval {
    pub g: Vec<f64>,
    features: Option<(Mat, ForwardTape)>,
}

impl PredictorEval {
    /// Feature-network output (split NN only).
    pub fn features(&self) -> Option<&Mat> {
        self.features.as_ref().map(|(h, _)| h)
    }
}

/// Gradients of `uᵀ g` for an upstream vector `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorVjp {
    pub theta: Vec<f64>,
    /// Gradient with respect to the flattened feature-network parameters.
    pub net: Option<Vec<f64>>,
}

fn check_inputs(kind: &PredictorKind, inputs: ClientInputs<'_>) -> Result<()> {
    check_len("block columns", kind.input_dim(), inputs.x.cols())?;
    if let PredictorKind::Multilevel { levels, .. } = kind {
        let group = inputs
            .group
            .ok_or_else(|| Error::Data("multilevel predictor needs group labels".into()))?;
        check_len("group labels", inputs.x.rows(), group.len())?;
        if let Some(i) = group.iter().position(|r| r >= levels) {
            return Err(Error::Data(format!(
                "group label {} at row {i} exceeds {levels} levels",
                group[i]
            )));
        }
    }
    Ok(())
}

/// `g_j(x_j, θ_j)`.
pub fn predictor(
    kind: &PredictorKind,
    inputs: ClientInputs<'_>,
    theta: &[f64],
    net: Option<&MlpParams>,
) -> Result<PredictorEval> {
    check_len("theta", kind.theta_dim(), theta.len())?;
    check_inputs(kind, inputs)?;
    let x = inputs.x;
    match kind {
        PredictorKind::Linear { .. } => Ok(PredictorEval {
            g: x.matvec(theta)?,
            features: None,
        }),
        PredictorKind::Multilevel { p, .. } => {
            let group = inputs.group.unwrap_or_default();
            let g = (0..x.rows())
                .map(|i| {
                    let beta = &theta[group[i] * p..(group[i] + 1) * p];
                    crate::math::linalg::dot(x.row(i), beta)
                })
                .collect();
            Ok(PredictorEval { g, features: None })
        }
        PredictorKind::SplitNn { net: spec } => {
            let params = net.ok_or_else(|| Error::Contract("split NN predictor needs feature-net params".into()))?;
            if &params.spec != spec {
                return Err(Error::Shape("feature-net params do not match the declared spec".into()));
            }
            let (h, tape) = mlp_forward(params, x)?;
            let g = h.matvec(theta)?;
            Ok(PredictorEval {
                g,
                features: Some((h, tape)),
            })
        }
    }
}

/// Vector-Jacobian product `(∂g/∂θ)ᵀu` and, for split NN, `(∂g/∂κ)ᵀu`.
pub fn predictor_vjp(
    kind: &PredictorKind,
    inputs: ClientInputs<'_>,
    theta: &[f64],
    net: Option<&MlpParams>,
    eval: &PredictorEval,
    upstream: &[f64],
) -> Result<PredictorVjp> {
    let x = inputs.x;
    check_len("upstream", x.rows(), upstream.len())?;
    match kind {
        PredictorKind::Linear { .. } => Ok(PredictorVjp {
            theta: x.t_matvec(upstream)?,
            net: None,
        }),
        PredictorKind::Multilevel { p, .. } => {
            let group = inputs
                .group
                .ok_or_else(|| Error::Data("multilevel predictor needs group labels".into()))?;
            let mut d = vec![0.0; kind.theta_dim()];
            for i in 0..x.rows() {
                let r = group[i];
                crate::math::linalg::axpy(upstream[i], x.row(i), &mut d[r * p..(r + 1) * p]);
            }
            Ok(PredictorVjp { theta: d, net: None })
        }
        PredictorKind::SplitNn { .. } => {
            let params = net.ok_or_else(|| Error::Contract("split NN predictor needs feature-net params".into()))?;
            let (h, tape) = eval
                .features
                .as_ref()
                .ok_or_else(|| Error::Contract("predictor evaluation carries no feature tape".into()))?;
            let d_theta = h.t_matvec(upstream)?;
            let k = theta.len();
            let mut up = Mat::zeros(x.rows(), k);
            for i in 0..x.rows() {
                for (c, w) in theta.iter().enumerate() {
                    up[(i, c)] = upstream[i] * w;
                }
            }
            let grads = mlp_backward(params, tape, &up)?;
            Ok(PredictorVjp {
                theta: d_theta,
                net: Some(grads.params),
            })
        }
    }
}
