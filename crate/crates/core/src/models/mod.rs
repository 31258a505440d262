//! Target densities: the true models, their augmented-variable forms and
//! their power-likelihood forms.

pub mod likelihood;
pub mod predictor;
pub mod prior;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::linalg::{cholesky, solve_lower, spd_inverse};
use crate::math::{gaussian_logpdf, gaussian_logpdf_grads, Mat, Scale, HALF_LN_2PI};
use crate::neural::{Activation, MlpSpec};

pub use likelihood::{linear_predictor, loglik_aux, loglik_power_j, LikEval, Likelihood, SharedValues};
pub use predictor::{predictor, predictor_vjp, ClientInputs, PredictorEval, PredictorKind, PredictorVjp};
pub use prior::{half_normal_logpdf, log_prior, PriorSpec, ScalarPrior};

/// Response plus vertically partitioned covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<f64>,
    /// One `n × p_j` block per client.
    pub blocks: Vec<Mat>,
    pub offset: Option<Vec<f64>>,
    /// 0-based level index per row.
    pub group: Option<Vec<usize>>,
    /// Declared number of levels for `group`.
    pub levels: Option<usize>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, blocks: Vec<Mat>) -> Result<Self> {
        let d = Self {
            y,
            blocks,
            offset: None,
            group: None,
            levels: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn num_clients(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Mat::cols).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.blocks.is_empty() {
            return Err(Error::Data("dataset has no covariate blocks".into()));
        }
        for (j, b) in self.blocks.iter().enumerate() {
            check_len(&format!("rows of block {j}"), n, b.rows())?;
            crate::error::check_finite(&format!("block {j}"), b.as_slice())?;
        }
        if let Some(off) = &self.offset {
            check_len("offset", n, off.len())?;
            crate::error::check_finite("offset", off)?;
        }
        match (&self.group, self.levels) {
            (Some(g), Some(levels)) => {
                check_len("group", n, g.len())?;
                if let Some(i) = g.iter().position(|&r| r >= levels) {
                    return Err(Error::Data(format!(
                        "group[{i}] = {} outside {levels} declared levels",
                        g[i]
                    )));
                }
            }
            (Some(_), None) => return Err(Error::Data("group labels without a level count".into())),
            _ => {}
        }
        Ok(())
    }

    pub fn client_inputs(&self, j: usize) -> ClientInputs<'_> {
        ClientInputs {
            x: &self.blocks[j],
            group: self.group.as_deref(),
        }
    }

    /// All covariates side by side.
    pub fn full_design(&self) -> Result<Mat> {
        Mat::hcat(&self.blocks)
    }

    /// Row subset in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            blocks: self.blocks.iter().map(|b| b.select_rows(idx)).collect(),
            offset: self.offset.as_ref().map(|o| idx.iter().map(|&i| o[i]).collect()),
            group: self.group.as_ref().map(|g| idx.iter().map(|&i| g[i]).collect()),
            levels: self.levels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    LinearGaussian,
    Logistic,
    PoissonMultilevel,
    SplitnnBernoulli,
}

impl Family {
    pub fn likelihood(self) -> Likelihood {
        match self {
            Family::LinearGaussian => Likelihood::Gaussian,
            Family::Logistic | Family::SplitnnBernoulli => Likelihood::Bernoulli,
            Family::PoissonMultilevel => Likelihood::Poisson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    True,
    Augmented,
    Power,
}

/// How a shared scalar (intercept or Gaussian σ) is treated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SharedParam {
    #[default]
    Absent,
    Fixed {
        value: f64,
    },
    /// Learned by a server-held Gaussian factor. For σ the factor lives on
    /// `ln σ` and `init` is on the natural scale.
    Learned {
        prior: ScalarPrior,
        init: f64,
    },
}

impl SharedParam {
    pub fn is_learned(&self) -> bool {
        matches!(self, SharedParam::Learned { .. })
    }
}

/// Client feature network for the split NN family; the input width comes from
/// each client's block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureNet {
    pub hidden: Vec<usize>,
    pub output: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "tanh")]
    pub output_activation: Activation,
}

fn tanh() -> Activation {
    Activation::Tanh
}

impl Default for FeatureNet {
    fn default() -> Self {
        Self {
            hidden: vec![8, 8],
            output: 2,
            activation: Activation::Tanh,
            output_activation: Activation::Tanh,
        }
    }
}

impl FeatureNet {
    pub fn spec(&self, input: usize) -> MlpSpec {
        let mut widths = vec![input];
        widths.extend(&self.hidden);
        widths.push(self.output);
        MlpSpec::new(widths, self.activation).with_output(self.output_activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub formulation: Formulation,
    #[serde(default)]
    pub rho: Option<f64>,
    /// Prior applied to every client unless overridden in `client_priors`.
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub client_priors: Vec<PriorSpec>,
    #[serde(default)]
    pub intercept: SharedParam,
    #[serde(default)]
    pub sigma: SharedParam,
    #[serde(default)]
    pub feature_net: Option<FeatureNet>,
}

impl ModelSpec {
    pub fn new(family: Family, formulation: Formulation, rho: Option<f64>) -> Self {
        let prior = match family {
            Family::PoissonMultilevel => PriorSpec::Hierarchical {
                mean_sd: 1.0,
                scale: 1.0,
            },
            _ => PriorSpec::default(),
        };
        Self {
            family,
            formulation,
            rho,
            prior,
            client_priors: Vec::new(),
            intercept: SharedParam::Absent,
            sigma: match family {
                Family::LinearGaussian => SharedParam::Fixed { value: 1.0 },
                _ => SharedParam::Absent,
            },
            feature_net: match family {
                Family::SplitnnBernoulli => Some(FeatureNet::default()),
                _ => None,
            },
        }
    }

    /// The `b ~ N(0, 1)` intercept used in the logistic and Poisson examples.
    pub fn with_learned_intercept(mut self) -> Self {
        self.intercept = SharedParam::Learned {
            prior: ScalarPrior::Normal { mean: 0.0, sd: 1.0 },
            init: 0.0,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.formulation, self.rho) {
            (Formulation::True, Some(_)) => {
                return Err(Error::Config("rho is not used by the true model; remove it".into()))
            }
            (Formulation::Augmented | Formulation::Power, None) => {
                return Err(Error::Config("augmented and power formulations require rho".into()))
            }
            (_, Some(r)) if !(r > 0.0 && r.is_finite()) => {
                return Err(Error::Config(format!("rho must be > 0, got {r}")))
            }
            _ => {}
        }
        match (self.family, self.sigma) {
            (Family::LinearGaussian, SharedParam::Absent) => {
                return Err(Error::Config("linear-gaussian needs sigma (fixed or learned)".into()))
            }
            (Family::LinearGaussian, SharedParam::Fixed { value }) if !(value > 0.0) => {
                return Err(Error::Config(format!("sigma must be > 0, got {value}")))
            }
            (Family::LinearGaussian, SharedParam::Learned { prior, init }) => {
                if !(init > 0.0) {
                    return Err(Error::Config(format!("sigma init must be > 0, got {init}")));
                }
                if let ScalarPrior::Normal { .. } = prior {
                    return Err(Error::Config(
                        "sigma is learned on the log scale; use a half-normal or flat prior".into(),
                    ));
                }
            }
            (Family::LinearGaussian, _) => {}
            (_, SharedParam::Absent) => {}
            _ => return Err(Error::Config("sigma is only defined for linear-gaussian".into())),
        }
        if let SharedParam::Learned { prior: ScalarPrior::HalfNormal { .. }, .. } = self.intercept {
            return Err(Error::Config("intercept cannot take a half-normal prior".into()));
        }
        match (self.family, &self.feature_net) {
            (Family::SplitnnBernoulli, None) => {
                return Err(Error::Config("splitnn-bernoulli needs a feature_net".into()))
            }
            (Family::SplitnnBernoulli, Some(_)) => {}
            (_, Some(_)) => return Err(Error::Config("feature_net is only used by splitnn-bernoulli".into())),
            _ => {}
        }
        Ok(())
    }

    /// Validates the spec against a dataset's shape.
    pub fn validate_for(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        data.validate()?;
        self.family.likelihood().validate_response(&data.y)?;
        if self.family == Family::PoissonMultilevel && (data.offset.is_none() || data.group.is_none()) {
            return Err(Error::Data("poisson-multilevel requires offset and group labels".into()));
        }
        if !self.client_priors.is_empty() && self.client_priors.len() != data.num_clients() {
            return Err(Error::Config(format!(
                "{} client priors for {} clients",
                self.client_priors.len(),
                data.num_clients()
            )));
        }
        Ok(())
    }

    pub fn rho(&self) -> Result<f64> {
        self.rho
            .ok_or_else(|| Error::Config("formulation has no rho".into()))
    }

    pub fn prior_for(&self, j: usize) -> &PriorSpec {
        self.client_priors.get(j).unwrap_or(&self.prior)
    }

    pub fn predictor_kind(&self, data: &Dataset, j: usize) -> Result<PredictorKind> {
        let p = data.blocks[j].cols();
        Ok(match self.family {
            Family::LinearGaussian | Family::Logistic => PredictorKind::Linear { p },
            Family::PoissonMultilevel => PredictorKind::Multilevel {
                p,
                levels: data
                    .levels
                    .ok_or_else(|| Error::Data("multilevel data needs a level count".into()))?,
            },
            Family::SplitnnBernoulli => {
                let net = self
                    .feature_net
                    .as_ref()
                    .ok_or_else(|| Error::Config("splitnn-bernoulli needs a feature_net".into()))?
                    .spec(p);
                net.validate()?;
                PredictorKind::SplitNn { net }
            }
        })
    }

    pub fn predictor_kinds(&self, data: &Dataset) -> Result<Vec<PredictorKind>> {
        (0..data.num_clients()).map(|j| self.predictor_kind(data, j)).collect()
    }
}

/// `log N(z_j; g_j, ρ)` with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxConditional {
    pub value: f64,
    pub d_z: Vec<f64>,
    pub d_pred: Vec<f64>,
    pub d_rho: f64,
}

pub fn log_aux_conditional(z: &[f64], pred: &[f64], rho: f64) -> Result<AuxConditional> {
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("rho must be > 0, got {rho}")));
    }
    let value = gaussian_logpdf(z, pred, Scale::Scalar(rho))?;
    let g = gaussian_logpdf_grads(z, pred, Scale::Scalar(rho))?;
    Ok(AuxConditional {
        value,
        d_z: g.d_x,
        d_pred: g.d_mean,
        d_rho: g.d_scale.iter().sum(),
    })
}

/// Multivariate Gaussian given by mean and covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl GaussianPosterior {
    pub fn std(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.cov[(i, i)].sqrt()).collect()
    }
}

pub(crate) fn normal_priors(data: &Dataset, priors: &[PriorSpec]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut m0 = Vec::new();
    let mut v0 = Vec::new();
    for (j, b) in data.blocks.iter().enumerate() {
        let pr = if priors.len() == 1 { &priors[0] } else { priors.get(j).ok_or_else(|| {
            Error::Config(format!("{} priors for {} clients", priors.len(), data.num_clients()))
        })? };
        match pr {
            PriorSpec::Normal { mean, sd } => {
                m0.extend(std::iter::repeat_n(*mean, b.cols()));
                v0.extend(std::iter::repeat_n(sd * sd, b.cols()));
            }
            _ => return Err(Error::Contract("conjugate posterior needs Gaussian priors".into())),
        }
    }
    Ok((m0, v0))
}

/// Exact θ-marginal of the augmented linear-Gaussian model. Integrating each
/// `z_j` out gives `y | θ ~ N(offset + Σ_j x_j β_j, σ² + Jρ²)`, which is
/// conjugate under Gaussian priors. `rho = 0` gives the true-model posterior.
///
/// `priors` holds one spec per client or a single spec for all clients.
pub fn marginalized_posterior_linear(
    data: &Dataset,
    priors: &[PriorSpec],
    sigma: f64,
    rho: f64,
) -> Result<GaussianPosterior> {
    if !(sigma > 0.0) || !(rho >= 0.0) {
        return Err(Error::Domain(format!("need sigma > 0 and rho >= 0, got {sigma}, {rho}")));
    }
    let (m0, v0) = normal_priors(data, priors)?;
    let x = data.full_design()?;
    let var = sigma * sigma + data.num_clients() as f64 * rho * rho;
    let mut resid = data.y.clone();
    if let Some(off) = &data.offset {
        for (r, o) in resid.iter_mut().zip(off) {
            *r -= o;
        }
    }
    let mut precision = x.gram();
    let d = precision.rows();
    for i in 0..d {
        for k in 0..d {
            precision[(i, k)] /= var;
        }
        precision[(i, i)] += 1.0 / v0[i];
    }
    let xty = x.t_matvec(&resid)?;
    let rhs: Vec<f64> = (0..d).map(|i| xty[i] / var + m0[i] / v0[i]).collect();
    let cov = spd_inverse(&precision)?;
    let mean = cov.matvec(&rhs)?;
    Ok(GaussianPosterior { mean, cov })
}

/// `log p(y)` for the same marginal model.
pub fn log_evidence_linear(data: &Dataset, priors: &[PriorSpec], sigma: f64, rho: f64) -> Result<f64> {
    let (m0, v0) = normal_priors(data, priors)?;
    let x = data.full_design()?;
    let n = data.n();
    let var = sigma * sigma + data.num_clients() as f64 * rho * rho;
    // y ~ N(x m0 + offset, var I + x diag(v0) xᵀ)
    let mut cov = Mat::zeros(n, n);
    for a in 0..n {
        for b in 0..=a {
            let s: f64 = (0..x.cols()).map(|k| x[(a, k)] * v0[k] * x[(b, k)]).sum();
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
        cov[(a, a)] += var;
    }
    let mut r = data.y.clone();
    let mean = x.matvec(&m0)?;
    for i in 0..n {
        r[i] -= mean[i] + data.offset.as_ref().map_or(0.0, |o| o[i]);
    }
    let l = cholesky(&cov)?;
    let w = solve_lower(&l, &r)?;
    let logdet: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    Ok(-(n as f64) * HALF_LN_2PI - logdet - 0.5 * w.iter().map(|v| v * v).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::RngStream;

    fn random_data(seed: u64, n: usize, sizes: &[usize]) -> Dataset {
        let mut s = RngStream::new(seed, 0);
        let blocks = sizes
            .iter()
            .map(|&p| Mat::from_vec(n, p, s.standard_normal(n * p)).unwrap())
            .collect();
        Dataset::new(s.standard_normal(n), blocks).unwrap()
    }

    #[test]
    fn scalar_conjugacy() {
        let d = Dataset::new(vec![1.4], vec![Mat::column(&[1.0])]).unwrap();
        let post = marginalized_posterior_linear(&d, &[PriorSpec::default()], 1.0, 0.0).unwrap();
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((post.mean[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn textbook_conjugate_formula() {
        // Independent oracle: nalgebra with the standard (XᵀX/σ² + I)⁻¹ form.
        let d = random_data(5, 30, &[2, 3]);
        let sigma = 0.8;
        let post = marginalized_posterior_linear(&d, &[PriorSpec::default()], sigma, 0.0).unwrap();
        let x = d.full_design().unwrap();
        let xm = nalgebra::DMatrix::from_row_slice(30, 5, x.as_slice());
        let y = nalgebra::DVector::from_vec(d.y.clone());
        let prec = xm.transpose() * &xm / (sigma * sigma) + nalgebra::DMatrix::identity(5, 5);
        let cov = prec.try_inverse().unwrap();
        let mean = &cov * xm.transpose() * y / (sigma * sigma);
        for i in 0..5 {
            assert!((post.mean[i] - mean[i]).abs() < 1e-10);
            for k in 0..5 {
                assert!((post.cov[(i, k)] - cov[(i, k)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rho_inflates_variance() {
        let d = random_data(6, 40, &[2, 2]);
        let pr = [PriorSpec::default()];
        let mut prev = marginalized_posterior_linear(&d, &pr, 1.0, 0.0).unwrap().std();
        for rho in [0.1, 0.5, 1.0, 2.0] {
            let s = marginalized_posterior_linear(&d, &pr, 1.0, rho).unwrap().std();
            assert!(s.iter().zip(&prev).all(|(a, b)| a > b));
            prev = s;
        }
    }

    #[test]
    fn small_rho_close_to_true_posterior() {
        let d = random_data(7, 100, &[3, 3]);
        let pr = [PriorSpec::default()];
        let a = marginalized_posterior_linear(&d, &pr, 1.0, 0.01).unwrap();
        let b = marginalized_posterior_linear(&d, &pr, 1.0, 0.0).unwrap();
        let err = a.mean.iter().zip(&b.mean).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3);
    }

    #[test]
    fn evidence_matches_single_observation() {
        // y ~ N(0, 1 + x²) with x = 2, σ = 1, ρ = 0
        let d = Dataset::new(vec![0.5], vec![Mat::column(&[2.0])]).unwrap();
        let v = log_evidence_linear(&d, &[PriorSpec::default()], 1.0, 0.0).unwrap();
        let want = -HALF_LN_2PI - 0.5 * 5f64.ln() - 0.5 * 0.25 / 5.0;
        assert!((v - want).abs() < 1e-14);
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(Family::Logistic, Formulation::Augmented, None).validate().is_err());
        assert!(ModelSpec::new(Family::Logistic, Formulation::True, Some(1.0)).validate().is_err());
        assert!(ModelSpec::new(Family::Logistic, Formulation::Power, Some(0.0)).validate().is_err());
        assert!(ModelSpec::new(Family::Logistic, Formulation::Power, Some(1.0)).validate().is_ok());
        let spec = ModelSpec::new(Family::PoissonMultilevel, Formulation::Augmented, Some(1.0));
        let d = Dataset::new(vec![1.0, 2.0], vec![Mat::column(&[0.1, 0.2])]).unwrap();
        assert!(spec.validate_for(&d).is_err());
    }

    #[test]
    fn aux_conditional_grads() {
        let z = [0.3, -1.0];
        let g = [0.1, 0.4];
        let a = log_aux_conditional(&z, &g, 0.5).unwrap();
        let h = 1e-6;
        let fd = (log_aux_conditional(&z, &g, 0.5 + h).unwrap().value
            - log_aux_conditional(&z, &g, 0.5 - h).unwrap().value)
            / (2.0 * h);
        assert!((fd - a.d_rho).abs() < 1e-7);
        assert_eq!(a.d_z[0], -a.d_pred[0]);
        assert!(log_aux_conditional(&z, &g, 0.0).is_err());
    }
}
