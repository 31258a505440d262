//! Reference posteriors that need no sampling: the conjugate linear model
//! (with auxiliary variables integrated out) and trapezoid quadrature for
//! logistic models with at most two free parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::linalg::{dot, spd_inverse, spd_solve};
use crate::math::{sigmoid, softplus, Mat};
use crate::models::{
    marginalized_posterior_linear, Dataset, Family, GaussianPosterior, ModelSpec, PriorSpec, ScalarPrior, SharedParam,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoPosterior {
    pub rho: f64,
    pub posterior: GaussianPosterior,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearOracle {
    pub sigma: f64,
    pub names: Vec<String>,
    /// ρ = 0: the posterior of the model without auxiliary variables.
    pub exact: RhoPosterior,
    /// In the order given.
    pub sweep: Vec<RhoPosterior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOracle {
    pub names: Vec<String>,
    pub points: usize,
    /// `[lo, hi]` per axis: the mode ± 8 Laplace standard deviations.
    pub bounds: Vec<(f64, f64)>,
    pub mode: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// `log ∫ exp(log posterior)` over the grid.
    pub log_normalizer: f64,
    /// Trapezoid integral of the normalized density on the grid with every
    /// other point dropped; 1 up to quadrature error.
    pub half_grid_integral: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum OracleReport {
    Linear(LinearOracle),
    Grid(GridOracle),
}

fn theta_names(spec: &ModelSpec, data: &Dataset) -> Result<Vec<String>> {
    Ok(spec
        .predictor_kinds(data)?
        .iter()
        .enumerate()
        .flat_map(|(j, k)| k.param_names(j))
        .collect())
}

fn client_priors(spec: &ModelSpec, data: &Dataset) -> Vec<PriorSpec> {
    (0..data.num_clients()).map(|j| spec.prior_for(j).clone()).collect()
}

/// Exact posteriors of β for ρ = 0 and each `rhos` value.
pub fn linear_oracle(spec: &ModelSpec, data: &Dataset, rhos: &[f64]) -> Result<LinearOracle> {
    if spec.family != Family::LinearGaussian {
        return Err(Error::Config("the conjugate oracle needs the linear-gaussian family".into()));
    }
    let sigma = match spec.sigma {
        SharedParam::Fixed { value } => value,
        _ => return Err(Error::Config("the conjugate oracle needs a fixed sigma".into())),
    };
    let mut data = data.clone();
    match spec.intercept {
        SharedParam::Absent => {}
        SharedParam::Fixed { value } => data.y.iter_mut().for_each(|y| *y -= value),
        SharedParam::Learned { .. } => {
            return Err(Error::Config("the conjugate oracle needs a fixed or absent intercept".into()))
        }
    }
    let priors = client_priors(spec, &data);
    let at = |rho: f64| -> Result<RhoPosterior> {
        let posterior = marginalized_posterior_linear(&data, &priors, sigma, rho)?;
        Ok(RhoPosterior {
            rho,
            std: posterior.std(),
            posterior,
        })
    };
    Ok(LinearOracle {
        sigma,
        names: theta_names(spec, &data)?,
        exact: at(0.0)?,
        sweep: rhos.iter().map(|&r| at(r)).collect::<Result<_>>()?,
    })
}

/// Log posterior of a logistic model in `θ = [β, b?]` with Gaussian priors.
struct LogisticPosterior {
    /// Rows `[x_i, 1?]`.
    design: Mat,
    y: Vec<f64>,
    offset: Vec<f64>,
    prior_mean: Vec<f64>,
    /// `1/sd²`, 0 for a flat prior.
    prior_prec: Vec<f64>,
    prior_const: f64,
}

impl LogisticPosterior {
    fn new(spec: &ModelSpec, data: &Dataset) -> Result<(Self, Vec<String>)> {
        let mut names = theta_names(spec, data)?;
        let x = data.full_design()?;
        let mut mean = Vec::new();
        let mut prec = Vec::new();
        for (j, b) in data.blocks.iter().enumerate() {
            match spec.prior_for(j) {
                PriorSpec::Normal { mean: m, sd } => {
                    mean.extend(std::iter::repeat_n(*m, b.cols()));
                    prec.extend(std::iter::repeat_n(1.0 / (sd * sd), b.cols()));
                }
                _ => return Err(Error::Config("the grid oracle needs Gaussian coefficient priors".into())),
            }
        }
        let mut offset = data.offset.clone().unwrap_or_else(|| vec![0.0; data.n()]);
        let learned = match spec.intercept {
            SharedParam::Absent => false,
            SharedParam::Fixed { value } => {
                offset.iter_mut().for_each(|o| *o += value);
                false
            }
            SharedParam::Learned { prior, .. } => {
                match prior {
                    ScalarPrior::Normal { mean: m, sd } => {
                        mean.push(m);
                        prec.push(1.0 / (sd * sd));
                    }
                    ScalarPrior::Flat => {
                        mean.push(0.0);
                        prec.push(0.0);
                    }
                    ScalarPrior::HalfNormal { .. } => {
                        return Err(Error::Config("intercept cannot take a half-normal prior".into()))
                    }
                }
                names.push("intercept".into());
                true
            }
        };
        let d = x.cols() + usize::from(learned);
        let mut design = Mat::zeros(data.n(), d);
        for i in 0..data.n() {
            design.row_mut(i)[..x.cols()].copy_from_slice(x.row(i));
            if learned {
                design[(i, d - 1)] = 1.0;
            }
        }
        let prior_const = prec
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| 0.5 * (p / (2.0 * std::f64::consts::PI)).ln())
            .sum();
        Ok((
            Self {
                design,
                y: data.y.clone(),
                offset,
                prior_mean: mean,
                prior_prec: prec,
                prior_const,
            },
            names,
        ))
    }

    fn dim(&self) -> usize {
        self.design.cols()
    }

    fn log_density(&self, t: &[f64]) -> f64 {
        let mut v = self.prior_const;
        for k in 0..t.len() {
            v -= 0.5 * self.prior_prec[k] * (t[k] - self.prior_mean[k]).powi(2);
        }
        for i in 0..self.y.len() {
            let eta = self.offset[i] + dot(self.design.row(i), t);
            v += self.y[i] * eta - softplus(eta);
        }
        v
    }

    fn grad_hess(&self, t: &[f64]) -> (Vec<f64>, Mat) {
        let d = t.len();
        let mut g: Vec<f64> = (0..d).map(|k| -self.prior_prec[k] * (t[k] - self.prior_mean[k])).collect();
        let mut h = Mat::zeros(d, d);
        for k in 0..d {
            h[(k, k)] = self.prior_prec[k];
        }
        for i in 0..self.y.len() {
            let a = self.design.row(i);
            let p = sigmoid(self.offset[i] + dot(a, t));
            for k in 0..d {
                g[k] += (self.y[i] - p) * a[k];
                for l in 0..d {
                    h[(k, l)] += p * (1.0 - p) * a[k] * a[l];
                }
            }
        }
        // h is the negative Hessian
        (g, h)
    }

    /// Newton's method for the mode; returns it with the negative Hessian.
    fn mode(&self) -> Result<(Vec<f64>, Mat)> {
        let mut t = vec![0.0; self.dim()];
        for _ in 0..200 {
            let (g, h) = self.grad_hess(&t);
            let step = spd_solve(&h, &g)
                .map_err(|_| Error::Numerical {
                    iteration: 0,
                    actor: "oracle".into(),
                    detail: "posterior curvature is singular (separable data with a flat prior?)".into(),
                })?;
            t.iter_mut().zip(&step).for_each(|(a, s)| *a += s);
            if step.iter().all(|s| s.abs() < 1e-12) {
                let (_, h) = self.grad_hess(&t);
                return Ok((t, h));
            }
        }
        Err(Error::Numerical {
            iteration: 200,
            actor: "oracle".into(),
            detail: "Newton iterations for the posterior mode did not converge".into(),
        })
    }
}

fn trapezoid_weights(points: usize, step: f64) -> Vec<f64> {
    (0..points)
        .map(|i| if i == 0 || i + 1 == points { 0.5 * step } else { step })
        .collect()
}

/// Quadrature posterior of a logistic model (true likelihood, no auxiliary
/// variables) with one or two free parameters.
pub fn logistic_grid(spec: &ModelSpec, data: &Dataset, points: usize) -> Result<GridOracle> {
    if spec.family != Family::Logistic {
        return Err(Error::Config("the grid oracle needs the logistic family".into()));
    }
    if points < 3 || points % 2 == 0 {
        return Err(Error::Config("grid points must be odd and >= 3".into()));
    }
    let (post, names) = LogisticPosterior::new(spec, data)?;
    let d = post.dim();
    if d == 0 || d > 2 {
        return Err(Error::Config(format!(
            "grid quadrature supports 1 or 2 free parameters, this model has {d}"
        )));
    }
    let (mode, neg_hess) = post.mode()?;
    let laplace = spd_inverse(&neg_hess)?;
    let bounds: Vec<(f64, f64)> = (0..d)
        .map(|k| {
            let s = laplace[(k, k)].sqrt();
            (mode[k] - 8.0 * s, mode[k] + 8.0 * s)
        })
        .collect();
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|(lo, hi)| (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect())
        .collect();
    let steps: Vec<f64> = bounds.iter().map(|(lo, hi)| (hi - lo) / (points - 1) as f64).collect();

    // (point, log density) over the tensor grid, axis 0 slowest
    let nodes: Vec<(Vec<usize>, f64, Vec<f64>)> = (0..points.pow(d as u32))
        .map(|flat| {
            let ix: Vec<usize> = (0..d).rev().map(|k| flat / points.pow(k as u32) % points).collect();
            let t: Vec<f64> = (0..d).map(|k| axes[k][ix[k]]).collect();
            (ix, post.log_density(&t), t)
        })
        .collect();
    let top = nodes.iter().map(|n| n.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<Vec<f64>> = steps.iter().map(|&h| trapezoid_weights(points, h)).collect();
    let half = (points + 1) / 2;
    let half_weights: Vec<Vec<f64>> = steps.iter().map(|&h| trapezoid_weights(half, 2.0 * h)).collect();

    let mut z = 0.0;
    let mut m1 = vec![0.0; d];
    let mut m2 = vec![vec![0.0; d]; d];
    for (ix, lp, t) in &nodes {
        let w: f64 = (0..d).map(|k| weights[k][ix[k]]).product::<f64>() * (lp - top).exp();
        z += w;
        for a in 0..d {
            m1[a] += w * t[a];
            for b in 0..d {
                m2[a][b] += w * t[a] * t[b];
            }
        }
    }
    let mean: Vec<f64> = m1.iter().map(|v| v / z).collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|a| (0..d).map(|b| m2[a][b] / z - mean[a] * mean[b]).collect())
        .collect();
    let half_grid_integral = nodes
        .iter()
        .filter(|(ix, _, _)| ix.iter().all(|i| i % 2 == 0))
        .map(|(ix, lp, _)| (0..d).map(|k| half_weights[k][ix[k] / 2]).product::<f64>() * (lp - top).exp() / z)
        .sum();
    Ok(GridOracle {
        names,
        points,
        bounds,
        mode,
        std: (0..d).map(|k| cov[k][k].sqrt()).collect(),
        mean,
        cov,
        log_normalizer: top + z.ln(),
        half_grid_integral,
    })
}

/// Picks the oracle for the model family.
pub fn run_oracle(spec: &ModelSpec, data: &Dataset, cfg: &super::OracleConfig) -> Result<OracleReport> {
    match spec.family {
        Family::LinearGaussian => Ok(OracleReport::Linear(linear_oracle(spec, data, &cfg.rhos)?)),
        Family::Logistic => Ok(OracleReport::Grid(logistic_grid(spec, data, cfg.grid_points)?)),
        f => Err(Error::Config(format!("no oracle for the {f:?} family"))),
    }
}
