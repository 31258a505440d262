use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::linalg::{solve_lower, solve_lower_t};
use crate::math::{positive, positive_grad, positive_inv, Mat, HALF_LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleStructure {
    /// Dense lower-triangular scale factor.
    #[default]
    Full,
    Diagonal,
}

/// `q(θ_j) = N(μ, L Lᵀ)` with `L` lower triangular. The diagonal of `L` is
/// stored unconstrained and mapped through [`positive`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFactor {
    pub mean: Vec<f64>,
    pub diag_raw: Vec<f64>,
    /// Strictly lower entries, row-major: (1,0), (2,0), (2,1), ...
    /// Empty for the diagonal structure.
    pub off: Vec<f64>,
    pub structure: ScaleStructure,
}

impl ThetaFactor {
    /// `μ = 0`, `L = scale · I`.
    pub fn new(dim: usize, scale: f64, structure: ScaleStructure) -> Self {
        let off_len = match structure {
            ScaleStructure::Full => dim * dim.saturating_sub(1) / 2,
            ScaleStructure::Diagonal => 0,
        };
        Self {
            mean: vec![0.0; dim],
            diag_raw: vec![positive_inv(scale); dim],
            off: vec![0.0; off_len],
            structure,
        }
    }

    /// Installs a given mean and lower-triangular scale.
    pub fn from_moments(mean: Vec<f64>, scale: &Mat) -> Result<Self> {
        let d = mean.len();
        check_len("scale rows", d, scale.rows())?;
        check_len("scale cols", d, scale.cols())?;
        let mut off = Vec::with_capacity(d * d.saturating_sub(1) / 2);
        let mut diag_raw = Vec::with_capacity(d);
        for i in 0..d {
            for k in 0..i {
                off.push(scale[(i, k)]);
            }
            let s = scale[(i, i)];
            if !(s > crate::math::SCALE_FLOOR) {
                return Err(Error::Domain(format!("scale diagonal must exceed the floor, got {s}")));
            }
            diag_raw.push(positive_inv(s));
        }
        Ok(Self {
            mean,
            diag_raw,
            off,
            structure: ScaleStructure::Full,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn param_count(&self) -> usize {
        self.mean.len() + self.diag_raw.len() + self.off.len()
    }

    /// The scale factor `L`.
    pub fn scale(&self) -> Mat {
        let d = self.dim();
        let mut l = Mat::zeros(d, d);
        let mut c = 0;
        for i in 0..d {
            if self.structure == ScaleStructure::Full {
                for k in 0..i {
                    l[(i, k)] = self.off[c];
                    c += 1;
                }
            }
            l[(i, i)] = positive(self.diag_raw[i]);
        }
        l
    }

    /// `θ = μ + L ε`.
    pub fn sample(&self, eps: &[f64]) -> Result<Vec<f64>> {
        check_len("theta noise", self.dim(), eps.len())?;
        let mut theta = self.scale().matvec(eps)?;
        for (t, m) in theta.iter_mut().zip(&self.mean) {
            *t += m;
        }
        Ok(theta)
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        check_len("theta", self.dim(), theta.len())?;
        let l = self.scale();
        let r: Vec<f64> = theta.iter().zip(&self.mean).map(|(t, m)| t - m).collect();
        let e = solve_lower(&l, &r)?;
        let logdet: f64 = (0..self.dim()).map(|i| l[(i, i)].ln()).sum();
        Ok(-(self.dim() as f64) * HALF_LN_2PI - logdet - 0.5 * e.iter().map(|v| v * v).sum::<f64>())
    }

    /// `∂/∂θ [−log q(θ)]` at `θ = μ + Lε` with the factor held fixed, which
    /// is `L⁻ᵀ ε`.
    pub fn stl_entropy_grad(&self, eps: &[f64]) -> Result<Vec<f64>> {
        solve_lower_t(&self.scale(), eps)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(&self.mean);
        out.extend(&self.diag_raw);
        out.extend(&self.off);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("theta factor params", self.param_count(), flat.len())?;
        let d = self.dim();
        self.mean.copy_from_slice(&flat[..d]);
        self.diag_raw.copy_from_slice(&flat[d..2 * d]);
        self.off.copy_from_slice(&flat[2 * d..]);
        Ok(())
    }

    /// Pulls a gradient on the sample, `dθ`, back to the flattened
    /// parameters through `θ = μ + L ε`.
    pub fn pullback(&self, d_theta: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        check_len("theta gradient", d, d_theta.len())?;
        check_len("theta noise", d, eps.len())?;
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(d_theta);
        for i in 0..d {
            out.push(d_theta[i] * eps[i] * positive_grad(self.diag_raw[i]));
        }
        if self.structure == ScaleStructure::Full {
            for i in 0..d {
                for k in 0..i {
                    out.push(d_theta[i] * eps[k]);
                }
            }
        }
        Ok(out)
    }

    /// Marginal standard deviations `sqrt(diag(L Lᵀ))`.
    pub fn marginal_std(&self) -> Vec<f64> {
        let l = self.scale();
        (0..self.dim())
            .map(|i| l.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}
