//! Diagonal Gaussian log-densities with analytic gradients.

use crate::error::{check_len, Error, Result};

/// `½·ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Scale argument: one value shared by every coordinate, or one per coordinate.
#[derive(Debug, Clone, Copy)]
pub enum Scale<'a> {
    Scalar(f64),
    PerDim(&'a [f64]),
}

impl Scale<'_> {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            Scale::Scalar(s) => *s,
            Scale::PerDim(s) => s[i],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Scale::Scalar(s) => check_scale(*s),
            Scale::PerDim(s) => {
                check_len("gaussian scale", n, s.len())?;
                s.iter().try_for_each(|v| check_scale(*v))
            }
        }
    }
}

fn check_scale(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("gaussian scale must be > 0, got {s}")))
    }
}

/// Σᵢ log N(xᵢ; mᵢ, sᵢ).
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], scale: Scale<'_>) -> Result<f64> {
    check_len("gaussian mean", x.len(), mean.len())?;
    scale.validate(x.len())?;
    Ok(x
        .iter()
        .zip(mean)
        .enumerate()
        .map(|(i, (&xi, &mi))| {
            let s = scale.at(i);
            let r = (xi - mi) / s;
            -HALF_LN_2PI - s.ln() - 0.5 * r * r
        })
        .sum())
}

/// Gradients of [`gaussian_logpdf`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub d_x: Vec<f64>,
    pub d_mean: Vec<f64>,
    /// One entry per coordinate, even for a scalar scale (sum them for the
    /// scalar derivative).
    pub d_scale: Vec<f64>,
}

pub fn gaussian_logpdf_grads(x: &[f64], mean: &[f64], scale: Scale<'_>) -> Result<GaussianGrads> {
    check_len("gaussian mean", x.len(), mean.len())?;
    scale.validate(x.len())?;
    let n = x.len();
    let mut d_x = Vec::with_capacity(n);
    let mut d_mean = Vec::with_capacity(n);
    let mut d_scale = Vec::with_capacity(n);
    for i in 0..n {
        let s = scale.at(i);
        let r = x[i] - mean[i];
        let dm = r / (s * s);
        d_mean.push(dm);
        d_x.push(-dm);
        d_scale.push(r * r / (s * s * s) - 1.0 / s);
    }
    Ok(GaussianGrads {
        d_x,
        d_mean,
        d_scale,
    })
}
