//! Numeric primitives shared by every other module.

pub mod adam;
pub mod gaussian;
pub mod linalg;
pub mod rng;

pub use adam::{AdamConfig, AdamState};
pub use gaussian::{gaussian_logpdf, gaussian_logpdf_grads, GaussianGrads, Scale, HALF_LN_2PI};
pub use linalg::Mat;
pub use rng::RngStream;

/// Lower bound added to every softplus-mapped scale.
pub const SCALE_FLOOR: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Positive scale from an unconstrained value: `softplus(raw) + SCALE_FLOOR`.
#[inline]
pub fn positive(raw: f64) -> f64 {
    softplus(raw) + SCALE_FLOOR
}

/// d positive(raw) / d raw.
#[inline]
pub fn positive_grad(raw: f64) -> f64 {
    sigmoid(raw)
}

/// Unconstrained value whose [`positive`] image is `scale`.
pub fn positive_inv(scale: f64) -> f64 {
    softplus_inv(scale - SCALE_FLOOR)
}
