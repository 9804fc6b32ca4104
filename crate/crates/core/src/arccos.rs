//! Closed forms of the bivariate Gaussian ReLU expectations (arc-cosine kernels
//! of degree 1 and 0).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Activation normalization constant for ReLU: `E[relu(u)^2] * C_SIGMA / 2 = Var(u)`.
pub const C_SIGMA: f64 = 2.0;

const PSD_REL_SLACK: f64 = 1e-9;
const PSD_ABS_SLACK: f64 = 1e-12;

/// Covariance `[[a, b], [b, d]]` of a centered Gaussian pair `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub a: f64,
    pub d: f64,
    pub b: f64,
}

impl Cov2 {
    pub fn new(a: f64, d: f64, b: f64) -> Self {
        Cov2 { a, d, b }
    }

    pub fn validate(&self) -> Result<()> {
        let Cov2 { a, d, b } = *self;
        if a.is_nan() || d.is_nan() || b.is_nan() {
            return Err(Error::NonFinite("covariance"));
        }
        if a < -PSD_ABS_SLACK || d < -PSD_ABS_SLACK || b * b > a * d * (1.0 + PSD_REL_SLACK) + PSD_ABS_SLACK {
            return Err(Error::InvalidCovariance { a, d, b });
        }
        Ok(())
    }
}

/// `E[relu(u) relu(v)]` for `(u, v) ~ N(0, cov)`.
pub fn expect_relu_prod(cov: Cov2) -> Result<f64> {
    cov.validate()?;
    Ok(relu_prod(cov.a, cov.d, cov.b))
}

/// `E[step(u) step(v)]` for `(u, v) ~ N(0, cov)`, with `step(0) = 0`.
pub fn expect_relu_deriv_prod(cov: Cov2) -> Result<f64> {
    cov.validate()?;
    Ok(relu_deriv_prod(cov.a, cov.d, cov.b))
}

// Unchecked generic forms used in the hot loop.

#[inline]
pub(crate) fn relu_prod<T: Real>(a: T, d: T, b: T) -> T {
    let s = (a.max(T::zero()) * d.max(T::zero())).sqrt();
    if s <= T::zero() {
        return T::zero();
    }
    let rho = (b / s).max(-T::one()).min(T::one());
    let pi = T::from_f64(PI);
    s / (T::from_f64(2.0) * pi) * ((T::one() - rho * rho).sqrt() + rho * (pi - rho.acos()))
}

#[inline]
pub(crate) fn relu_deriv_prod<T: Real>(a: T, d: T, b: T) -> T {
    let s = (a.max(T::zero()) * d.max(T::zero())).sqrt();
    if s <= T::zero() {
        return T::zero();
    }
    let rho = (b / s).max(-T::one()).min(T::one());
    let pi = T::from_f64(PI);
    (pi - rho.acos()) / (T::from_f64(2.0) * pi)
}

/// Both expectations at once; shares the square root and the arccos.
#[inline]
pub(crate) fn relu_pair<T: Real>(a: T, d: T, b: T) -> (T, T) {
    let s = (a.max(T::zero()) * d.max(T::zero())).sqrt();
    if s <= T::zero() {
        return (T::zero(), T::zero());
    }
    let rho = (b / s).max(-T::one()).min(T::one());
    let pi = T::from_f64(PI);
    let two_pi = T::from_f64(2.0 * PI);
    let angle = pi - rho.acos();
    (
        s / two_pi * ((T::one() - rho * rho).sqrt() + rho * angle),
        angle / two_pi,
    )
}
