//! Yeo-Johnson transform `t_γ` for `γ ∈ (0, 2)`.
//!
//! All branches go through `expm1`/`ln_1p`, which keeps them accurate near
//! `γ = 0`, `γ = 2` and `x = 0`.

use crate::error::{Error, Result};

pub fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 2.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            block: "yeo_johnson_gamma",
            index: 0,
            message: format!("{gamma} is not in (0, 2)"),
        })
    }
}

/// `expm1(c l) / c`, continuous at `c = 0`.
#[inline]
fn expm1_ratio(c: f64, l: f64) -> f64 {
    if c == 0.0 {
        l
    } else {
        (c * l).exp_m1() / c
    }
}

/// `∂/∂c [expm1(c l) / c]`, with a series for small `c l`.
#[inline]
fn expm1_ratio_dc(c: f64, l: f64) -> f64 {
    let cl = c * l;
    if cl.abs() < 1e-4 {
        l * l * (0.5 + cl / 3.0 + cl * cl / 8.0)
    } else {
        (cl * cl.exp() - cl.exp_m1()) / (c * c)
    }
}

pub(crate) fn forward(x: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        x
    } else if x >= 0.0 {
        expm1_ratio(gamma, x.ln_1p())
    } else {
        -expm1_ratio(2.0 - gamma, (-x).ln_1p())
    }
}

pub(crate) fn inverse(xi: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        xi
    } else if xi >= 0.0 {
        let g = gamma;
        if g == 0.0 {
            xi.exp_m1()
        } else {
            ((g * xi).ln_1p() / g).exp_m1()
        }
    } else {
        let c = 2.0 - gamma;
        if c == 0.0 {
            -(-xi).exp_m1()
        } else {
            -((-c * xi).ln_1p() / c).exp_m1()
        }
    }
}

/// `∂t/∂x` in log form.
pub(crate) fn ln_derivative(x: f64, gamma: f64) -> f64 {
    if x >= 0.0 {
        (gamma - 1.0) * x.ln_1p()
    } else {
        (1.0 - gamma) * (-x).ln_1p()
    }
}

/// `t''(x) / t'(x)`.
pub(crate) fn curvature_ratio(x: f64, gamma: f64) -> f64 {
    if x >= 0.0 {
        (gamma - 1.0) / (1.0 + x)
    } else {
        (gamma - 1.0) / (1.0 - x)
    }
}

/// `∂t/∂γ` at fixed `x`.
pub(crate) fn dgamma(x: f64, gamma: f64) -> f64 {
    if x >= 0.0 {
        expm1_ratio_dc(gamma, x.ln_1p())
    } else {
        expm1_ratio_dc(2.0 - gamma, (-x).ln_1p())
    }
}

pub fn yj_forward(x: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(forward(x, gamma))
}

pub fn yj_inverse(xi: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(inverse(xi, gamma))
}

pub fn yj_derivative(x: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(ln_derivative(x, gamma).exp())
}

/// Second derivative `∂²t/∂x²`.
pub fn yj_second_derivative(x: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(curvature_ratio(x, gamma) * ln_derivative(x, gamma).exp())
}

/// Derivative with respect to `γ` at fixed `x`.
pub fn yj_dgamma(x: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(dgamma(x, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_at_gamma_one() {
        for &x in &[-3.0, -0.2, 0.0, 0.4, 7.0] {
            assert!((yj_forward(x, 1.0).unwrap() - x).abs() < 1e-15);
            assert!((yj_inverse(x, 1.0).unwrap() - x).abs() < 1e-15);
            assert_eq!(yj_derivative(x, 1.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn rejects_gamma_outside_range() {
        assert!(yj_forward(0.5, 0.0).is_err());
        assert!(yj_forward(0.5, 2.0).is_err());
        assert!(yj_inverse(0.5, -1.0).is_err());
    }

    #[test]
    fn dgamma_matches_differences() {
        for &x in &[-2.0, -0.5, 0.3, 1.5] {
            for &g in &[0.05, 0.6, 1.0, 1.7, 1.98] {
                let h = 1e-6;
                let fd = (forward(x, g + h) - forward(x, g - h)) / (2.0 * h);
                assert!((fd - dgamma(x, g)).abs() < 1e-7, "x {x} g {g}");
            }
        }
    }
}
