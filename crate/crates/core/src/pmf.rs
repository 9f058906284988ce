//! Log probability mass functions.
//!
//! The generalized Poisson law uses the location/dispersion form
//! `P(k) = m (m + θk)^(k-1) exp(-m - θk) / k!` with support restricted to
//! `m + θk > 0`. For `θ < 0` the mass beyond that bound is dropped without
//! renormalisation, so the total mass is below one.

use crate::error::{Error, Result};
use crate::math::{ln_factorial, log_add_exp};

fn check_mean(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("mean must be positive and finite, got {mu}")))
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("dispersion must lie in (-1, 1), got {theta}")))
    }
}

fn check_pi(pi: f64) -> Result<()> {
    if (0.0..=1.0).contains(&pi) {
        Ok(())
    } else {
        Err(Error::domain(format!("inflation probability must lie in [0, 1], got {pi}")))
    }
}

#[inline]
pub(crate) fn poisson_kernel(k: u64, mu: f64) -> f64 {
    if k == 0 {
        -mu
    } else {
        k as f64 * mu.ln() - mu - ln_factorial(k)
    }
}

#[inline]
pub(crate) fn gp_kernel(k: u64, m: f64, theta: f64) -> f64 {
    if k == 0 {
        return -m;
    }
    let kf = k as f64;
    let s = m + theta * kf;
    if s <= 0.0 {
        return f64::NEG_INFINITY;
    }
    m.ln() + (kf - 1.0) * s.ln() - s - ln_factorial(k)
}

/// Zero-inflated mass from `ln π`, `ln(1-π)` and the count-law log mass.
#[inline]
pub(crate) fn inflated(k: u64, ln_pi: f64, ln_1m_pi: f64, count_logpmf: f64) -> f64 {
    if k == 0 {
        log_add_exp(ln_pi, ln_1m_pi + count_logpmf)
    } else {
        ln_1m_pi + count_logpmf
    }
}

fn ln_pair(pi: f64) -> (f64, f64) {
    (pi.ln(), (-pi).ln_1p())
}

pub fn poisson_logpmf(k: u64, mu: f64) -> Result<f64> {
    check_mean(mu)?;
    Ok(poisson_kernel(k, mu))
}

pub fn gp_logpmf(k: u64, m: f64, theta: f64) -> Result<f64> {
    check_mean(m)?;
    check_theta(theta)?;
    Ok(gp_kernel(k, m, theta))
}

pub fn zip_logpmf(k: u64, pi: f64, mu: f64) -> Result<f64> {
    check_pi(pi)?;
    check_mean(mu)?;
    let (lp, lq) = ln_pair(pi);
    Ok(inflated(k, lp, lq, poisson_kernel(k, mu)))
}

pub fn zigp_logpmf(k: u64, pi: f64, m: f64, theta: f64) -> Result<f64> {
    check_pi(pi)?;
    check_mean(m)?;
    check_theta(theta)?;
    let (lp, lq) = ln_pair(pi);
    Ok(inflated(k, lp, lq, gp_kernel(k, m, theta)))
}
