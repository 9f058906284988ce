//! Parameter bundles for the single-component count models.

use std::fmt;
use std::str::FromStr;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logistic, softplus};
use crate::pmf;

/// Bound on the linear predictor before exponentiation.
pub const ETA_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Poisson,
    Zip,
    Zigp,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::Zip => "zip",
            Family::Zigp => "zigp",
        }
    }

    pub fn is_inflated(self) -> bool {
        !matches!(self, Family::Poisson)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `log λ = α₀ + xᵀβ`; the fitted mean is `E·λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl MeanModel {
    pub fn intercept_only(intercept: f64, k: usize) -> Self {
        MeanModel {
            intercept,
            coefficients: vec![0.0; k],
        }
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + dot(&self.coefficients, x)
    }
}

/// `logit π = γ₀ + xᵀγ`; an empty `coefficients` vector means an
/// intercept-only inflation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflationModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl InflationModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        if self.coefficients.is_empty() {
            self.intercept
        } else {
            self.intercept + dot(&self.coefficients, x)
        }
    }

    pub fn pi(&self, x: &[f64]) -> f64 {
        logistic(self.linear_predictor(x))
    }

    /// `(ln π, ln(1-π))`.
    pub fn ln_pi_pair(&self, x: &[f64]) -> (f64, f64) {
        let z = self.linear_predictor(x);
        (-softplus(-z), -softplus(z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispersionMode {
    Free,
    Fixed,
}

/// Generalized Poisson dispersion, `θ = tanh(raw)` when estimated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub theta: f64,
    pub raw: f64,
    pub mode: DispersionMode,
}

impl Dispersion {
    pub fn free(raw: f64) -> Self {
        Dispersion {
            theta: raw.tanh(),
            raw,
            mode: DispersionMode::Free,
        }
    }

    pub fn fixed(theta: f64) -> Result<Self> {
        if !(theta.abs() < 1.0) {
            return Err(Error::domain(format!("dispersion must lie in (-1, 1), got {theta}")));
        }
        Ok(Dispersion {
            theta,
            raw: theta.atanh(),
            mode: DispersionMode::Fixed,
        })
    }
}

/// How the dispersion is treated during estimation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "theta")]
pub enum ThetaMode {
    Free,
    Fixed(f64),
}

impl Default for ThetaMode {
    fn default() -> Self {
        ThetaMode::Free
    }
}

impl fmt::Display for ThetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThetaMode::Free => f.write_str("free"),
            ThetaMode::Fixed(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for ThetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("free") {
            return Ok(ThetaMode::Free);
        }
        let t: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("theta must be `free` or a number, got `{s}`")))?;
        if !(t.abs() < 1.0) {
            return Err(Error::Config(format!("theta must lie in (-1, 1), got {t}")));
        }
        Ok(ThetaMode::Fixed(t))
    }
}

/// Covariates entering the inflation logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InflationSpec {
    #[default]
    Intercept,
    Full,
}

impl FromStr for InflationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "intercept" => Ok(InflationSpec::Intercept),
            "full" => Ok(InflationSpec::Full),
            _ => Err(Error::Config(format!("inflation must be `intercept` or `full`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Rows whose linear predictor hit the clamp at the optimum.
    pub clamped_rows: usize,
    /// Some coefficient exceeded 20 in absolute value.
    pub separation: bool,
    /// Weighted log-likelihood after each accepted optimizer step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentParams {
    pub family: Family,
    pub feature_names: Vec<String>,
    pub mean: MeanModel,
    pub inflation: Option<InflationModel>,
    pub dispersion: Option<Dispersion>,
    pub loglik: f64,
    pub n_params: usize,
    pub diagnostics: FitDiagnostics,
}

impl ComponentParams {
    /// Number of freely estimated scalars implied by the structure.
    pub fn count_params(&self) -> usize {
        let mut p = 1 + self.mean.coefficients.len();
        if let Some(inf) = &self.inflation {
            p += 1 + inf.coefficients.len();
        }
        if let Some(d) = &self.dispersion {
            if d.mode == DispersionMode::Free {
                p += 1;
            }
        }
        p
    }

    pub fn theta(&self) -> f64 {
        self.dispersion.map_or(0.0, |d| d.theta)
    }

    pub fn pi(&self, x: &[f64]) -> f64 {
        self.inflation.as_ref().map_or(0.0, |i| i.pi(x))
    }

    /// Location of the count law: `E·exp(α₀ + xᵀβ)`.
    pub fn location(&self, x: &[f64], exposure: f64) -> f64 {
        clamped_mean(self.mean.linear_predictor(x), exposure).0
    }

    pub fn logpmf(&self, k: u64, x: &[f64], exposure: f64) -> f64 {
        let m = self.location(x, exposure);
        let count = match self.family {
            Family::Poisson => return pmf::poisson_kernel(k, m),
            Family::Zip => pmf::poisson_kernel(k, m),
            Family::Zigp => pmf::gp_kernel(k, m, self.theta()),
        };
        let (lp, lq) = self
            .inflation
            .as_ref()
            .map_or((f64::NEG_INFINITY, 0.0), |i| i.ln_pi_pair(x));
        pmf::inflated(k, lp, lq, count)
    }

    /// Expected count `(1-π)·mean`, the count-law mean being `m` for
    /// Poisson and `m/(1-θ)` for generalized Poisson.
    pub fn expected_count(&self, x: &[f64], exposure: f64) -> f64 {
        let m = self.location(x, exposure);
        let law_mean = match self.family {
            Family::Zigp => m / (1.0 - self.theta()),
            _ => m,
        };
        (1.0 - self.pi(x)) * law_mean
    }

    pub fn zero_prob(&self, x: &[f64], exposure: f64) -> f64 {
        self.logpmf(0, x, exposure).exp()
    }
}

/// `(E·exp(η), clamped)` with `η` limited to `±ETA_CLAMP`.
#[inline]
pub(crate) fn clamped_mean(eta: f64, exposure: f64) -> (f64, bool) {
    if eta.abs() > ETA_CLAMP {
        (exposure * eta.clamp(-ETA_CLAMP, ETA_CLAMP).exp(), true)
    } else {
        (exposure * eta.exp(), false)
    }
}

/// Mean `E·exp(α₀ + xᵀβ)` of the count law.
pub fn linear_mean(x: &[f64], exposure: f64, mean: &MeanModel) -> Result<f64> {
    if !(exposure > 0.0) {
        return Err(Error::domain(format!("exposure must be positive, got {exposure}")));
    }
    if x.len() != mean.coefficients.len() {
        return Err(Error::FeatureMismatch(format!(
            "{} covariates for {} coefficients",
            x.len(),
            mean.coefficients.len()
        )));
    }
    let eta = mean.linear_predictor(x);
    let (mu, clamped) = clamped_mean(eta, exposure);
    if clamped {
        debug!("linear predictor {eta} clamped to ±{ETA_CLAMP}");
    }
    Ok(mu)
}

/// Family-appropriate probability of a zero count.
pub fn zero_prob(params: &ComponentParams, x: &[f64], exposure: f64) -> Result<f64> {
    linear_mean(x, exposure, &params.mean)?;
    Ok(params.zero_prob(x, exposure))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}
