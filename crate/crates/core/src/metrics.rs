//! Information criteria and predictive diagnostics.
//!
//! Deviance and RMSE are computed per held-out fold (deviance divided by
//! the fold's row count) and summarised as mean and sample standard
//! deviation across folds. Pearson χ², McFadden's R² and the zero-event
//! Brier score use the pooled held-out predictions.

use serde::{Deserialize, Serialize};

use crate::data::{FoldAssignment, ObservationTable, Target};
use crate::em::Membership;
use crate::error::{Error, Result};
use crate::math;
use crate::pipeline::{FittedPipeline, ModelSpec, Prediction};
use crate::pmf::poisson_kernel;

/// Floor applied to predicted means before the deviance and χ² terms.
const MEAN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aic: f64,
    pub bic: f64,
    pub loglik: f64,
    pub poisson_deviance_mean: f64,
    pub poisson_deviance_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub pearson_chi2: f64,
    pub mcfadden_r2: f64,
    pub brier_zero: f64,
    pub n_obs: usize,
    pub n_params: usize,
    pub fold_deviance: Vec<f64>,
    pub fold_rmse: Vec<f64>,
    /// Folds whose fit failed; non-empty means the report is partial.
    #[serde(default)]
    pub failed_folds: Vec<usize>,
}

impl MetricsReport {
    pub fn is_partial(&self) -> bool {
        !self.failed_folds.is_empty()
    }

    pub const CSV_HEADER: [&'static str; 15] = [
        "model",
        "target",
        "aic",
        "bic",
        "loglik",
        "n_params",
        "n_obs",
        "dev_mean",
        "dev_std",
        "rmse_mean",
        "rmse_std",
        "chi2",
        "mcfadden",
        "brier",
        "status",
    ];

    /// One flat row in the column order of [`Self::CSV_HEADER`].
    pub fn csv_record(&self, model: &str, target: Target) -> Vec<String> {
        vec![
            model.to_string(),
            target.to_string(),
            fmt_num(self.aic),
            fmt_num(self.bic),
            fmt_num(self.loglik),
            self.n_params.to_string(),
            self.n_obs.to_string(),
            fmt_num(self.poisson_deviance_mean),
            fmt_num(self.poisson_deviance_std),
            fmt_num(self.rmse_mean),
            fmt_num(self.rmse_std),
            fmt_num(self.pearson_chi2),
            fmt_num(self.mcfadden_r2),
            fmt_num(self.brier_zero),
            if self.is_partial() { "partial".into() } else { "ok".into() },
        ]
    }
}

pub(crate) fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

/// `(AIC, BIC) = (2p − 2ℓ, p ln n − 2ℓ)`.
pub fn aic_bic(loglik: f64, n_params: usize, n_obs: usize) -> (f64, f64) {
    let p = n_params as f64;
    (2.0 * p - 2.0 * loglik, p * (n_obs as f64).ln() - 2.0 * loglik)
}

/// Parameter count implied by `BIC − AIC = p (ln n − 2)`.
pub fn params_from_criteria(aic: f64, bic: f64, n_obs: usize) -> f64 {
    (bic - aic) / ((n_obs as f64).ln() - 2.0)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::domain(format!("length mismatch: {a} vs {b}")))
    }
}

/// Total Poisson deviance `2 Σ [y ln(y/μ) − (y − μ)]`, with the log term
/// taken as zero when `y = 0`.
pub fn poisson_deviance(y: &[u64], mu: &[f64]) -> Result<f64> {
    check_lengths(y.len(), mu.len())?;
    let mut d = 0.0;
    for (&y, &m) in y.iter().zip(mu) {
        if !(m > 0.0) {
            return Err(Error::domain(format!("predicted mean must be positive, got {m}")));
        }
        let yf = y as f64;
        let log_term = if y == 0 { 0.0 } else { yf * (yf / m).ln() };
        d += log_term - (yf - m);
    }
    Ok(2.0 * d)
}

pub fn rmse(y: &[u64], mu: &[f64]) -> Result<f64> {
    check_lengths(y.len(), mu.len())?;
    if y.is_empty() {
        return Ok(0.0);
    }
    let ss: f64 = y.iter().zip(mu).map(|(&y, m)| (y as f64 - m).powi(2)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

pub fn pearson_chi2(y: &[u64], mu: &[f64]) -> Result<f64> {
    check_lengths(y.len(), mu.len())?;
    let mut s = 0.0;
    for (&y, &m) in y.iter().zip(mu) {
        if !(m > 0.0) {
            return Err(Error::domain(format!("predicted mean must be positive, got {m}")));
        }
        s += (y as f64 - m).powi(2) / m;
    }
    Ok(s)
}

/// `1 − ℓ_model / ℓ_null`.
pub fn mcfadden_r2(loglik_model: f64, loglik_null: f64) -> Result<f64> {
    if !(loglik_null < 0.0) {
        return Err(Error::DegenerateNull(loglik_null));
    }
    Ok(1.0 - loglik_model / loglik_null)
}

/// Mean squared gap between `1{y = 0}` and the predicted zero probability.
pub fn brier_zero(y: &[u64], p0: &[f64]) -> Result<f64> {
    check_lengths(y.len(), p0.len())?;
    if y.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = y
        .iter()
        .zip(p0)
        .map(|(&y, &p)| {
            let z = if y == 0 { 1.0 } else { 0.0 };
            (z - p.clamp(0.0, 1.0)).powi(2)
        })
        .sum();
    Ok(s / y.len() as f64)
}

/// Mean and sample standard deviation.
pub fn fold_summary(values: &[f64]) -> (f64, f64) {
    (math::mean(values), math::sample_sd(values))
}

/// Intercept-only Poisson with offset: the closed-form rate `Σy / ΣE`.
fn null_rate(table: &ObservationTable, target: Target) -> f64 {
    let y: u64 = table.target_counts(target).iter().sum();
    let e: f64 = table.exposures().iter().sum();
    if y == 0 {
        0.5 / e
    } else {
        y as f64 / e
    }
}

fn null_loglik(table: &ObservationTable, target: Target, rate: f64) -> f64 {
    table
        .rows()
        .iter()
        .map(|r| poisson_kernel(r.target(target), rate * r.exposure_km))
        .sum()
}

struct FoldOutcome {
    deviance: f64,
    rmse: f64,
    y: Vec<u64>,
    pred: Vec<Prediction>,
    loglik: f64,
    null_loglik: f64,
}

fn score_fold(
    fitted: &FittedPipeline,
    train: &ObservationTable,
    test: &ObservationTable,
    target: Target,
    membership: Membership,
) -> Result<FoldOutcome> {
    let pred = fitted.predict(test, membership)?;
    let y = test.target_counts(target);
    let mu: Vec<f64> = pred.iter().map(|p| p.mean.max(MEAN_FLOOR)).collect();
    let deviance = poisson_deviance(&y, &mu)? / y.len() as f64;
    let rmse = rmse(&y, &mu)?;
    let loglik = fitted.score(test)?;
    let null_loglik = null_loglik(test, target, null_rate(train, target));
    Ok(FoldOutcome {
        deviance,
        rmse,
        y,
        pred,
        loglik,
        null_loglik,
    })
}

fn assemble(full: &FittedPipeline, outcomes: Vec<FoldOutcome>, failed_folds: Vec<usize>) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(Error::Fit("every fold failed".into()));
    }
    let (aic, bic) = aic_bic(full.loglik(), full.n_params(), full.n_obs);
    let fold_deviance: Vec<f64> = outcomes.iter().map(|o| o.deviance).collect();
    let fold_rmse: Vec<f64> = outcomes.iter().map(|o| o.rmse).collect();
    let (dev_mean, dev_std) = fold_summary(&fold_deviance);
    let (rmse_mean, rmse_std) = fold_summary(&fold_rmse);
    let y: Vec<u64> = outcomes.iter().flat_map(|o| o.y.iter().copied()).collect();
    let mu: Vec<f64> = outcomes
        .iter()
        .flat_map(|o| o.pred.iter().map(|p| p.mean.max(MEAN_FLOOR)))
        .collect();
    let p0: Vec<f64> = outcomes.iter().flat_map(|o| o.pred.iter().map(|p| p.zero_prob)).collect();
    let ll: f64 = outcomes.iter().map(|o| o.loglik).sum();
    let ll_null: f64 = outcomes.iter().map(|o| o.null_loglik).sum();
    Ok(MetricsReport {
        aic,
        bic,
        loglik: full.loglik(),
        poisson_deviance_mean: dev_mean,
        poisson_deviance_std: dev_std,
        rmse_mean,
        rmse_std,
        pearson_chi2: pearson_chi2(&y, &mu)?,
        mcfadden_r2: mcfadden_r2(ll, ll_null).unwrap_or(f64::NAN),
        brier_zero: brier_zero(&y, &p0)?,
        n_obs: full.n_obs,
        n_params: full.n_params(),
        fold_deviance,
        fold_rmse,
        failed_folds,
    })
}

/// In-sample report for an already fitted pipeline, treating `table` as a
/// single fold (mixtures use posterior memberships).
pub fn evaluate_fitted(fitted: &FittedPipeline, table: &ObservationTable) -> Result<MetricsReport> {
    let outcome = score_fold(fitted, table, table, fitted.target, Membership::Posterior)?;
    assemble(fitted, vec![outcome], vec![])
}

/// Full protocol: AIC/BIC from a fit on all of `table`, predictive metrics
/// from refits on each training split scored on the held-out fold. Held-out
/// drivers of a mixture are predicted with the prior weights.
pub fn evaluate(
    spec: &ModelSpec,
    table: &ObservationTable,
    target: Target,
    folds: Option<&FoldAssignment>,
) -> Result<MetricsReport> {
    evaluate_with_fit(spec, table, target, folds).map(|(_, r)| r)
}

/// [`evaluate`], also returning the full-data fit.
pub fn evaluate_with_fit(
    spec: &ModelSpec,
    table: &ObservationTable,
    target: Target,
    folds: Option<&FoldAssignment>,
) -> Result<(FittedPipeline, MetricsReport)> {
    let full = FittedPipeline::fit(table, target, spec)?;
    let Some(folds) = folds else {
        let report = evaluate_fitted(&full, table)?;
        return Ok((full, report));
    };
    let mut outcomes = Vec::with_capacity(folds.k);
    let mut failed = Vec::new();
    for fold in 0..folds.k {
        let result = table.split(folds, fold).and_then(|(train, test)| {
            let fitted = FittedPipeline::fit(&train, target, spec)?;
            score_fold(&fitted, &train, &test, target, Membership::Prior)
        });
        match result {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("fold {fold} of {} / {target} failed: {e}", spec.family);
                failed.push(fold);
            }
        }
    }
    let report = assemble(&full, outcomes, failed)?;
    Ok((full, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn information_criteria() {
        let (aic, bic) = aic_bic(-100.0, 5, 100);
        assert_eq!(aic, 210.0);
        assert_abs_diff_eq!(bic, 223.02585092994046, epsilon = 1e-10);
        assert_abs_diff_eq!(bic - aic, 5.0 * (100f64.ln() - 2.0), epsilon = 1e-12);
    }

    #[test]
    fn deviance_examples() {
        assert_eq!(poisson_deviance(&[1, 4, 9], &[1.0, 4.0, 9.0]).unwrap(), 0.0);
        assert_eq!(poisson_deviance(&[0], &[2.0]).unwrap(), 4.0);
        assert_abs_diff_eq!(
            poisson_deviance(&[3, 0], &[1.0, 1.0]).unwrap(),
            4.591673732008658,
            epsilon = 1e-12
        );
        assert!(poisson_deviance(&[1], &[0.0]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1, 2], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0, 2], &[1.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(rmse(&[5, 0, 3], &[2.0, 1.0, 3.0]).unwrap(), 1.8257418583505538, epsilon = 1e-12);
    }

    #[test]
    fn chi2_examples() {
        assert_eq!(pearson_chi2(&[3], &[3.0]).unwrap(), 0.0);
        assert_eq!(pearson_chi2(&[4], &[2.0]).unwrap(), 2.0);
        assert_abs_diff_eq!(pearson_chi2(&[4, 0], &[2.0, 0.5]).unwrap(), 2.5, epsilon = 1e-15);
        assert!(pearson_chi2(&[1], &[-1.0]).is_err());
    }

    #[test]
    fn mcfadden_examples() {
        assert_eq!(mcfadden_r2(-800.0, -800.0).unwrap(), 0.0);
        assert_eq!(mcfadden_r2(-400.0, -800.0).unwrap(), 0.5);
        assert_abs_diff_eq!(mcfadden_r2(-500.0, -800.0).unwrap(), 0.375, epsilon = 1e-15);
        assert!(matches!(mcfadden_r2(-1.0, 0.0), Err(Error::DegenerateNull(_))));
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier_zero(&[0], &[1.0]).unwrap(), 0.0);
        assert_eq!(brier_zero(&[0, 3], &[0.5, 0.5]).unwrap(), 0.25);
        assert_abs_diff_eq!(brier_zero(&[0, 0, 1], &[0.8, 0.6, 0.1]).unwrap(), 0.07, epsilon = 1e-15);
    }

    #[test]
    fn table_two_parameter_counts() {
        // harsh braking, n = 12,528 driver-weeks
        let p_poisson = params_from_criteria(150901.36, 150983.16, 12_528);
        let p_zip = params_from_criteria(114152.88, 114242.11, 12_528);
        assert_eq!(p_poisson.round(), 11.0);
        assert_eq!(p_zip.round(), 12.0);
        assert!((p_poisson - 11.0).abs() < 0.01 && (p_zip - 12.0).abs() < 0.01);
    }
}
