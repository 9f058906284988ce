//! EM estimation of G-group ZIP / ZIGP mixtures over drivers.
//!
//! Group membership is a driver-level latent variable; every week of a
//! driver inherits that driver's posterior responsibility as its row weight
//! in the M-step. Convergence follows the relative rule
//! `|ℓ(t) − ℓ(t−1)| ≤ ε (1 + |ℓ(t)|)` on the observed-data log-likelihood.

use std::collections::BTreeMap;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DriverWeek, ObservationTable, Target};
use crate::error::{Error, Result};
use crate::fit::{fit_data, CountData, FitOptions};
use crate::math::log_sum_exp;
use crate::model::{ComponentParams, Family, InflationSpec, ThetaMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub groups: usize,
    pub family: Family,
    pub epsilon: f64,
    pub max_em_iters: usize,
    pub mstep_max_iters: usize,
    pub seed: u64,
    pub n_restarts: usize,
    pub theta: ThetaMode,
    pub inflation: InflationSpec,
}

impl EmConfig {
    pub fn new(groups: usize, family: Family) -> Self {
        EmConfig {
            groups,
            family,
            epsilon: 1e-4,
            max_em_iters: 100,
            mstep_max_iters: 200,
            seed: 0,
            n_restarts: 3,
            theta: ThetaMode::Free,
            inflation: InflationSpec::Intercept,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Config("at least one group is required".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.family == Family::Poisson {
            return Err(Error::Config("mixtures are built from zip or zigp components".into()));
        }
        if self.n_restarts == 0 {
            return Err(Error::Config("at least one restart is required".into()));
        }
        Ok(())
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            family: self.family,
            inflation: self.inflation,
            theta: self.theta,
            max_iter: self.mstep_max_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub config: EmConfig,
    pub omega: Vec<f64>,
    pub components: Vec<ComponentParams>,
    /// In-sample posterior memberships by driver.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub responsibilities: BTreeMap<String, Vec<f64>>,
    /// Observed-data (driver-level) log-likelihood.
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub n_params: usize,
    pub n_obs: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Groups frozen after their weight fell below `1e-4 / G`.
    #[serde(default)]
    pub frozen_groups: Vec<usize>,
    /// Restart that produced this model.
    pub restart: usize,
}

impl MixtureModel {
    pub fn groups(&self) -> usize {
        self.components.len()
    }

    /// Drops the per-driver responsibilities (e.g. before publishing).
    pub fn without_responsibilities(mut self) -> Self {
        self.responsibilities.clear();
        self
    }

    fn weights_for(&self, driver: &str, membership: Membership) -> Result<Vec<f64>> {
        match membership {
            Membership::Prior => Ok(self.omega.clone()),
            Membership::Posterior => self
                .responsibilities
                .get(driver)
                .cloned()
                .ok_or_else(|| Error::UnknownDriver(driver.to_string())),
        }
    }

    /// `Σ_g w_g (1−π_g) mean_g` with `w` the posterior or prior weights.
    pub fn predict_mean(&self, row: &DriverWeek, membership: Membership) -> Result<f64> {
        let w = self.weights_for(&row.driver_id, membership)?;
        Ok(self
            .components
            .iter()
            .zip(&w)
            .map(|(c, w)| w * c.expected_count(&row.covariates, row.exposure_km))
            .sum())
    }

    /// Mixture probability of a zero count.
    pub fn predict_zero_prob(&self, row: &DriverWeek, membership: Membership) -> Result<f64> {
        let w = self.weights_for(&row.driver_id, membership)?;
        Ok(self
            .components
            .iter()
            .zip(&w)
            .map(|(c, w)| w * c.zero_prob(&row.covariates, row.exposure_km))
            .sum())
    }

    /// Observed-data log-likelihood of `table` under the prior weights.
    pub fn observed_loglik(&self, table: &ObservationTable, target: Target) -> Result<f64> {
        let grouped = GroupedData::new(table, target);
        let log_l = grouped.group_logliks(&self.components)?;
        Ok(observed_loglik(&log_l, &self.omega))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Posterior,
    Prior,
}

/// Design data plus the driver of each row.
pub(crate) struct GroupedData {
    pub data: CountData,
    pub drivers: Vec<String>,
    pub driver_of_row: Vec<usize>,
}

impl GroupedData {
    pub fn new(table: &ObservationTable, target: Target) -> Self {
        let (drivers, driver_of_row) = table.driver_index();
        GroupedData {
            data: CountData::from_table(table, target),
            drivers,
            driver_of_row,
        }
    }

    fn n_drivers(&self) -> usize {
        self.drivers.len()
    }

    /// `[driver][group]` sums of row log-masses.
    pub fn group_logliks(&self, components: &[ComponentParams]) -> Result<Vec<Vec<f64>>> {
        let g = components.len();
        let mut out = vec![vec![0.0; g]; self.n_drivers()];
        for i in 0..self.data.len() {
            let x = self.data.row(i);
            let (y, e) = (self.data.y[i], self.data.exposure[i]);
            let acc = &mut out[self.driver_of_row[i]];
            for (gi, c) in components.iter().enumerate() {
                acc[gi] += c.logpmf(y, x, e);
            }
        }
        for (d, row) in out.iter().enumerate() {
            if row.iter().all(|v| *v == f64::NEG_INFINITY || v.is_nan()) {
                return Err(Error::ImpossibleDriver(self.drivers[d].clone()));
            }
        }
        Ok(out)
    }

    fn row_weights(&self, tau: &[Vec<f64>], g: usize) -> Vec<f64> {
        self.driver_of_row.iter().map(|&d| tau[d][g]).collect()
    }
}

/// Per-driver, per-group log-likelihoods `Σ_t log f_g(y_{i,t})`.
pub fn driver_group_logliks(
    table: &ObservationTable,
    target: Target,
    components: &[ComponentParams],
) -> Result<Vec<Vec<f64>>> {
    GroupedData::new(table, target).group_logliks(components)
}

/// Posterior memberships `τ_ig ∝ ω_g L_ig`, computed in log space.
pub fn e_step(log_l: &[Vec<f64>], omega: &[f64]) -> Vec<Vec<f64>> {
    let ln_omega: Vec<f64> = omega.iter().map(|w| w.ln()).collect();
    log_l
        .iter()
        .map(|row| {
            let a: Vec<f64> = row.iter().zip(&ln_omega).map(|(l, w)| l + w).collect();
            let norm = log_sum_exp(&a);
            a.iter().map(|v| (v - norm).exp()).collect()
        })
        .collect()
}

/// `ℓ = Σ_i ln Σ_g ω_g exp(logL_ig)`.
pub fn observed_loglik(log_l: &[Vec<f64>], omega: &[f64]) -> f64 {
    let ln_omega: Vec<f64> = omega.iter().map(|w| w.ln()).collect();
    log_l
        .iter()
        .map(|row| {
            let a: Vec<f64> = row.iter().zip(&ln_omega).map(|(l, w)| l + w).collect();
            log_sum_exp(&a)
        })
        .sum()
}

/// Mixing weights as the mean responsibility per group.
pub fn update_omega(tau: &[Vec<f64>]) -> Vec<f64> {
    let n = tau.len() as f64;
    let g = tau.first().map_or(0, Vec::len);
    (0..g).map(|j| tau.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// One M-step: new weights and responsibility-weighted refits warm-started
/// from `previous`. Groups whose weight drops below `1e-4 / G` keep their
/// previous parameters and are reported in the returned list.
pub(crate) fn m_step(
    grouped: &GroupedData,
    tau: &[Vec<f64>],
    config: &EmConfig,
    previous: &[ComponentParams],
    feature_names: &[String],
) -> Result<(Vec<f64>, Vec<ComponentParams>, Vec<usize>)> {
    let omega = update_omega(tau);
    let g = previous.len();
    let floor = 1e-4 / g as f64;
    let opts = config.fit_options();
    let fitted: Vec<Result<Option<ComponentParams>>> = (0..g)
        .into_par_iter()
        .map(|j| {
            if omega[j] < floor {
                return Ok(None);
            }
            let w = grouped.row_weights(tau, j);
            fit_data(&grouped.data, feature_names, &opts, Some(&w), Some(&previous[j])).map(Some)
        })
        .collect();
    let mut components = Vec::with_capacity(g);
    let mut frozen = Vec::new();
    for (j, f) in fitted.into_iter().enumerate() {
        match f? {
            Some(c) => components.push(c),
            None => {
                warn!("group {j} has weight {:.2e} and is frozen", omega[j]);
                frozen.push(j);
                components.push(previous[j].clone());
            }
        }
    }
    Ok((omega, components, frozen))
}

/// Quantile-block initialisation on empirical driver rates.
pub(crate) fn initialize_grouped(
    grouped: &GroupedData,
    config: &EmConfig,
    feature_names: &[String],
    restart: usize,
) -> Result<(Vec<f64>, Vec<ComponentParams>)> {
    let g = config.groups;
    let n = grouped.n_drivers();
    if n < g {
        return Err(Error::Config(format!("{n} drivers cannot seed {g} groups")));
    }
    let mut counts = vec![0.0; n];
    let mut exposure = vec![0.0; n];
    for (i, &d) in grouped.driver_of_row.iter().enumerate() {
        counts[d] += grouped.data.y[i] as f64;
        exposure[d] += grouped.data.exposure[i];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| (counts[a] / exposure[a]).total_cmp(&(counts[b] / exposure[b])).then(a.cmp(&b)));

    let mut bounds: Vec<usize> = (0..=g).map(|j| (j * n + g / 2) / g).collect();
    if restart > 0 && g > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let span = (n / (4 * g)).max(1) as i64;
        for j in 1..g {
            let shift = rng.random_range(-span..=span);
            bounds[j] = (bounds[j] as i64 + shift).clamp(0, n as i64) as usize;
        }
    }
    for j in 1..g {
        // keep every block non-empty
        let lo = bounds[j - 1] + 1;
        let hi = n - (g - j);
        bounds[j] = bounds[j].clamp(lo, hi);
    }

    let opts = config.fit_options();
    let mut block_of = vec![0usize; n];
    for j in 0..g {
        for &d in &order[bounds[j]..bounds[j + 1]] {
            block_of[d] = j;
        }
    }
    let components = (0..g)
        .into_par_iter()
        .map(|j| {
            let w: Vec<f64> = grouped
                .driver_of_row
                .iter()
                .map(|&d| if block_of[d] == j { 1.0 } else { 0.0 })
                .collect();
            fit_data(&grouped.data, feature_names, &opts, Some(&w), None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vec![1.0 / g as f64; g], components))
}

/// Initial `(ω, components)` for restart `restart` (0-based; restart 0 uses
/// exact quantile cuts, later restarts jitter the cut points).
pub fn initialize(
    table: &ObservationTable,
    target: Target,
    config: &EmConfig,
    restart: usize,
) -> Result<(Vec<f64>, Vec<ComponentParams>)> {
    config.validate()?;
    let grouped = GroupedData::new(table, target);
    initialize_grouped(&grouped, config, table.feature_names(), restart)
}

struct EmRun {
    omega: Vec<f64>,
    components: Vec<ComponentParams>,
    tau: Vec<Vec<f64>>,
    loglik: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    frozen: Vec<usize>,
}

fn run_em(
    grouped: &GroupedData,
    config: &EmConfig,
    feature_names: &[String],
    mut omega: Vec<f64>,
    mut components: Vec<ComponentParams>,
) -> Result<EmRun> {
    let mut log_l = grouped.group_logliks(&components)?;
    let mut ll = observed_loglik(&log_l, &omega);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut frozen = Vec::new();
    while iterations < config.max_em_iters {
        iterations += 1;
        let tau = e_step(&log_l, &omega);
        let (new_omega, new_components, new_frozen) = m_step(grouped, &tau, config, &components, feature_names)?;
        omega = new_omega;
        components = new_components;
        frozen = new_frozen;
        log_l = grouped.group_logliks(&components)?;
        let next = observed_loglik(&log_l, &omega);
        trace.push(next);
        debug!("EM iteration {iterations}: loglik {next:.6}");
        let done = (next - ll).abs() <= config.epsilon * (1.0 + next.abs());
        ll = next;
        if done {
            converged = true;
            break;
        }
    }
    let tau = e_step(&log_l, &omega);
    Ok(EmRun {
        omega,
        components,
        tau,
        loglik: ll,
        trace,
        iterations,
        converged,
        frozen,
    })
}

fn finish(grouped: &GroupedData, config: &EmConfig, run: EmRun, restart: usize) -> MixtureModel {
    let g = run.components.len();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        run.omega[b]
            .total_cmp(&run.omega[a])
            .then(run.components[a].mean.intercept.total_cmp(&run.components[b].mean.intercept))
    });
    let omega: Vec<f64> = order.iter().map(|&j| run.omega[j]).collect();
    let components: Vec<ComponentParams> = order.iter().map(|&j| run.components[j].clone()).collect();
    let responsibilities = grouped
        .drivers
        .iter()
        .zip(&run.tau)
        .map(|(d, t)| (d.clone(), order.iter().map(|&j| t[j]).collect()))
        .collect();
    let frozen_groups = order
        .iter()
        .enumerate()
        .filter(|(_, j)| run.frozen.contains(j))
        .map(|(pos, _)| pos)
        .collect();
    let n_params = components.iter().map(|c| c.n_params).sum::<usize>() + g - 1;
    MixtureModel {
        config: config.clone(),
        omega,
        components,
        responsibilities,
        loglik: run.loglik,
        trace: run.trace,
        n_params,
        n_obs: grouped.data.len(),
        iterations: run.iterations,
        converged: run.converged,
        frozen_groups,
        restart,
    }
}

/// Runs EM from a given starting point (no restarts).
pub fn fit_em_from(
    table: &ObservationTable,
    target: Target,
    config: &EmConfig,
    omega: Vec<f64>,
    components: Vec<ComponentParams>,
) -> Result<MixtureModel> {
    config.validate()?;
    if omega.len() != components.len() || components.is_empty() {
        return Err(Error::Config("omega and components must have the same nonzero length".into()));
    }
    let grouped = GroupedData::new(table, target);
    let run = run_em(&grouped, config, table.feature_names(), omega, components)?;
    Ok(finish(&grouped, config, run, 0))
}

/// Best-of-restarts EM fit of a G-group mixture.
pub fn fit_em(table: &ObservationTable, target: Target, config: &EmConfig) -> Result<MixtureModel> {
    config.validate()?;
    let grouped = GroupedData::new(table, target);
    let names = table.feature_names();
    // with one group every restart starts from the same point
    let restarts = if config.groups == 1 { 1 } else { config.n_restarts };
    let runs: Vec<Result<EmRun>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let (omega, components) = initialize_grouped(&grouped, config, names, r)?;
            run_em(&grouped, config, names, omega, components)
        })
        .collect();

    let mut best: Option<(usize, EmRun)> = None;
    let mut last_err = None;
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) if run.loglik.is_finite() => {
                if best.as_ref().is_none_or(|(_, b)| run.loglik > b.loglik) {
                    best = Some((r, run));
                }
            }
            Ok(_) => last_err = Some("non-finite log-likelihood".to_string()),
            Err(e) => {
                warn!("EM restart {r} failed: {e}");
                last_err = Some(e.to_string());
            }
        }
    }
    match best {
        Some((r, run)) => Ok(finish(&grouped, config, run, r)),
        None => Err(Error::AllRestartsFailed {
            restarts,
            last: last_err.unwrap_or_default(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;
    use crate::fit::fit_component;
    use crate::model::{Dispersion, FitDiagnostics, InflationModel, MeanModel};
    use approx::assert_abs_diff_eq;

    const HB: Target = Target::Event(Event::HarshBraking);

    fn zip(alpha: f64, gamma: f64) -> ComponentParams {
        let mut p = ComponentParams {
            family: Family::Zip,
            feature_names: vec![],
            mean: MeanModel::intercept_only(alpha, 0),
            inflation: Some(InflationModel {
                intercept: gamma,
                coefficients: vec![],
            }),
            dispersion: None,
            loglik: f64::NAN,
            n_params: 0,
            diagnostics: FitDiagnostics::default(),
        };
        p.n_params = p.count_params();
        p
    }

    fn table(spec: &[(&str, &[u64])]) -> ObservationTable {
        let rows = spec
            .iter()
            .flat_map(|(d, ys)| {
                ys.iter().enumerate().map(move |(w, &y)| DriverWeek {
                    driver_id: d.to_string(),
                    week: w as u32,
                    exposure_km: 1.0,
                    counts: [y, 0, 0, 0, 0, 0],
                    covariates: vec![],
                })
            })
            .collect();
        ObservationTable::new(rows, vec![]).unwrap()
    }

    #[test]
    fn group_logliks_sum_row_masses() {
        let t = table(&[("a", &[3])]);
        let c = zip(0.5, -1.0);
        let l = driver_group_logliks(&t, HB, &[c.clone()]).unwrap();
        assert_eq!(l[0][0], c.logpmf(3, &[], 1.0));

        let t = table(&[("a", &[0, 2])]);
        let l = driver_group_logliks(&t, HB, &[c.clone()]).unwrap();
        assert_abs_diff_eq!(l[0][0], c.logpmf(0, &[], 1.0) + c.logpmf(2, &[], 1.0), epsilon = 1e-15);
    }

    #[test]
    fn group_logliks_match_bruteforce() {
        let spec: &[(&str, &[u64])] = &[("a", &[0, 1, 4]), ("b", &[7, 0]), ("c", &[2, 2, 2, 0])];
        let t = table(spec);
        let comps = [zip(0.1, -0.5), zip(1.5, 0.8)];
        let l = driver_group_logliks(&t, HB, &comps).unwrap();
        for (d, (_, ys)) in spec.iter().enumerate() {
            for (g, c) in comps.iter().enumerate() {
                // independent route through the checked pmf functions
                let pi = 1.0 / (1.0 + (-c.inflation.as_ref().unwrap().intercept).exp());
                let mu = c.mean.intercept.exp();
                let want: f64 = ys.iter().map(|&y| crate::pmf::zip_logpmf(y, pi, mu).unwrap()).sum();
                assert!((l[d][g] - want).abs() <= 1e-12, "{d},{g}");
            }
        }
    }

    #[test]
    fn impossible_driver_is_reported() {
        let t = table(&[("a", &[0]), ("b", &[5])]);
        // m = 1, θ = -0.5: counts above 2 fall outside the support
        let mut c = zip(0.0, 0.0);
        c.family = Family::Zigp;
        c.dispersion = Some(Dispersion::fixed(-0.5).unwrap());
        let err = driver_group_logliks(&t, HB, &[c]).unwrap_err();
        assert!(matches!(err, Error::ImpossibleDriver(d) if d == "b"));
    }

    #[test]
    fn e_step_examples() {
        let tau = e_step(&[vec![-3.0], vec![-9.0]], &[1.0]);
        assert_eq!(tau, vec![vec![1.0], vec![1.0]]);

        let tau = e_step(&[vec![-5.0, -5.0, -5.0]], &[1.0 / 3.0; 3]);
        for t in &tau[0] {
            assert_abs_diff_eq!(*t, 1.0 / 3.0, epsilon = 1e-15);
        }

        let tau = e_step(&[vec![-10.0, -12.0]], &[0.3, 0.7]);
        assert_abs_diff_eq!(tau[0][0], 0.7600041276283266, epsilon = 1e-12);

        let tau = e_step(&[vec![f64::NEG_INFINITY, -2000.0]], &[0.5, 0.5]);
        assert_eq!(tau[0], vec![0.0, 1.0]);
    }

    #[test]
    fn omega_is_mean_responsibility() {
        let tau = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.25, 0.75], vec![0.25, 0.75]];
        let w = update_omega(&tau);
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn hard_split_fits_each_group_on_its_drivers() {
        let t = table(&[("a", &[0, 0, 1]), ("b", &[0, 2, 3]), ("c", &[6, 8, 0]), ("d", &[9, 0, 7])]);
        let grouped = GroupedData::new(&t, HB);
        let config = EmConfig::new(2, Family::Zip);
        let tau = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let prev = vec![zip(0.0, 0.0), zip(1.0, 0.0)];
        let (omega, comps, frozen) = m_step(&grouped, &tau, &config, &prev, &[]).unwrap();
        assert_eq!(omega, vec![0.5, 0.5]);
        assert!(frozen.is_empty());
        let low = t.filter_drivers(|d| d == "a" || d == "b").unwrap();
        let direct = fit_component(&low, HB, &config.fit_options(), None).unwrap();
        assert_abs_diff_eq!(comps[0].loglik, direct.loglik, epsilon = 1e-7);
    }

    #[test]
    fn single_group_all_ones_matches_plain_fit() {
        let t = table(&[("a", &[0, 0, 1, 3]), ("b", &[0, 2, 3, 0]), ("c", &[6, 0, 0, 1])]);
        let grouped = GroupedData::new(&t, HB);
        let config = EmConfig::new(1, Family::Zip);
        let tau = vec![vec![1.0]; 3];
        let prev = vec![zip(0.0, 0.0)];
        let (omega, comps, _) = m_step(&grouped, &tau, &config, &prev, &[]).unwrap();
        assert_eq!(omega, vec![1.0]);
        let direct = fit_component(&t, HB, &config.fit_options(), None).unwrap();
        assert_abs_diff_eq!(comps[0].loglik, direct.loglik, epsilon = 1e-7);
    }

    #[test]
    fn quantile_initialisation_separates_rates() {
        let t = table(&[("a", &[0, 1]), ("b", &[9, 11]), ("c", &[0, 0]), ("d", &[10, 10])]);
        let config = EmConfig::new(2, Family::Zip);
        let (omega, comps) = initialize(&t, HB, &config, 0).unwrap();
        assert_eq!(omega, vec![0.5, 0.5]);
        assert!(comps[0].expected_count(&[], 1.0) < 1.0);
        assert!(comps[1].expected_count(&[], 1.0) > 5.0);
        assert_eq!(initialize(&t, HB, &config, 2).unwrap(), initialize(&t, HB, &config, 2).unwrap());

        let config = EmConfig::new(1, Family::Zip);
        let (omega, comps) = initialize(&t, HB, &config, 0).unwrap();
        assert_eq!(omega, vec![1.0]);
        let direct = fit_component(&t, HB, &config.fit_options(), None).unwrap();
        assert_abs_diff_eq!(comps[0].loglik, direct.loglik, epsilon = 1e-7);
    }

    #[test]
    fn prediction_rules() {
        let t = table(&[("a", &[0, 1])]);
        let mut m = fit_em(&t, HB, &EmConfig::new(1, Family::Zip)).unwrap();
        m.components[0].inflation.as_mut().unwrap().intercept = -800.0;
        let row = &t.rows()[0];
        let want = m.components[0].location(&[], 1.0);
        assert_abs_diff_eq!(m.predict_mean(row, Membership::Prior).unwrap(), want, epsilon = 1e-12);

        m.components[0].inflation.as_mut().unwrap().intercept = 800.0;
        assert_eq!(m.predict_mean(row, Membership::Prior).unwrap(), 0.0);

        let mut m2 = m.clone();
        m2.omega = vec![0.5, 0.5];
        m2.components = vec![zip(2f64.ln(), -800.0), zip(6f64.ln(), -800.0)];
        assert_abs_diff_eq!(m2.predict_mean(row, Membership::Prior).unwrap(), 4.0, epsilon = 1e-12);

        let stranger = DriverWeek {
            driver_id: "zz".into(),
            ..row.clone()
        };
        assert!(matches!(
            m2.predict_mean(&stranger, Membership::Posterior),
            Err(Error::UnknownDriver(_))
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let t = table(&[("a", &[0, 1])]);
        assert!(fit_em(&t, HB, &EmConfig::new(0, Family::Zip)).is_err());
        assert!(fit_em(&t, HB, &EmConfig::new(1, Family::Poisson)).is_err());
        assert!(fit_em(&t, HB, &EmConfig::new(2, Family::Zip)).is_err());
    }
}
