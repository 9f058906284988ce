//! Synthetic driver-week data with known ground truth, plus the oracles
//! used to check estimation against it.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DriverWeek, Event, ObservationTable, Target};
use crate::em::MixtureModel;
use crate::error::{Error, Result};
use crate::math::{logistic, logit};
use crate::model::{
    clamped_mean, dot, ComponentParams, Dispersion, Family, FitDiagnostics, InflationModel, MeanModel,
};
use crate::pmf::{gp_kernel, inflated, poisson_kernel};

/// Largest tolerated mass lost to the truncated support when `θ < 0`.
pub const MAX_SUPPORT_DEFICIENCY: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTruth {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub inflation_intercept: f64,
    /// Empty means the inflation probability is constant.
    #[serde(default)]
    pub inflation_coefficients: Vec<f64>,
    #[serde(default)]
    pub theta: f64,
}

impl GroupTruth {
    pub fn pi(&self, x: &[f64]) -> f64 {
        logistic(self.inflation_intercept + dot(&self.inflation_coefficients, x))
    }

    pub fn location(&self, x: &[f64], exposure: f64) -> f64 {
        clamped_mean(self.intercept + dot(&self.coefficients, x), exposure).0
    }

    /// The equivalent model component (ZIGP when `θ ≠ 0`, else ZIP).
    pub fn to_component(&self, feature_names: &[String]) -> Result<ComponentParams> {
        let (family, dispersion) = if self.theta == 0.0 {
            (Family::Zip, None)
        } else {
            (Family::Zigp, Some(Dispersion::fixed(self.theta)?))
        };
        let mut p = ComponentParams {
            family,
            feature_names: feature_names.to_vec(),
            mean: MeanModel {
                intercept: self.intercept,
                coefficients: self.coefficients.clone(),
            },
            inflation: Some(InflationModel {
                intercept: self.inflation_intercept,
                coefficients: self.inflation_coefficients.clone(),
            }),
            dispersion,
            loglik: f64::NAN,
            n_params: 0,
            diagnostics: FitDiagnostics::default(),
        };
        p.n_params = p.count_params();
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeeksPerDriver {
    Fixed(u32),
    /// Uniform on `min..=max`.
    Range { min: u32, max: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum ExposureLaw {
    Constant { value: f64 },
    LogNormal { median: f64, sigma: f64 },
}

impl Default for ExposureLaw {
    fn default() -> Self {
        ExposureLaw::LogNormal {
            median: 700.0,
            sigma: 0.5,
        }
    }
}

impl ExposureLaw {
    fn sampler(&self) -> Result<ExposureSampler> {
        match *self {
            ExposureLaw::Constant { value } if value > 0.0 && value.is_finite() => Ok(ExposureSampler::Constant(value)),
            ExposureLaw::LogNormal { median, sigma } if median > 0.0 && sigma >= 0.0 => LogNormal::new(median.ln(), sigma)
                .map(ExposureSampler::LogNormal)
                .map_err(|e| Error::Config(format!("exposure law: {e}"))),
            _ => Err(Error::Config(format!("invalid exposure law {self:?}"))),
        }
    }
}

enum ExposureSampler {
    Constant(f64),
    LogNormal(LogNormal<f64>),
}

impl ExposureSampler {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            ExposureSampler::Constant(v) => *v,
            ExposureSampler::LogNormal(d) => d.sample(rng),
        }
    }
}

fn default_event() -> Event {
    Event::HarshBraking
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_drivers: usize,
    pub weeks_per_driver: WeeksPerDriver,
    pub omega: Vec<f64>,
    pub groups: Vec<GroupTruth>,
    #[serde(default)]
    pub exposure: ExposureLaw,
    /// Number of independent standard normal covariates.
    pub n_features: usize,
    /// Event column that receives the simulated counts.
    #[serde(default = "default_event")]
    pub event: Event,
    pub seed: u64,
}

impl SimConfig {
    pub fn g_true(&self) -> usize {
        self.groups.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        (1..=self.n_features).map(|j| format!("x{j}")).collect()
    }

    pub fn target(&self) -> Target {
        Target::Event(self.event)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_drivers == 0 {
            return bad("n_drivers must be positive".into());
        }
        match self.weeks_per_driver {
            WeeksPerDriver::Fixed(0) => return bad("weeks_per_driver must be positive".into()),
            WeeksPerDriver::Range { min, max } if min == 0 || min > max => {
                return bad(format!("invalid week range {min}..={max}"))
            }
            _ => {}
        }
        if self.groups.is_empty() || self.groups.len() != self.omega.len() {
            return bad(format!("{} weights for {} groups", self.omega.len(), self.groups.len()));
        }
        let total: f64 = self.omega.iter().sum();
        if self.omega.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("omega {:?} is not a probability vector", self.omega));
        }
        for (g, t) in self.groups.iter().enumerate() {
            if t.coefficients.len() != self.n_features {
                return bad(format!("group {g}: {} coefficients for {} features", t.coefficients.len(), self.n_features));
            }
            if !t.inflation_coefficients.is_empty() && t.inflation_coefficients.len() != self.n_features {
                return bad(format!("group {g}: inflation coefficients must be empty or one per feature"));
            }
            if !(t.theta.abs() < 1.0) {
                return bad(format!("group {g}: theta {} outside (-1, 1)", t.theta));
            }
            let finite = [t.intercept, t.inflation_intercept]
                .iter()
                .chain(&t.coefficients)
                .chain(&t.inflation_coefficients)
                .all(|v| v.is_finite());
            if !finite {
                return bad(format!("group {g}: non-finite parameter"));
            }
        }
        self.exposure.sampler()?;
        Ok(())
    }

    /// True components in group order.
    pub fn components(&self) -> Result<Vec<ComponentParams>> {
        let names = self.feature_names();
        self.groups.iter().map(|t| t.to_component(&names)).collect()
    }
}

/// The two-group ZIP benchmark: 400 drivers × 30 weeks, ω = (0.6, 0.4),
/// rates 0.5 and 5 per unit exposure, three ±0.5 slopes and inflation
/// set for zero shares of 0.6 and 0.2. Exposure is log-normal around 1.
pub fn two_group_default(seed: u64) -> SimConfig {
    let exposure = ExposureLaw::LogNormal { median: 1.0, sigma: 0.3 };
    let mut groups = vec![
        GroupTruth {
            intercept: 0.5f64.ln(),
            coefficients: vec![0.5, -0.5, 0.5],
            inflation_intercept: 0.0,
            inflation_coefficients: vec![],
            theta: 0.0,
        },
        GroupTruth {
            intercept: 5f64.ln(),
            coefficients: vec![-0.5, 0.5, 0.5],
            inflation_intercept: 0.0,
            inflation_coefficients: vec![],
            theta: 0.0,
        },
    ];
    for (g, share) in groups.iter_mut().zip([0.6, 0.2]) {
        g.inflation_intercept =
            inflation_intercept_for_zero_share(share, g, &exposure, 200_000, 0x5EED).expect("benchmark zero share");
    }
    SimConfig {
        n_drivers: 400,
        weeks_per_driver: WeeksPerDriver::Fixed(30),
        omega: vec![0.6, 0.4],
        groups,
        exposure,
        n_features: 3,
        event: Event::HarshBraking,
        seed,
    }
}

/// Single-group counterpart of [`two_group_default`] with the pooled
/// parameters of its first group.
pub fn one_group_default(seed: u64) -> SimConfig {
    let mut c = two_group_default(seed);
    c.groups.truncate(1);
    c.omega = vec![1.0];
    c
}

/// Inflation intercept `γ₀` at which a group's expected zero share equals
/// `share`, with `E[e^{-m}]` estimated by Monte Carlo over the covariate
/// and exposure laws.
pub fn inflation_intercept_for_zero_share(
    share: f64,
    group: &GroupTruth,
    exposure: &ExposureLaw,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let sampler = exposure.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = group.coefficients.len();
    let mut x = vec![0.0; k];
    let mut acc = 0.0;
    for _ in 0..draws {
        x.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let e = sampler.sample(&mut rng);
        acc += gp_kernel(0, group.location(&x, e), group.theta).exp();
    }
    let z = acc / draws as f64;
    let pi = (share - z) / (1.0 - z);
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Config(format!(
            "zero share {share} unreachable: the count law alone gives {z:.4}"
        )));
    }
    Ok(logit(pi))
}

/// Generated table with the true group of every driver.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub table: ObservationTable,
    pub memberships: BTreeMap<String, usize>,
}

/// Sidecar written next to simulated CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimConfig,
    pub memberships: BTreeMap<String, usize>,
}

impl Simulation {
    pub fn ground_truth(&self, config: &SimConfig) -> GroundTruth {
        GroundTruth {
            config: config.clone(),
            memberships: self.memberships.clone(),
        }
    }

    /// True memberships in the table's driver order.
    pub fn labels(&self) -> Vec<usize> {
        let (drivers, _) = self.table.driver_index();
        drivers.iter().map(|d| self.memberships[d]).collect()
    }
}

/// Total mass of the generalized Poisson support when `θ < 0`.
fn truncated_mass(m: f64, theta: f64) -> f64 {
    let mut total = 0.0;
    let mut k = 0u64;
    loop {
        let l = gp_kernel(k, m, theta);
        if l == f64::NEG_INFINITY {
            return total;
        }
        total += l.exp();
        k += 1;
    }
}

/// Draw from GP(m, θ) by sequential inversion of the cumulative mass.
fn sample_gp<R: Rng>(rng: &mut R, m: f64, theta: f64) -> Result<u64> {
    if theta < 0.0 {
        let deficiency = 1.0 - truncated_mass(m, theta);
        if deficiency > MAX_SUPPORT_DEFICIENCY {
            return Err(Error::SupportExhausted { deficiency });
        }
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut k = 0u64;
    let mut last_supported = 0u64;
    loop {
        let l = gp_kernel(k, m, theta);
        if l == f64::NEG_INFINITY {
            // the small truncated remainder falls on the largest support point
            return Ok(last_supported);
        }
        last_supported = k;
        cum += l.exp();
        if u < cum {
            return Ok(k);
        }
        k += 1;
        if k > 10_000_000 {
            return Err(Error::SupportExhausted { deficiency: 1.0 - cum });
        }
    }
}

/// Draws the table described by `config`.
///
/// Drivers are named `d0001`, `d0002`, …; each draws its group from ω,
/// then every week draws covariates, exposure, the structural-zero
/// indicator and finally the count.
pub fn generate(config: &SimConfig) -> Result<Simulation> {
    config.validate()?;
    let sampler = config.exposure.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.n_drivers.to_string().len().max(4);
    let mut rows = Vec::new();
    let mut memberships = BTreeMap::new();
    let event = config.event.index();
    for i in 0..config.n_drivers {
        let driver_id = format!("d{:0width$}", i + 1);
        let u: f64 = rng.random();
        let mut g = 0;
        let mut cum = config.omega[0];
        while u >= cum && g + 1 < config.g_true() {
            g += 1;
            cum += config.omega[g];
        }
        let truth = &config.groups[g];
        memberships.insert(driver_id.clone(), g);
        let weeks = match config.weeks_per_driver {
            WeeksPerDriver::Fixed(w) => w,
            WeeksPerDriver::Range { min, max } => rng.random_range(min..=max),
        };
        for week in 1..=weeks {
            let x: Vec<f64> = (0..config.n_features).map(|_| rng.sample(StandardNormal)).collect();
            let exposure_km = sampler.sample(&mut rng);
            let m = truth.location(&x, exposure_km);
            let structural: bool = rng.random_bool(truth.pi(&x));
            let count = if structural {
                0
            } else if truth.theta == 0.0 {
                Poisson::new(m)
                    .map_err(|e| Error::domain(format!("Poisson mean {m}: {e}")))?
                    .sample(&mut rng) as u64
            } else {
                sample_gp(&mut rng, m, truth.theta)?
            };
            let mut counts = [0u64; 6];
            counts[event] = count;
            rows.push(DriverWeek {
                driver_id: driver_id.clone(),
                week,
                exposure_km,
                counts,
                covariates: x,
            });
        }
    }
    Ok(Simulation {
        table: ObservationTable::new(rows, config.feature_names())?,
        memberships,
    })
}

/// Exhaustive pmf table for `k ≤ k_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfCheck {
    pub masses: Vec<f64>,
    pub total: f64,
    pub deficiency: f64,
}

/// Evaluates `exp(logpmf(k))` for `k = 0..=k_max` (`π` and `θ` are ignored
/// where the family has no such parameter).
pub fn pmf_bruteforce_check(family: Family, m: f64, pi: f64, theta: f64, k_max: u64) -> PmfCheck {
    let (lp, lq) = (pi.ln(), (-pi).ln_1p());
    let masses: Vec<f64> = (0..=k_max)
        .map(|k| {
            let l = match family {
                Family::Poisson => poisson_kernel(k, m),
                Family::Zip => inflated(k, lp, lq, poisson_kernel(k, m)),
                Family::Zigp => inflated(k, lp, lq, gp_kernel(k, m, theta)),
            };
            l.exp()
        })
        .collect();
    let total: f64 = masses.iter().sum();
    let deficiency = 1.0 - total;
    if family == Family::Zigp && theta < 0.0 && deficiency > 1e-9 {
        info!("truncated support at m = {m}, θ = {theta}: mass deficiency {deficiency:.3e}");
    }
    PmfCheck {
        masses,
        total,
        deficiency,
    }
}

/// A count bound beyond which the (generalized) Poisson tail is negligible:
/// the law's mean plus forty standard deviations plus a margin.
pub fn adaptive_k_max(m: f64, theta: f64) -> u64 {
    let theta = theta.max(0.0);
    let mean = m / (1.0 - theta);
    let sd = (m / (1.0 - theta).powi(3)).sqrt();
    (mean + 40.0 * sd + 50.0).ceil() as u64
}

/// Distances between a fitted mixture and the truth after matching groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// `permutation[g]` is the fitted group matched to true group `g`.
    pub permutation: Vec<usize>,
    pub omega_error: Vec<f64>,
    pub intercept_error: Vec<f64>,
    pub coefficient_error: Vec<Vec<f64>>,
    pub inflation_intercept_error: Vec<f64>,
    pub theta_error: Vec<f64>,
    /// Share of drivers whose most probable fitted group is their true one.
    pub membership_accuracy: Option<f64>,
    pub adjusted_rand_index: Option<f64>,
}

impl RecoveryReport {
    pub fn max_omega_error(&self) -> f64 {
        self.omega_error.iter().fold(0.0, |m, v| m.max(*v))
    }

    /// Largest error over intercepts and slopes of the mean.
    pub fn max_mean_error(&self) -> f64 {
        self.intercept_error
            .iter()
            .chain(self.coefficient_error.iter().flatten())
            .fold(0.0, |m, v| m.max(*v))
    }

    /// Largest error over the slopes of the mean.
    pub fn max_slope_error(&self) -> f64 {
        self.coefficient_error.iter().flatten().fold(0.0, |m, v| m.max(*v))
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn group_distance(truth: &GroupTruth, omega_true: f64, fitted: &ComponentParams, omega_fit: f64) -> f64 {
    (truth.intercept - fitted.mean.intercept).abs()
        + truth
            .coefficients
            .iter()
            .zip(&fitted.mean.coefficients)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
        + (omega_true - omega_fit).abs()
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max = 0.5 * (sum_rows + sum_cols);
    if max == expected {
        return 1.0;
    }
    (sum_cells - expected) / (max - expected)
}

/// Matches fitted groups to the truth by the permutation minimising the
/// summed distance over ω, intercepts and slopes, then reports per-parameter
/// errors and membership agreement.
pub fn recovery_report(
    truth: &SimConfig,
    memberships: &BTreeMap<String, usize>,
    fitted: &MixtureModel,
) -> Result<RecoveryReport> {
    let g = truth.g_true();
    if fitted.groups() != g {
        return Err(Error::GMismatch {
            truth: g,
            fitted: fitted.groups(),
        });
    }
    if g > 8 {
        return Err(Error::Config("permutation matching supports at most 8 groups".into()));
    }
    let permutation = permutations(g)
        .into_iter()
        .map(|p| {
            let d: f64 = (0..g)
                .map(|t| group_distance(&truth.groups[t], truth.omega[t], &fitted.components[p[t]], fitted.omega[p[t]]))
                .sum();
            (d, p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| p)
        .expect("at least one permutation");

    let matched = |t: usize| &fitted.components[permutation[t]];
    let omega_error = (0..g).map(|t| (truth.omega[t] - fitted.omega[permutation[t]]).abs()).collect();
    let intercept_error = (0..g)
        .map(|t| (truth.groups[t].intercept - matched(t).mean.intercept).abs())
        .collect();
    let coefficient_error = (0..g)
        .map(|t| {
            let fc = &matched(t).mean.coefficients;
            truth.groups[t]
                .coefficients
                .iter()
                .enumerate()
                .map(|(j, c)| fc.get(j).map_or(f64::INFINITY, |f| (c - f).abs()))
                .collect()
        })
        .collect();
    let inflation_intercept_error = (0..g)
        .map(|t| {
            matched(t)
                .inflation
                .as_ref()
                .map_or(f64::INFINITY, |i| (truth.groups[t].inflation_intercept - i.intercept).abs())
        })
        .collect();
    let theta_error = (0..g).map(|t| (truth.groups[t].theta - matched(t).theta()).abs()).collect();

    let (membership_accuracy, adjusted_rand_index) = if fitted.responsibilities.is_empty() {
        (None, None)
    } else {
        let mut inverse = vec![0; g];
        for (t, &f) in permutation.iter().enumerate() {
            inverse[f] = t;
        }
        let mut true_labels = Vec::new();
        let mut fit_labels = Vec::new();
        for (driver, tau) in &fitted.responsibilities {
            let Some(&t) = memberships.get(driver) else {
                return Err(Error::UnknownDriver(driver.clone()));
            };
            let best = (0..g).max_by(|&a, &b| tau[a].total_cmp(&tau[b])).unwrap_or(0);
            true_labels.push(t);
            fit_labels.push(inverse[best]);
        }
        let hits = true_labels.iter().zip(&fit_labels).filter(|(a, b)| a == b).count();
        (
            Some(hits as f64 / true_labels.len() as f64),
            Some(adjusted_rand_index(&true_labels, &fit_labels)),
        )
    };
    Ok(RecoveryReport {
        permutation,
        omega_error,
        intercept_error,
        coefficient_error,
        inflation_intercept_error,
        theta_error,
        membership_accuracy,
        adjusted_rand_index,
    })
}

/// Two-means clustering of per-driver log rates `ln((Σy + ½)/ΣE)`;
/// returns labels in the table's driver order, 0 for the lower cluster.
pub fn rate_clusters(table: &ObservationTable, target: Target) -> Vec<usize> {
    let (drivers, row_driver) = table.driver_index();
    let mut y = vec![0.0; drivers.len()];
    let mut e = vec![0.0; drivers.len()];
    for (r, &d) in table.rows().iter().zip(&row_driver) {
        y[d] += r.target(target) as f64;
        e[d] += r.exposure_km;
    }
    let rates: Vec<f64> = y.iter().zip(&e).map(|(y, e)| ((y + 0.5) / e).ln()).collect();
    let (lo, hi) = rates
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    let mut centers = [lo, hi];
    let mut labels = vec![0; rates.len()];
    for _ in 0..100 {
        let next: Vec<usize> = rates
            .iter()
            .map(|r| usize::from((r - centers[1]).abs() < (r - centers[0]).abs()))
            .collect();
        for c in 0..2 {
            let members: Vec<f64> = rates.iter().zip(&next).filter(|(_, l)| **l == c).map(|(r, _)| *r).collect();
            if !members.is_empty() {
                centers[c] = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
        if next == labels {
            break;
        }
        labels = next;
    }
    if centers[0] > centers[1] {
        labels.iter_mut().for_each(|l| *l = 1 - *l);
    }
    if labels.iter().all(|&l| l == labels[0]) {
        warn!("rate clustering collapsed to one cluster");
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::EmConfig;

    fn intercept_only(alpha: f64, gamma: f64, theta: f64) -> SimConfig {
        SimConfig {
            n_drivers: 50,
            weeks_per_driver: WeeksPerDriver::Fixed(40),
            omega: vec![1.0],
            groups: vec![GroupTruth {
                intercept: alpha,
                coefficients: vec![],
                inflation_intercept: gamma,
                inflation_coefficients: vec![],
                theta,
            }],
            exposure: ExposureLaw::Constant { value: 1.0 },
            n_features: 0,
            event: Event::HarshBraking,
            seed: 3,
        }
    }

    fn counts(sim: &Simulation) -> Vec<u64> {
        sim.table.target_counts(Target::Event(Event::HarshBraking))
    }

    #[test]
    fn certain_inflation_gives_only_zeros() {
        let sim = generate(&intercept_only(2.0, 60.0, 0.0)).unwrap();
        assert!(counts(&sim).iter().all(|&c| c == 0));
        assert_eq!(sim.table.len(), 2000);
    }

    #[test]
    fn poisson_sample_mean() {
        let mut c = intercept_only(2f64.ln(), -60.0, 0.0);
        c.n_drivers = 500;
        let y = counts(&generate(&c).unwrap());
        let mean = y.iter().sum::<u64>() as f64 / y.len() as f64;
        let se = (2.0 / y.len() as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn generation_is_deterministic() {
        let c = two_group_default(11);
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.memberships, b.memberships);
        let other = generate(&two_group_default(12)).unwrap();
        assert_ne!(a.table, other.table);
    }

    #[test]
    fn zero_share_matches_inflation() {
        let c = two_group_default(5);
        let sim = generate(&c).unwrap();
        let t = c.target();
        let (drivers, row_driver) = sim.table.driver_index();
        let mut expected = 0.0;
        let mut zeros = 0usize;
        for (r, &d) in sim.table.rows().iter().zip(&row_driver) {
            let g = &c.groups[sim.memberships[&drivers[d]]];
            let pi = g.pi(&r.covariates);
            expected += pi + (1.0 - pi) * (-g.location(&r.covariates, r.exposure_km)).exp();
            zeros += usize::from(r.target(t) == 0);
        }
        let n = sim.table.len() as f64;
        let p = expected / n;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((zeros as f64 / n - p).abs() < 3.0 * se, "{} vs {p}", zeros as f64 / n);
    }

    #[test]
    fn benchmark_zero_shares() {
        let c = two_group_default(0);
        for (g, share) in c.groups.iter().zip([0.6, 0.2]) {
            let mut only = c.clone();
            only.groups = vec![g.clone()];
            only.omega = vec![1.0];
            only.n_drivers = 2000;
            let y = counts(&generate(&only).unwrap());
            let z = y.iter().filter(|&&v| v == 0).count() as f64 / y.len() as f64;
            assert!((z - share).abs() < 0.01, "{z} vs {share}");
        }
    }

    #[test]
    fn gp_inversion_matches_pmf() {
        // χ² goodness of fit at n = 100,000
        let (m, theta) = (1.5, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut hist = vec![0u64; 15];
        for _ in 0..n {
            let k = sample_gp(&mut rng, m, theta).unwrap() as usize;
            hist[k.min(14)] += 1;
        }
        let check = pmf_bruteforce_check(Family::Zigp, m, 0.0, theta, 2000);
        let mut expected: Vec<f64> = check.masses[..14].iter().map(|p| p * n as f64).collect();
        expected.push(n as f64 * (1.0 - check.masses[..14].iter().sum::<f64>()));
        let chi2: f64 = hist.iter().zip(&expected).map(|(&o, e)| (o as f64 - e).powi(2) / e).sum();
        let dist = statrs::distribution::ChiSquared::new(14.0).unwrap();
        let p = 1.0 - statrs::distribution::ContinuousCDF::cdf(&dist, chi2);
        assert!(p > 0.001, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn negative_theta_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_gp(&mut rng, 1.0, -0.5), Err(Error::SupportExhausted { .. })));
        assert!(sample_gp(&mut rng, 1.0, -0.25).unwrap() <= 3);
        // large m leaves a negligible remainder
        let k = sample_gp(&mut rng, 40.0, -0.05).unwrap();
        assert!(40.0 - 0.05 * k as f64 > 0.0);
        assert!(generate(&intercept_only(0.0, -60.0, -0.5)).is_err());
    }

    #[test]
    fn bruteforce_masses() {
        let zip = pmf_bruteforce_check(Family::Zip, 2.0, 0.3, 0.0, 60);
        assert!((zip.total - 1.0).abs() < 1e-8);
        let zigp = pmf_bruteforce_check(Family::Zigp, 1.0, 0.0, 0.5, 500);
        assert!((zigp.total - 1.0).abs() < 1e-6);
        let trunc = pmf_bruteforce_check(Family::Zigp, 1.0, 0.0, -0.25, 50);
        assert!(trunc.total < 1.0 && trunc.deficiency > 1e-6, "{trunc:?}");
        assert!(trunc.masses[4..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = two_group_default(0);
        c.omega = vec![0.7, 0.4];
        assert!(matches!(generate(&c), Err(Error::Config(_))));
        let mut c = two_group_default(0);
        c.groups[1].theta = 1.0;
        assert!(c.validate().is_err());
        let mut c = two_group_default(0);
        c.groups[0].coefficients.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn small_config_row_count() {
        let mut c = two_group_default(1);
        c.n_drivers = 10;
        c.weeks_per_driver = WeeksPerDriver::Fixed(4);
        assert_eq!(generate(&c).unwrap().table.len(), 40);
        c.weeks_per_driver = WeeksPerDriver::Range { min: 2, max: 5 };
        let n = generate(&c).unwrap().table.len();
        assert!((20..=50).contains(&n));
    }

    #[test]
    fn config_json_round_trip() {
        let c = two_group_default(4);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<SimConfig>(&s).unwrap(), c);
        let minimal = r#"{"n_drivers": 3, "weeks_per_driver": {"min": 1, "max": 2}, "omega": [1.0],
            "groups": [{"intercept": 0.0, "coefficients": [], "inflation_intercept": -2.0}],
            "n_features": 0, "seed": 1}"#;
        let m: SimConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(m.exposure, ExposureLaw::default());
        assert_eq!(m.event, Event::HarshBraking);
    }

    #[test]
    fn rate_clusters_recover_labels() {
        let sim = generate(&two_group_default(7)).unwrap();
        let labels = rate_clusters(&sim.table, Target::Event(Event::HarshBraking));
        let truth = sim.labels();
        let hits = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(hits as f64 / truth.len() as f64 >= 0.95, "{hits}");
    }

    #[test]
    fn ari_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) + 0.5).abs() < 1e-12);
    }

    fn truth_model(c: &SimConfig, sim: &Simulation, order: &[usize]) -> MixtureModel {
        let comps = c.components().unwrap();
        let mut responsibilities = BTreeMap::new();
        for (d, &g) in &sim.memberships {
            let mut tau = vec![0.0; order.len()];
            tau[order.iter().position(|&o| o == g).unwrap_or(0)] = 1.0;
            responsibilities.insert(d.clone(), tau);
        }
        MixtureModel {
            config: EmConfig::new(order.len(), Family::Zip),
            omega: order.iter().map(|&g| c.omega[g]).collect(),
            components: order.iter().map(|&g| comps[g].clone()).collect(),
            responsibilities,
            loglik: 0.0,
            trace: vec![],
            n_params: 0,
            n_obs: sim.table.len(),
            iterations: 0,
            converged: true,
            frozen_groups: vec![],
            restart: 0,
        }
    }

    #[test]
    fn exact_truth_has_zero_distance() {
        let mut c = two_group_default(2);
        c.n_drivers = 20;
        let sim = generate(&c).unwrap();
        let direct = recovery_report(&c, &sim.memberships, &truth_model(&c, &sim, &[0, 1])).unwrap();
        assert_eq!(direct.max_omega_error(), 0.0);
        assert_eq!(direct.max_mean_error(), 0.0);
        assert_eq!(direct.membership_accuracy, Some(1.0));
        assert_eq!(direct.adjusted_rand_index, Some(1.0));

        let swapped = recovery_report(&c, &sim.memberships, &truth_model(&c, &sim, &[1, 0])).unwrap();
        assert_eq!(swapped.permutation, vec![1, 0]);
        assert_eq!(swapped.omega_error, direct.omega_error);
        assert_eq!(swapped.coefficient_error, direct.coefficient_error);
        assert_eq!(swapped.membership_accuracy, Some(1.0));

        let one = truth_model(&c, &sim, &[0]);
        assert!(matches!(
            recovery_report(&c, &sim.memberships, &one),
            Err(Error::GMismatch { truth: 2, fitted: 1 })
        ));
    }
}
