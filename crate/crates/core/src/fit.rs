//! Weighted maximum-likelihood fits of a single Poisson, ZIP or ZIGP
//! component with an exposure offset.
//!
//! Parameters are optimised jointly on an unconstrained vector laid out as
//! `[α₀, β…, γ₀, γ…, a]`, where the inflation block is present for ZIP and
//! ZIGP and the trailing `a` (with `θ = tanh a`) only when the dispersion is
//! estimated.

use log::{debug, warn};

use crate::data::{ObservationTable, Target};
use crate::error::{Error, Result};
use crate::math::{log_add_exp, logistic, logit, softplus};
use crate::model::{
    clamped_mean, ComponentParams, Dispersion, Family, FitDiagnostics, InflationModel, InflationSpec, MeanModel,
    ThetaMode, ETA_CLAMP,
};
use crate::optim::{self, BfgsConfig};
use crate::pmf;

/// Design data for one target: counts, exposures and a row-major covariate
/// matrix.
#[derive(Clone, Debug)]
pub struct CountData {
    pub y: Vec<u64>,
    pub exposure: Vec<f64>,
    x: Vec<f64>,
    k: usize,
}

impl CountData {
    pub fn new(y: Vec<u64>, exposure: Vec<f64>, x: Vec<f64>, k: usize) -> Result<Self> {
        if y.len() != exposure.len() || x.len() != y.len() * k {
            return Err(Error::domain("inconsistent design dimensions"));
        }
        if exposure.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::domain("exposures must be positive"));
        }
        Ok(CountData { y, exposure, x, k })
    }

    pub fn from_table(table: &ObservationTable, target: Target) -> Self {
        let x = table.rows().iter().flat_map(|r| r.covariates.iter().copied()).collect();
        CountData {
            y: table.target_counts(target),
            exposure: table.exposures(),
            x,
            k: table.n_features(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.k..(i + 1) * self.k]
    }

    /// Copy with every exposure multiplied by `c`.
    pub fn rescale_exposure(&self, c: f64) -> CountData {
        CountData {
            exposure: self.exposure.iter().map(|e| e * c).collect(),
            ..self.clone()
        }
    }
}

/// Position of each parameter block in the optimisation vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamLayout {
    pub family: Family,
    pub k: usize,
    pub inflation: InflationSpec,
    pub theta: ThetaMode,
}

impl ParamLayout {
    pub fn new(family: Family, k: usize, inflation: InflationSpec, theta: ThetaMode) -> Self {
        ParamLayout {
            family,
            k,
            inflation,
            theta,
        }
    }

    fn n_inflation_coef(&self) -> usize {
        match self.inflation {
            InflationSpec::Intercept => 0,
            InflationSpec::Full => self.k,
        }
    }

    fn inflation_start(&self) -> usize {
        1 + self.k
    }

    fn theta_index(&self) -> Option<usize> {
        (self.family == Family::Zigp && self.theta == ThetaMode::Free)
            .then(|| self.inflation_start() + 1 + self.n_inflation_coef())
    }

    pub fn len(&self) -> usize {
        let mut n = 1 + self.k;
        if self.family.is_inflated() {
            n += 1 + self.n_inflation_coef();
        }
        if self.theta_index().is_some() {
            n += 1;
        }
        n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn theta_of(&self, v: &[f64]) -> f64 {
        match (self.family, self.theta) {
            (Family::Zigp, ThetaMode::Free) => v[self.theta_index().unwrap()].tanh(),
            (Family::Zigp, ThetaMode::Fixed(t)) => t,
            _ => 0.0,
        }
    }

    pub fn pack(&self, p: &ComponentParams) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(p.mean.intercept);
        v.extend_from_slice(&p.mean.coefficients);
        if self.family.is_inflated() {
            let inf = p.inflation.as_ref();
            v.push(inf.map_or(0.0, |i| i.intercept));
            let coefs = inf.map(|i| i.coefficients.as_slice()).unwrap_or(&[]);
            for j in 0..self.n_inflation_coef() {
                v.push(coefs.get(j).copied().unwrap_or(0.0));
            }
        }
        if self.theta_index().is_some() {
            v.push(p.dispersion.map_or(0.0, |d| d.raw));
        }
        v
    }

    pub fn unpack(&self, v: &[f64], feature_names: &[String]) -> ComponentParams {
        let mean = MeanModel {
            intercept: v[0],
            coefficients: v[1..1 + self.k].to_vec(),
        };
        let s = self.inflation_start();
        let inflation = self.family.is_inflated().then(|| InflationModel {
            intercept: v[s],
            coefficients: v[s + 1..s + 1 + self.n_inflation_coef()].to_vec(),
        });
        let dispersion = match (self.family, self.theta) {
            (Family::Zigp, ThetaMode::Free) => Some(Dispersion::free(v[self.theta_index().unwrap()])),
            (Family::Zigp, ThetaMode::Fixed(t)) => Some(Dispersion {
                theta: t,
                raw: t.atanh(),
                mode: crate::model::DispersionMode::Fixed,
            }),
            _ => None,
        };
        let mut p = ComponentParams {
            family: self.family,
            feature_names: feature_names.to_vec(),
            mean,
            inflation,
            dispersion,
            loglik: f64::NAN,
            n_params: 0,
            diagnostics: FitDiagnostics::default(),
        };
        p.n_params = p.count_params();
        p
    }
}

/// Per-row log-likelihood contributions at `v` (unweighted).
pub fn row_logliks(data: &CountData, layout: &ParamLayout, v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    let theta = layout.theta_of(v);
    for i in 0..data.len() {
        out.push(row_eval(data, layout, v, theta, i, None, 1.0).0);
    }
    out
}

/// Weighted log-likelihood `Σ w_i log f(y_i)` at `v`.
pub fn weighted_loglik(data: &CountData, layout: &ParamLayout, weights: Option<&[f64]>, v: &[f64]) -> f64 {
    eval(data, layout, weights, v, None).0
}

/// Weighted log-likelihood and its analytic gradient.
pub fn weighted_loglik_grad(
    data: &CountData,
    layout: &ParamLayout,
    weights: Option<&[f64]>,
    v: &[f64],
) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; layout.len()];
    let ll = eval(data, layout, weights, v, Some(&mut g)).0;
    (ll, g)
}

/// Returns `(loglik, clamped rows)`; the gradient is accumulated into
/// `grad` when given.
fn eval(
    data: &CountData,
    layout: &ParamLayout,
    weights: Option<&[f64]>,
    v: &[f64],
    mut grad: Option<&mut [f64]>,
) -> (f64, usize) {
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    let theta = layout.theta_of(v);
    let mut total = 0.0;
    let mut clamped = 0;
    for i in 0..data.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let (ll, c) = row_eval(data, layout, v, theta, i, grad.as_deref_mut(), w);
        if ll == f64::NEG_INFINITY || ll.is_nan() {
            return (f64::NEG_INFINITY, clamped);
        }
        total += w * ll;
        clamped += c as usize;
    }
    (total, clamped)
}

#[inline]
fn row_eval(
    data: &CountData,
    layout: &ParamLayout,
    v: &[f64],
    theta: f64,
    i: usize,
    grad: Option<&mut [f64]>,
    w: f64,
) -> (f64, bool) {
    let k = layout.k;
    let x = data.row(i);
    let y = data.y[i];
    let eta = v[0] + x.iter().zip(&v[1..1 + k]).map(|(a, b)| a * b).sum::<f64>();
    let (m, clamped) = clamped_mean(eta, data.exposure[i]);
    let eta_active = if clamped { 0.0 } else { 1.0 };

    let (ll, d_eta, d_zeta, d_theta) = match layout.family {
        Family::Poisson => (pmf::poisson_kernel(y, m), y as f64 - m, 0.0, 0.0),
        Family::Zip | Family::Zigp => {
            let s = layout.inflation_start();
            let mut zeta = v[s];
            if layout.inflation == InflationSpec::Full {
                zeta += x.iter().zip(&v[s + 1..s + 1 + k]).map(|(a, b)| a * b).sum::<f64>();
            }
            let ln_pi = -softplus(-zeta);
            let ln_q = -softplus(zeta);
            let pi = logistic(zeta);
            if y == 0 {
                let l0 = log_add_exp(ln_pi, ln_q - m);
                let r = (ln_pi - l0).exp();
                (l0, -(1.0 - r) * m, r - pi, 0.0)
            } else if layout.family == Family::Zip {
                (ln_q + pmf::poisson_kernel(y, m), y as f64 - m, -pi, 0.0)
            } else {
                let yf = y as f64;
                let sum = m + theta * yf;
                let ll = ln_q + pmf::gp_kernel(y, m, theta);
                if sum <= 0.0 {
                    (ll, 0.0, 0.0, 0.0)
                } else {
                    let d_eta = 1.0 + (yf - 1.0) * m / sum - m;
                    let d_theta = (yf - 1.0) * yf / sum - yf;
                    (ll, d_eta, -pi, d_theta)
                }
            }
        }
    };

    if let Some(g) = grad {
        let de = w * d_eta * eta_active;
        g[0] += de;
        for j in 0..k {
            g[1 + j] += de * x[j];
        }
        if layout.family.is_inflated() {
            let s = layout.inflation_start();
            let dz = w * d_zeta;
            g[s] += dz;
            if layout.inflation == InflationSpec::Full {
                for j in 0..k {
                    g[s + 1 + j] += dz * x[j];
                }
            }
        }
        if let Some(t) = layout.theta_index() {
            g[t] += w * d_theta * (1.0 - theta * theta);
        }
    }
    (ll, clamped)
}

/// Estimation settings for one component.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub family: Family,
    pub inflation: InflationSpec,
    pub theta: ThetaMode,
    pub max_iter: usize,
}

impl FitOptions {
    pub fn new(family: Family) -> Self {
        FitOptions {
            family,
            inflation: InflationSpec::Intercept,
            theta: ThetaMode::Free,
            max_iter: 800,
        }
    }

    pub fn layout(&self, k: usize) -> ParamLayout {
        ParamLayout::new(self.family, k, self.inflation, self.theta)
    }
}

/// Fits one component to `target` of `table` (all weights one unless
/// given). Non-convergence is reported through the diagnostics.
pub fn fit_component(
    table: &ObservationTable,
    target: Target,
    opts: &FitOptions,
    weights: Option<&[f64]>,
) -> Result<ComponentParams> {
    let data = CountData::from_table(table, target);
    let params = fit_data(&data, table.feature_names(), opts, weights, None)?;
    if !params.diagnostics.converged {
        warn!(
            "{} fit stopped after {} iterations with gradient norm {:.3e}",
            opts.family, params.diagnostics.iterations, params.diagnostics.gradient_norm
        );
    }
    Ok(params)
}

/// Fits on prepared design data, optionally warm-started from `init`.
pub fn fit_data(
    data: &CountData,
    feature_names: &[String],
    opts: &FitOptions,
    weights: Option<&[f64]>,
    init: Option<&ComponentParams>,
) -> Result<ComponentParams> {
    if let Some(w) = weights {
        if w.len() != data.len() {
            return Err(Error::domain(format!("{} weights for {} rows", w.len(), data.len())));
        }
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::domain("weights must be finite and nonnegative"));
        }
    }
    if let ThetaMode::Fixed(t) = opts.theta {
        Dispersion::fixed(t)?;
    }
    let layout = opts.layout(data.n_features());
    let total_w: f64 = weights.map_or(data.len() as f64, |w| w.iter().sum());
    if !(total_w > 0.0) {
        return Err(Error::Fit("total weight is zero".into()));
    }

    let mut x0 = match init {
        Some(p) => layout.pack(p),
        None => initial_vector(data, &layout, weights),
    };
    make_feasible(data, &layout, weights, &mut x0)?;

    let scale = 1.0 / total_w;
    let objective = |v: &[f64], g: &mut [f64]| {
        let (ll, _) = eval(data, &layout, weights, v, Some(g));
        g.iter_mut().for_each(|x| *x *= -scale);
        -ll * scale
    };
    let cfg = BfgsConfig {
        max_iter: opts.max_iter,
        ..Default::default()
    };
    let min = optim::minimize(objective, x0, &cfg);
    if !min.value.is_finite() {
        return Err(Error::Fit("log-likelihood is not finite at the starting point".into()));
    }

    let (loglik, clamped_rows) = eval(data, &layout, weights, &min.x, None);
    let mut params = layout.unpack(&min.x, feature_names);
    params.loglik = loglik;
    let separation = params
        .mean
        .coefficients
        .iter()
        .chain(params.inflation.iter().flat_map(|i| i.coefficients.iter()))
        .any(|c| c.abs() > 20.0);
    if separation {
        warn!("a {} coefficient exceeds 20 in absolute value (possible separation)", opts.family);
    }
    if !min.converged {
        debug!(
            "{} fit stopped after {} iterations with gradient norm {:.3e}",
            opts.family, min.iterations, min.grad_norm
        );
    }
    params.diagnostics = FitDiagnostics {
        converged: min.converged,
        iterations: min.iterations,
        gradient_norm: min.grad_norm,
        clamped_rows,
        separation,
        trace: min.trace.iter().map(|f| -f / scale).collect(),
    };
    Ok(params)
}

/// Raises the mean intercept until every row lies inside the generalized
/// Poisson support (only needed for `θ < 0`).
fn make_feasible(data: &CountData, layout: &ParamLayout, weights: Option<&[f64]>, v: &mut [f64]) -> Result<()> {
    for _ in 0..120 {
        if weighted_loglik(data, layout, weights, v).is_finite() {
            return Ok(());
        }
        if layout.family != Family::Zigp {
            break;
        }
        v[0] += 0.5;
        if v[0] > ETA_CLAMP {
            break;
        }
    }
    Err(Error::Fit(
        "no feasible starting point: observed counts lie outside the model support".into(),
    ))
}

/// Starting point: mean model from a Poisson fit on the non-zero rows,
/// inflation intercept from the excess of observed zeros, `θ` raw at zero.
fn initial_vector(data: &CountData, layout: &ParamLayout, weights: Option<&[f64]>) -> Vec<f64> {
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let (sum_y, sum_e) = (0..data.len()).fold((0.0, 0.0), |(sy, se), i| {
        (sy + w(i) * data.y[i] as f64, se + w(i) * data.exposure[i])
    });
    let base = if sum_y > 0.0 { (sum_y / sum_e).ln() } else { (0.5 / sum_e).ln() };
    let mut mean_v = vec![0.0; 1 + layout.k];
    mean_v[0] = base.clamp(-ETA_CLAMP + 1.0, ETA_CLAMP - 1.0);

    let poisson = ParamLayout::new(Family::Poisson, layout.k, InflationSpec::Intercept, ThetaMode::Free);
    if !layout.family.is_inflated() {
        if sum_y > 0.0 {
            mean_v = fit_poisson_start(data, &poisson, weights, mean_v);
        }
        return mean_v;
    }
    let nz: Vec<f64> = (0..data.len()).map(|i| if data.y[i] > 0 { w(i) } else { 0.0 }).collect();
    let (nz_y, nz_e) = (0..data.len()).fold((0.0, 0.0), |(sy, se), i| {
        (sy + nz[i] * data.y[i] as f64, se + nz[i] * data.exposure[i])
    });
    if nz_y > 0.0 {
        mean_v[0] = (nz_y / nz_e).ln();
        mean_v = fit_poisson_start(data, &poisson, Some(&nz), mean_v);
    }

    let mean = MeanModel {
        intercept: mean_v[0],
        coefficients: mean_v[1..].to_vec(),
    };
    let (mut zeros, mut p0_model, mut total) = (0.0, 0.0, 0.0);
    for i in 0..data.len() {
        let wi = w(i);
        total += wi;
        if data.y[i] == 0 {
            zeros += wi;
        }
        let m = clamped_mean(mean.linear_predictor(data.row(i)), data.exposure[i]).0;
        p0_model += wi * (-m).exp();
    }
    let (p0_obs, p0_model) = (zeros / total, p0_model / total);
    let excess = if p0_model < 1.0 {
        (p0_obs - p0_model) / (1.0 - p0_model)
    } else {
        0.5
    };
    let gamma0 = logit(excess.clamp(1e-6, 1.0 - 1e-6)).clamp(-4.0, 4.0);

    let mut v = mean_v;
    v.push(gamma0);
    v.resize(layout.len(), 0.0);
    v
}

fn fit_poisson_start(data: &CountData, layout: &ParamLayout, weights: Option<&[f64]>, x0: Vec<f64>) -> Vec<f64> {
    let total: f64 = weights.map_or(data.len() as f64, |w| w.iter().sum());
    let scale = 1.0 / total;
    let objective = |v: &[f64], g: &mut [f64]| {
        let (ll, _) = eval(data, layout, weights, v, Some(g));
        g.iter_mut().for_each(|x| *x *= -scale);
        -ll * scale
    };
    let cfg = BfgsConfig {
        max_iter: 100,
        grad_tol: 1e-7,
        ..Default::default()
    };
    optim::minimize(objective, x0, &cfg).x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DriverWeek, Event};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn table(ys: &[u64], exposures: &[f64], xs: &[Vec<f64>]) -> ObservationTable {
        let k = xs.first().map_or(0, |x| x.len());
        let rows = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| DriverWeek {
                driver_id: format!("d{i}"),
                week: 0,
                exposure_km: exposures[i],
                counts: [y, 0, 0, 0, 0, 0],
                covariates: xs.get(i).cloned().unwrap_or_default(),
            })
            .collect();
        ObservationTable::new(rows, (0..k).map(|j| format!("x{j}")).collect()).unwrap()
    }

    const HB: Target = Target::Event(Event::HarshBraking);

    #[test]
    fn poisson_intercept_is_log_mean_rate() {
        let t = table(&[2, 0, 4], &[1.0; 3], &[]);
        let p = fit_component(&t, HB, &FitOptions::new(Family::Poisson), None).unwrap();
        assert_abs_diff_eq!(p.mean.intercept, 2f64.ln(), epsilon = 1e-8);
        assert!(p.diagnostics.converged);
        assert_eq!(p.n_params, 1);

        let t = table(&[2, 0, 4], &[2.0; 3], &[]);
        let p = fit_component(&t, HB, &FitOptions::new(Family::Poisson), None).unwrap();
        assert_abs_diff_eq!(p.mean.intercept, 0.0, epsilon = 1e-8);
    }

    fn zip_sample(n: usize, pi: f64, mu: f64, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pois = Poisson::new(mu).unwrap();
        (0..n)
            .map(|_| if rng.random::<f64>() < pi { 0 } else { pois.sample(&mut rng) as u64 })
            .collect()
    }

    /// Moment oracle for ZIP: with z = P(0) and c = E[Y | Y > 0], μ solves
    /// μ / (1 - e^{-μ}) = c and π = 1 - (1 - z) / (1 - e^{-μ}).
    fn zip_moment_oracle(ys: &[u64]) -> (f64, f64) {
        let n = ys.len() as f64;
        let z = ys.iter().filter(|&&y| y == 0).count() as f64 / n;
        let pos: Vec<f64> = ys.iter().filter(|&&y| y > 0).map(|&y| y as f64).collect();
        let c = pos.iter().sum::<f64>() / pos.len() as f64;
        let (mut lo, mut hi) = (1e-9f64, 100.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid / (1.0 - (-mid).exp()) < c {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mu = 0.5 * (lo + hi);
        (1.0 - (1.0 - z) / (1.0 - (-mu).exp()), mu)
    }

    #[test]
    fn zip_recovers_inflation_and_rate() {
        let ys = zip_sample(10_000, 0.4, 3.0, 17);
        let (pi_oracle, mu_oracle) = zip_moment_oracle(&ys);
        assert!((pi_oracle - 0.4).abs() < 0.02 && (mu_oracle - 3.0).abs() < 0.1);

        let t = table(&ys, &vec![1.0; ys.len()], &[]);
        let p = fit_component(&t, HB, &FitOptions::new(Family::Zip), None).unwrap();
        let pi = logistic(p.inflation.as_ref().unwrap().intercept);
        let mu = p.mean.intercept.exp();
        assert!((pi - 0.4).abs() < 0.02, "pi={pi}");
        assert!((mu - 3.0).abs() < 0.1, "mu={mu}");
        // intercept-only ZIP MLE coincides with the moment solution
        assert_abs_diff_eq!(pi, pi_oracle, epsilon = 1e-5);
        assert_abs_diff_eq!(mu, mu_oracle, epsilon = 1e-5);
    }

    fn covariate_sample(n: usize, seed: u64) -> (Vec<u64>, Vec<f64>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ys = Vec::new();
        let mut es = Vec::new();
        let mut xs = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let e = 0.5 + rng.random::<f64>();
            let m = e * (0.7 + 0.4 * x[0] - 0.3 * x[1]).exp();
            let pi = logistic(-0.5 + 0.8 * x[1]);
            let y = if rng.random::<f64>() < pi { 0 } else { Poisson::new(m).unwrap().sample(&mut rng) as u64 };
            ys.push(y);
            es.push(e);
            xs.push(x);
        }
        (ys, es, xs)
    }

    fn central_difference(data: &CountData, layout: &ParamLayout, w: Option<&[f64]>, v: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..v.len())
            .map(|j| {
                let mut a = v.to_vec();
                let mut b = v.to_vec();
                a[j] += h;
                b[j] -= h;
                (weighted_loglik(data, layout, w, &a) - weighted_loglik(data, layout, w, &b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (ys, es, xs) = covariate_sample(200, 5);
        let data = CountData::from_table(&table(&ys, &es, &xs), HB);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let weights: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let layouts = [
            ParamLayout::new(Family::Poisson, 2, InflationSpec::Intercept, ThetaMode::Free),
            ParamLayout::new(Family::Zip, 2, InflationSpec::Full, ThetaMode::Free),
            ParamLayout::new(Family::Zigp, 2, InflationSpec::Full, ThetaMode::Free),
            ParamLayout::new(Family::Zigp, 2, InflationSpec::Intercept, ThetaMode::Fixed(0.3)),
        ];
        for layout in layouts {
            for _ in 0..5 {
                let v: Vec<f64> = (0..layout.len()).map(|_| rng.random::<f64>() - 0.5).collect();
                let (_, g) = weighted_loglik_grad(&data, &layout, Some(&weights), &v);
                let fd = central_difference(&data, &layout, Some(&weights), &v);
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{layout:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn unit_weights_match_unweighted_fit() {
        let (ys, es, xs) = covariate_sample(300, 8);
        let t = table(&ys, &es, &xs);
        let opts = FitOptions::new(Family::Zip);
        let a = fit_component(&t, HB, &opts, None).unwrap();
        let b = fit_component(&t, HB, &opts, Some(&vec![1.0; ys.len()])).unwrap();
        assert!((a.loglik - b.loglik).abs() <= 1e-8);
    }

    #[test]
    fn exposure_rescaling_shifts_intercept_only() {
        let (ys, es, xs) = covariate_sample(400, 21);
        let data = CountData::from_table(&table(&ys, &es, &xs), HB);
        let names = vec!["x0".to_string(), "x1".to_string()];
        for family in [Family::Poisson, Family::Zip] {
            let opts = FitOptions::new(family);
            let a = fit_data(&data, &names, &opts, None, None).unwrap();
            let c = 3.7;
            let scaled = data.rescale_exposure(c);
            let b = fit_data(&scaled, &names, &opts, None, None).unwrap();
            assert_abs_diff_eq!(b.mean.intercept, a.mean.intercept - c.ln(), epsilon = 1e-6);
            for i in 0..data.len() {
                let ma = a.expected_count(data.row(i), data.exposure[i]);
                let mb = b.expected_count(scaled.row(i), scaled.exposure[i]);
                assert!((ma - mb).abs() <= 1e-6 * ma, "{family}: {ma} vs {mb}");
            }
        }
    }

    #[test]
    fn accepted_steps_never_lower_loglik() {
        let (ys, es, xs) = covariate_sample(300, 4);
        let t = table(&ys, &es, &xs);
        let mut opts = FitOptions::new(Family::Zigp);
        opts.inflation = InflationSpec::Full;
        let p = fit_component(&t, HB, &opts, None).unwrap();
        assert!(p.diagnostics.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(p.diagnostics.converged);
        assert_eq!(p.n_params, 1 + 2 + 1 + 2 + 1);
    }

    #[test]
    fn zero_weight_rows_are_ignored() {
        let (ys, es, xs) = covariate_sample(200, 13);
        let t = table(&ys, &es, &xs);
        let w: Vec<f64> = (0..200).map(|i| if i < 120 { 1.0 } else { 0.0 }).collect();
        let opts = FitOptions::new(Family::Zip);
        let a = fit_component(&t, HB, &opts, Some(&w)).unwrap();
        let sub = table(&ys[..120], &es[..120], &xs[..120]);
        let b = fit_component(&sub, HB, &opts, None).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-7);
    }

    #[test]
    fn negative_theta_start_is_repaired() {
        let t = table(&[0, 1, 9, 2, 0, 3], &[1.0; 6], &[]);
        let mut opts = FitOptions::new(Family::Zigp);
        opts.theta = ThetaMode::Fixed(-0.25);
        let p = fit_component(&t, HB, &opts, None).unwrap();
        assert!(p.loglik.is_finite());
    }

    #[test]
    fn rejects_bad_weights() {
        let t = table(&[1, 2], &[1.0; 2], &[]);
        let opts = FitOptions::new(Family::Poisson);
        assert!(fit_component(&t, HB, &opts, Some(&[1.0])).is_err());
        assert!(fit_component(&t, HB, &opts, Some(&[1.0, -1.0])).is_err());
    }
}
