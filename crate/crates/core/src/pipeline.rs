//! Feature filtering, standardisation and model fitting as one unit, so
//! that held-out data is always transformed with training statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{filter_features, standardize, FeatureStats, ObservationTable, Target};
use crate::em::{fit_em, EmConfig, Membership, MixtureModel};
use crate::error::{Error, Result};
use crate::fit::{fit_component, FitOptions};
use crate::model::{ComponentParams, Family, InflationSpec, ThetaMode};

/// The four model specifications compared throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Poisson,
    Zip,
    Gzip,
    Gzigp,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Poisson => "poisson",
            ModelFamily::Zip => "zip",
            ModelFamily::Gzip => "gzip",
            ModelFamily::Gzigp => "gzigp",
        }
    }

    pub fn is_grouped(self) -> bool {
        matches!(self, ModelFamily::Gzip | ModelFamily::Gzigp)
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "").as_str() {
            "poisson" => Ok(ModelFamily::Poisson),
            "zip" => Ok(ModelFamily::Zip),
            "gzip" => Ok(ModelFamily::Gzip),
            "gzigp" | "zigp" => Ok(ModelFamily::Gzigp),
            _ => Err(Error::Config(format!("unknown model `{s}` (poisson, zip, gzip, gzigp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Ignored for the ungrouped families.
    pub groups: usize,
    pub theta: ThetaMode,
    pub inflation: InflationSpec,
    pub max_features: usize,
    /// Iteration cap for single-component fits.
    pub max_iter: usize,
    pub epsilon: f64,
    pub max_em_iters: usize,
    pub mstep_max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(family: ModelFamily) -> Self {
        ModelSpec {
            family,
            groups: 1,
            theta: ThetaMode::Free,
            inflation: InflationSpec::Intercept,
            max_features: 10,
            max_iter: 800,
            epsilon: 1e-4,
            max_em_iters: 100,
            mstep_max_iters: 200,
            restarts: 3,
            seed: 0,
        }
    }

    pub fn grouped(family: ModelFamily, groups: usize) -> Self {
        ModelSpec {
            groups,
            ..ModelSpec::new(family)
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            groups: self.groups,
            family: if self.family == ModelFamily::Gzigp { Family::Zigp } else { Family::Zip },
            epsilon: self.epsilon,
            max_em_iters: self.max_em_iters,
            mstep_max_iters: self.mstep_max_iters,
            seed: self.seed,
            n_restarts: self.restarts,
            theta: self.theta,
            inflation: self.inflation,
        }
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            family: match self.family {
                ModelFamily::Poisson => Family::Poisson,
                _ => Family::Zip,
            },
            inflation: self.inflation,
            theta: ThetaMode::Free,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedModel {
    Single(ComponentParams),
    Mixture(MixtureModel),
}

impl FittedModel {
    pub fn loglik(&self) -> f64 {
        match self {
            FittedModel::Single(p) => p.loglik,
            FittedModel::Mixture(m) => m.loglik,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            FittedModel::Single(p) => p.n_params,
            FittedModel::Mixture(m) => m.n_params,
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            FittedModel::Single(p) => p.diagnostics.converged,
            FittedModel::Mixture(m) => m.converged && m.components.iter().all(|c| c.diagnostics.converged),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub zero_prob: f64,
}

/// A fitted model together with the feature map it was trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedPipeline {
    pub target: Target,
    pub spec: ModelSpec,
    pub stats: FeatureStats,
    pub n_obs: usize,
    pub model: FittedModel,
}

impl FittedPipeline {
    /// Filters features on `raw`, standardises with in-sample statistics
    /// and fits the specified model.
    pub fn fit(raw: &ObservationTable, target: Target, spec: &ModelSpec) -> Result<Self> {
        let stats = filter_features(raw, spec.max_features, target)?;
        let (table, stats) = standardize(raw, Some(&stats))?;
        let model = if spec.family.is_grouped() {
            FittedModel::Mixture(fit_em(&table, target, &spec.em_config())?)
        } else {
            FittedModel::Single(fit_component(&table, target, &spec.fit_options(), None)?)
        };
        Ok(FittedPipeline {
            target,
            spec: spec.clone(),
            stats,
            n_obs: table.len(),
            model,
        })
    }

    /// `raw` mapped through the training feature statistics.
    pub fn prepare(&self, raw: &ObservationTable) -> Result<ObservationTable> {
        Ok(standardize(raw, Some(&self.stats))?.0)
    }

    pub fn loglik(&self) -> f64 {
        self.model.loglik()
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params()
    }

    /// Log-likelihood of `raw`; for mixtures the observed-data likelihood
    /// with prior weights, which on the training data equals the fitted one.
    pub fn score(&self, raw: &ObservationTable) -> Result<f64> {
        let table = self.prepare(raw)?;
        match &self.model {
            FittedModel::Single(p) => Ok(table
                .rows()
                .iter()
                .map(|r| p.logpmf(r.target(self.target), &r.covariates, r.exposure_km))
                .sum()),
            FittedModel::Mixture(m) => m.observed_loglik(&table, self.target),
        }
    }

    /// Predicted mean and zero probability per row of `raw`.
    pub fn predict(&self, raw: &ObservationTable, membership: Membership) -> Result<Vec<Prediction>> {
        let table = self.prepare(raw)?;
        table
            .rows()
            .iter()
            .map(|r| match &self.model {
                FittedModel::Single(p) => Ok(Prediction {
                    mean: p.expected_count(&r.covariates, r.exposure_km),
                    zero_prob: p.zero_prob(&r.covariates, r.exposure_km),
                }),
                FittedModel::Mixture(m) => Ok(Prediction {
                    mean: m.predict_mean(r, membership)?,
                    zero_prob: m.predict_zero_prob(r, membership)?,
                }),
            })
            .collect()
    }
}
