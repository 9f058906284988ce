//! Cross-validated evaluation and sweeps over the number of groups and the
//! dispersion grid.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{stratified_group_kfold, FoldAssignment, ObservationTable, Target};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, evaluate_with_fit, fmt_num, MetricsReport};
use crate::model::ThetaMode;
use crate::pipeline::{ModelFamily, ModelSpec};

/// Value substituted for a requested dispersion of exactly ±1.
pub const THETA_EDGE: f64 = 0.999;

/// K-fold cross-validated report for one model on one target.
pub fn run_cv(table: &ObservationTable, target: Target, spec: &ModelSpec, k: usize, seed: u64) -> Result<MetricsReport> {
    let folds = stratified_group_kfold(table, k, target, seed)?;
    evaluate(spec, table, target, Some(&folds))
}

/// Maps a requested grid value into the open interval, sending ±1 to
/// ±[`THETA_EDGE`] with a warning.
pub fn grid_theta(t: f64) -> Result<f64> {
    if t.abs() < 1.0 {
        Ok(t)
    } else if t.abs() == 1.0 {
        let mapped = THETA_EDGE.copysign(t);
        warn!("theta {t} lies on the boundary; using {mapped}");
        Ok(mapped)
    } else {
        Err(Error::Config(format!("theta grid value {t} outside [-1, 1]")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub families: Vec<ModelFamily>,
    /// Group counts for the grouped families.
    pub groups: Vec<usize>,
    /// Fixed dispersion values for `gzigp`.
    pub thetas: Vec<f64>,
    pub targets: Vec<Target>,
    pub folds: usize,
    pub seed: u64,
    /// Settings shared by every cell.
    pub base: ModelSpec,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            families: vec![ModelFamily::Poisson, ModelFamily::Zip, ModelFamily::Gzip, ModelFamily::Gzigp],
            groups: vec![1, 2, 3, 4],
            thetas: (-3..=3).map(|i| i as f64 * 0.25).collect(),
            targets: Target::all(),
            folds: 5,
            seed: 0,
            base: ModelSpec::new(ModelFamily::Poisson),
        }
    }
}

impl SweepSpec {
    /// Checks the grid and maps boundary dispersion values inward.
    pub fn normalized(&self) -> Result<SweepSpec> {
        if self.targets.is_empty() || self.families.is_empty() {
            return Err(Error::Config("a sweep needs at least one target and one family".into()));
        }
        if self.groups.is_empty() || self.groups.iter().any(|&g| g == 0 || g > 10) {
            return Err(Error::Config(format!("group counts must lie in 1..=10, got {:?}", self.groups)));
        }
        if self.families.contains(&ModelFamily::Gzigp) && self.thetas.is_empty() {
            return Err(Error::Config("gzigp needs at least one theta".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("at least two folds are required".into()));
        }
        let mut out = self.clone();
        out.thetas = self.thetas.iter().map(|&t| grid_theta(t)).collect::<Result<_>>()?;
        Ok(out)
    }

    /// Every cell of the grid in sorted order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells = BTreeSet::new();
        for &target in &self.targets {
            for &family in &self.families {
                match family {
                    ModelFamily::Poisson | ModelFamily::Zip => {
                        cells.insert(CellKey {
                            target,
                            family,
                            groups: 1,
                            theta: None,
                        });
                    }
                    ModelFamily::Gzip => {
                        for &groups in &self.groups {
                            cells.insert(CellKey {
                                target,
                                family,
                                groups,
                                theta: None,
                            });
                        }
                    }
                    ModelFamily::Gzigp => {
                        for &groups in &self.groups {
                            for &t in &self.thetas {
                                cells.insert(CellKey {
                                    target,
                                    family,
                                    groups,
                                    theta: Some(t),
                                });
                            }
                        }
                    }
                }
            }
        }
        cells.into_iter().collect()
    }

    /// Model settings of one cell, seeded from the cell key.
    pub fn cell_spec(&self, key: &CellKey) -> ModelSpec {
        let mut spec = self.base.clone();
        spec.family = key.family;
        spec.groups = key.groups;
        if let Some(t) = key.theta {
            spec.theta = ThetaMode::Fixed(t);
        }
        spec.seed = key.seed(self.seed);
        spec
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CellKey {
    pub target: Target,
    pub family: ModelFamily,
    pub groups: usize,
    pub theta: Option<f64>,
}

impl CellKey {
    /// `hash(base_seed, target, family, G, θ)` truncated to 64 bits.
    pub fn seed(&self, base_seed: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(base_seed.to_le_bytes());
        h.update(self.target.name().as_bytes());
        h.update([0]);
        h.update(self.family.name().as_bytes());
        h.update((self.groups as u64).to_le_bytes());
        match self.theta {
            Some(t) => h.update(t.to_bits().to_le_bytes()),
            None => h.update(b"none"),
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
    }
}

impl PartialEq for CellKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for CellKey {}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.target
            .name()
            .cmp(other.target.name())
            .then(self.family.cmp(&other.family))
            .then(self.groups.cmp(&other.groups))
            .then(match (self.theta, other.theta) {
                (None, None) => Ordering::Equal,
                (None, Some(_)) => Ordering::Less,
                (Some(_), None) => Ordering::Greater,
                (Some(a), Some(b)) => a.total_cmp(&b),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    /// Fitted, but an optimiser or EM run hit its iteration cap.
    Nonconverged,
    /// Some folds failed; CV metrics use the remaining ones.
    Partial,
    Failed,
}

impl CellStatus {
    pub fn name(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Nonconverged => "nonconverged",
            CellStatus::Partial => "partial",
            CellStatus::Failed => "failed",
        }
    }
}

/// One row of the long-format sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: Target,
    pub family: ModelFamily,
    pub groups: usize,
    pub theta: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub loglik: Option<f64>,
    pub n_params: Option<usize>,
    pub dev_mean: Option<f64>,
    pub dev_std: Option<f64>,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub chi2: Option<f64>,
    pub mcfadden: Option<f64>,
    pub brier: Option<f64>,
    pub status: CellStatus,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const SWEEP_CSV_HEADER: [&str; 16] = [
    "target", "family", "G", "theta", "aic", "bic", "loglik", "n_params", "dev_mean", "dev_std", "rmse_mean",
    "rmse_std", "chi2", "mcfadden", "brier", "status",
];

impl SweepRow {
    pub fn key(&self) -> CellKey {
        CellKey {
            target: self.target,
            family: self.family,
            groups: self.groups,
            theta: self.theta,
        }
    }

    fn failed(key: &CellKey, seed: u64, error: String) -> Self {
        SweepRow {
            target: key.target,
            family: key.family,
            groups: key.groups,
            theta: key.theta,
            aic: None,
            bic: None,
            loglik: None,
            n_params: None,
            dev_mean: None,
            dev_std: None,
            rmse_mean: None,
            rmse_std: None,
            chi2: None,
            mcfadden: None,
            brier: None,
            status: CellStatus::Failed,
            seed,
            error: Some(error),
        }
    }

    fn from_report(key: &CellKey, seed: u64, r: &MetricsReport, converged: bool) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        let status = if r.is_partial() {
            CellStatus::Partial
        } else if !converged {
            CellStatus::Nonconverged
        } else {
            CellStatus::Ok
        };
        SweepRow {
            target: key.target,
            family: key.family,
            groups: key.groups,
            theta: key.theta,
            aic: finite(r.aic),
            bic: finite(r.bic),
            loglik: finite(r.loglik),
            n_params: Some(r.n_params),
            dev_mean: finite(r.poisson_deviance_mean),
            dev_std: finite(r.poisson_deviance_std),
            rmse_mean: finite(r.rmse_mean),
            rmse_std: finite(r.rmse_std),
            chi2: finite(r.pearson_chi2),
            mcfadden: finite(r.mcfadden_r2),
            brier: finite(r.brier_zero),
            status,
            seed,
            error: None,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status != CellStatus::Failed
    }

    pub fn csv_record(&self) -> Vec<String> {
        let num = |x: Option<f64>| x.map_or(String::new(), fmt_num);
        vec![
            self.target.to_string(),
            self.family.to_string(),
            self.groups.to_string(),
            self.theta.map_or(String::new(), |t| t.to_string()),
            num(self.aic),
            num(self.bic),
            num(self.loglik),
            self.n_params.map_or(String::new(), |p| p.to_string()),
            num(self.dev_mean),
            num(self.dev_std),
            num(self.rmse_mean),
            num(self.rmse_std),
            num(self.chi2),
            num(self.mcfadden),
            num(self.brier),
            self.status.name().to_string(),
        ]
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SWEEP_CSV_HEADER)?;
    for r in rows {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

/// Fold assignment shared by every model of one target.
pub fn sweep_folds(table: &ObservationTable, target: Target, spec: &SweepSpec) -> Result<FoldAssignment> {
    stratified_group_kfold(table, spec.folds, target, spec.seed)
}

/// Evaluates a single cell; the result is identical to that cell's row in
/// a full sweep with the same spec.
pub fn run_cell(table: &ObservationTable, spec: &SweepSpec, key: &CellKey) -> SweepRow {
    let folds = sweep_folds(table, key.target, spec);
    run_cell_with(table, spec, key, folds.as_ref().map_err(|e| e.to_string()))
}

fn run_cell_with(
    table: &ObservationTable,
    spec: &SweepSpec,
    key: &CellKey,
    folds: std::result::Result<&FoldAssignment, String>,
) -> SweepRow {
    let cell = spec.cell_spec(key);
    let folds = match folds {
        Ok(f) => f,
        Err(e) => return SweepRow::failed(key, cell.seed, e),
    };
    let outcome = evaluate_with_fit(&cell, table, key.target, Some(folds)).map(|(full, r)| (full.model.converged(), r));
    match outcome {
        Ok((converged, report)) => SweepRow::from_report(key, cell.seed, &report, converged),
        Err(e) => {
            warn!(
                "cell {} / {} / G={} / theta={:?} failed: {e}",
                key.target, key.family, key.groups, key.theta
            );
            SweepRow::failed(key, cell.seed, e.to_string())
        }
    }
}

/// Runs every cell of `spec` in the current rayon pool.
pub fn sweep(table: &ObservationTable, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    sweep_resume(table, spec, Vec::new(), |_| {})
}

/// Runs the cells of `spec` not already present in `done`, calling
/// `on_row` as each finishes, and returns all rows sorted by cell key.
pub fn sweep_resume<F>(table: &ObservationTable, spec: &SweepSpec, done: Vec<SweepRow>, on_row: F) -> Result<Vec<SweepRow>>
where
    F: Fn(&SweepRow) + Sync,
{
    let spec = spec.normalized()?;
    let mut rows: BTreeMap<CellKey, SweepRow> = done.into_iter().map(|r| (r.key(), r)).collect();
    let pending: Vec<CellKey> = spec.cells().into_iter().filter(|k| !rows.contains_key(k)).collect();
    let folds: BTreeMap<String, std::result::Result<FoldAssignment, String>> = spec
        .targets
        .iter()
        .map(|&t| (t.name().to_string(), sweep_folds(table, t, &spec).map_err(|e| e.to_string())))
        .collect();
    let fresh: Vec<SweepRow> = pending
        .par_iter()
        .map(|key| {
            let f = folds[key.target.name()].as_ref().map_err(Clone::clone);
            let row = run_cell_with(table, &spec, key, f);
            on_row(&row);
            row
        })
        .collect();
    for r in fresh {
        rows.insert(r.key(), r);
    }
    Ok(rows.into_values().collect())
}
