//! Driver-week observation tables.
//!
//! Rows are weekly aggregates per driver: an exposure (km driven), the six
//! near-miss event counts and a vector of contextual covariates. The
//! combination count is derived as the sum of the six events.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    HarshBraking,
    HarshAcceleration,
    SpeedingSerious,
    ForwardCollision,
    LaneDeparture,
    TooCloseDistance,
}

impl Event {
    pub const ALL: [Event; 6] = [
        Event::HarshBraking,
        Event::HarshAcceleration,
        Event::SpeedingSerious,
        Event::ForwardCollision,
        Event::LaneDeparture,
        Event::TooCloseDistance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Event::HarshBraking => "harsh_braking",
            Event::HarshAcceleration => "harsh_acceleration",
            Event::SpeedingSerious => "speeding_serious",
            Event::ForwardCollision => "forward_collision",
            Event::LaneDeparture => "lane_departure",
            Event::TooCloseDistance => "too_close_distance",
        }
    }

    /// Column header used in the weekly CSV.
    pub fn column(self) -> &'static str {
        match self {
            Event::HarshBraking => "sum_harsh_braking",
            Event::HarshAcceleration => "sum_harsh_acceleration",
            Event::SpeedingSerious => "sum_speeding_serious",
            Event::ForwardCollision => "sum_forward_collision",
            Event::LaneDeparture => "sum_lane_departure",
            Event::TooCloseDistance => "sum_too_close_distance",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Event {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let key = key.strip_prefix("sum_").unwrap_or(&key);
        if key == "serious_speeding" {
            return Ok(Event::SpeedingSerious);
        }
        Event::ALL
            .into_iter()
            .find(|e| e.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown event `{s}`")))
    }
}

/// A modelled count series: one event type or the combination total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Target {
    Event(Event),
    NmeTotal,
}

impl Target {
    /// The six events followed by the combination total.
    pub fn all() -> Vec<Target> {
        Event::ALL
            .into_iter()
            .map(Target::Event)
            .chain(std::iter::once(Target::NmeTotal))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Event(e) => e.name(),
            Target::NmeTotal => "nme_total",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        if key == "nme_total" || key == "total" {
            return Ok(Target::NmeTotal);
        }
        Event::from_str(&key).map(Target::Event)
    }
}

impl From<Target> for String {
    fn from(t: Target) -> String {
        t.name().to_string()
    }
}

impl TryFrom<String> for Target {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverWeek {
    pub driver_id: String,
    pub week: u32,
    pub exposure_km: f64,
    /// Indexed by [`Event::index`].
    pub counts: [u64; 6],
    pub covariates: Vec<f64>,
}

impl DriverWeek {
    pub fn count(&self, event: Event) -> u64 {
        self.counts[event.index()]
    }

    pub fn nme_total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn target(&self, target: Target) -> u64 {
        match target {
            Target::Event(e) => self.count(e),
            Target::NmeTotal => self.nme_total(),
        }
    }
}

/// Immutable, validated collection of driver-weeks.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationTable {
    rows: Vec<DriverWeek>,
    feature_names: Vec<String>,
    nme_total: Vec<u64>,
}

impl ObservationTable {
    pub fn new(rows: Vec<DriverWeek>, feature_names: Vec<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        let k = feature_names.len();
        let mut seen = HashSet::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.covariates.len() != k {
                return Err(Error::CovariateLength {
                    row: i,
                    expected: k,
                    found: row.covariates.len(),
                });
            }
            if !(row.exposure_km > 0.0) || !row.exposure_km.is_finite() {
                return Err(Error::domain(format!(
                    "row {i}: exposure must be positive, got {}",
                    row.exposure_km
                )));
            }
            if row.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::domain(format!("row {i}: non-finite covariate")));
            }
            if !seen.insert((row.driver_id.as_str(), row.week)) {
                return Err(Error::DuplicateRow {
                    driver_id: row.driver_id.clone(),
                    week: row.week,
                });
            }
        }
        let nme_total = rows.iter().map(DriverWeek::nme_total).collect();
        Ok(ObservationTable {
            rows,
            feature_names,
            nme_total,
        })
    }

    pub fn rows(&self) -> &[DriverWeek] {
        &self.rows
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn nme_total(&self) -> &[u64] {
        &self.nme_total
    }

    pub fn target_counts(&self, target: Target) -> Vec<u64> {
        match target {
            Target::NmeTotal => self.nme_total.clone(),
            Target::Event(e) => self.rows.iter().map(|r| r.count(e)).collect(),
        }
    }

    pub fn exposures(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.exposure_km).collect()
    }

    pub fn feature_column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.covariates[j]).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Distinct drivers in order of first appearance, and the driver
    /// position of every row.
    pub fn driver_index(&self) -> (Vec<String>, Vec<usize>) {
        let mut ids: Vec<String> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        let mut of_row = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            let next = ids.len();
            let p = *pos.entry(r.driver_id.as_str()).or_insert_with(|| {
                ids.push(r.driver_id.clone());
                next
            });
            of_row.push(p);
        }
        (ids, of_row)
    }

    pub fn n_drivers(&self) -> usize {
        self.driver_index().0.len()
    }

    /// Rows whose driver satisfies `keep`, order preserved.
    pub fn filter_drivers(&self, keep: impl Fn(&str) -> bool) -> Result<ObservationTable> {
        let rows: Vec<DriverWeek> = self
            .rows
            .iter()
            .filter(|r| keep(&r.driver_id))
            .cloned()
            .collect();
        ObservationTable::new(rows, self.feature_names.clone())
    }

    /// `(train, test)` for one fold of a driver-level assignment.
    pub fn split(
        &self,
        folds: &FoldAssignment,
        fold: usize,
    ) -> Result<(ObservationTable, ObservationTable)> {
        let in_fold = |d: &str| folds.fold_of(d) == Some(fold);
        let train = self.filter_drivers(|d| !in_fold(d))?;
        let test = self.filter_drivers(in_fold)?;
        Ok((train, test))
    }

    /// Writes the table in the ingest CSV layout.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["driver_id".to_string(), "week".into(), "total_distance".into()];
        header.extend(Event::ALL.iter().map(|e| e.column().to_string()));
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.driver_id.clone(), r.week.to_string(), r.exposure_km.to_string()];
            rec.extend(r.counts.iter().map(u64::to_string));
            rec.extend(r.covariates.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_nonpositive_exposure: usize,
    pub dropped_missing_target: usize,
    pub dropped_missing_covariate: usize,
    pub kept: usize,
    /// Columns skipped during covariate auto-detection.
    pub skipped_columns: Vec<String>,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.dropped_nonpositive_exposure + self.dropped_missing_target + self.dropped_missing_covariate
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Explicit covariate columns. When `None`, every remaining numeric
    /// column not matched by `exclude` is used.
    pub covariates: Option<Vec<String>>,
    pub exclude: Vec<String>,
}

const DRIVER_ALIASES: &[&str] = &["driver_id", "driver", "id_driver"];
const WEEK_ALIASES: &[&str] = &["week", "week_index", "week_id"];
const EXPOSURE_COLUMN: &str = "total_distance";
/// Claim-history fields are never covariates.
const ALWAYS_EXCLUDED: &[&str] = &["claims_count", "exposure_in_weeks"];

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("null")
}

pub fn load_csv(path: impl AsRef<Path>, targets: &[Target]) -> Result<(ObservationTable, LoadReport)> {
    load_csv_with(path, targets, &LoadOptions::default())
}

pub fn load_csv_with(
    path: impl AsRef<Path>,
    targets: &[Target],
    options: &LoadOptions,
) -> Result<(ObservationTable, LoadReport)> {
    let file = std::fs::File::open(path)?;
    read_csv(file, targets, options)
}

/// Parses the weekly CSV layout from any reader.
pub fn read_csv<R: Read>(
    reader: R,
    targets: &[Target],
    options: &LoadOptions,
) -> Result<(ObservationTable, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |aliases: &[&str]| -> Option<usize> {
        header
            .iter()
            .position(|h| aliases.iter().any(|a| h.eq_ignore_ascii_case(a)))
    };
    let driver_col = find(DRIVER_ALIASES).ok_or_else(|| Error::MissingColumn("driver_id".into()))?;
    let week_col = find(WEEK_ALIASES).ok_or_else(|| Error::MissingColumn("week".into()))?;
    let exposure_col = find(&[EXPOSURE_COLUMN]).ok_or_else(|| Error::MissingColumn(EXPOSURE_COLUMN.into()))?;
    let mut event_cols = [0usize; 6];
    for e in Event::ALL {
        event_cols[e.index()] = find(&[e.column()]).ok_or_else(|| Error::MissingColumn(e.column().into()))?;
    }

    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let mut report = LoadReport {
        rows_read: records.len(),
        ..Default::default()
    };

    let reserved: HashSet<usize> = [driver_col, week_col, exposure_col]
        .into_iter()
        .chain(event_cols)
        .collect();
    let covariate_cols: Vec<usize> = match &options.covariates {
        Some(names) => names
            .iter()
            .map(|n| {
                header
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| Error::MissingColumn(n.clone()))
            })
            .collect::<Result<_>>()?,
        None => {
            let mut cols = Vec::new();
            for (j, name) in header.iter().enumerate() {
                if reserved.contains(&j)
                    || ALWAYS_EXCLUDED.iter().any(|x| name.eq_ignore_ascii_case(x))
                    || options.exclude.iter().any(|x| x == name)
                {
                    continue;
                }
                let numeric = records.iter().all(|r| {
                    let v = r.get(j).unwrap_or("");
                    is_missing(v) || v.parse::<f64>().is_ok()
                });
                if numeric {
                    cols.push(j);
                } else {
                    warn!("column `{name}` is not numeric and is not used as a covariate");
                    report.skipped_columns.push(name.clone());
                }
            }
            cols
        }
    };
    if covariate_cols.is_empty() {
        return Err(Error::MissingColumn("<covariate>".into()));
    }
    let feature_names: Vec<String> = covariate_cols.iter().map(|&j| header[j].clone()).collect();

    let needed: HashSet<Event> = if targets.is_empty() || targets.contains(&Target::NmeTotal) {
        Event::ALL.into_iter().collect()
    } else {
        targets
            .iter()
            .filter_map(|t| match t {
                Target::Event(e) => Some(*e),
                Target::NmeTotal => None,
            })
            .collect()
    };

    let mut rows = Vec::with_capacity(records.len());
    'records: for (i, rec) in records.iter().enumerate() {
        let line = i + 2;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let parse_err = |j: usize, message: String| Error::Parse {
            row: line,
            column: header[j].clone(),
            message,
        };

        let driver_id = field(driver_col).to_string();
        if driver_id.is_empty() {
            return Err(parse_err(driver_col, "empty driver id".into()));
        }
        let week: u32 = parse_count(field(week_col))
            .and_then(|w| u32::try_from(w).ok())
            .ok_or_else(|| parse_err(week_col, format!("invalid week `{}`", field(week_col))))?;

        let raw_exposure = field(exposure_col);
        let exposure_km = if is_missing(raw_exposure) {
            f64::NAN
        } else {
            raw_exposure
                .parse::<f64>()
                .map_err(|e| parse_err(exposure_col, e.to_string()))?
        };
        if !(exposure_km > 0.0) || !exposure_km.is_finite() {
            report.dropped_nonpositive_exposure += 1;
            continue;
        }

        let mut counts = [0u64; 6];
        for e in Event::ALL {
            let j = event_cols[e.index()];
            let v = field(j);
            if is_missing(v) {
                if needed.contains(&e) {
                    report.dropped_missing_target += 1;
                    continue 'records;
                }
                continue;
            }
            counts[e.index()] =
                parse_count(v).ok_or_else(|| parse_err(j, format!("invalid count `{v}`")))?;
        }

        let mut covariates = Vec::with_capacity(covariate_cols.len());
        for &j in &covariate_cols {
            let v = field(j);
            if is_missing(v) {
                report.dropped_missing_covariate += 1;
                continue 'records;
            }
            let x: f64 = v.parse().map_err(|e: std::num::ParseFloatError| parse_err(j, e.to_string()))?;
            if !x.is_finite() {
                return Err(parse_err(j, format!("non-finite value `{v}`")));
            }
            covariates.push(x);
        }
        rows.push(DriverWeek {
            driver_id,
            week,
            exposure_km,
            counts,
            covariates,
        });
    }
    report.kept = rows.len();
    if rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    let table = ObservationTable::new(rows, feature_names)?;
    Ok((table, report))
}

/// Accepts `3` and `3.0` but not `3.5` or negatives.
fn parse_count(s: &str) -> Option<u64> {
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    let x: f64 = s.parse().ok()?;
    (x >= 0.0 && x.fract() == 0.0 && x < 9.0e15).then_some(x as u64)
}

/// Affine maps and the selected feature subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub selected_features: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Features dropped for lack of variation.
    #[serde(default)]
    pub excluded: Vec<String>,
    pub cap: usize,
}

impl FeatureStats {
    pub fn len(&self) -> usize {
        self.selected_features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_features.is_empty()
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }
}

fn has_variation(sd: f64, mean: f64) -> bool {
    sd.is_finite() && sd > 1e-12 * mean.abs().max(1.0)
}

/// Z-scores features with population statistics.
///
/// Without `stats`, every feature with variation is kept and its statistics
/// are computed from `table`; constant features are excluded with a
/// warning. With `stats`, the supplied map is applied unchanged and the
/// output carries exactly `stats.selected_features`, in that order.
pub fn standardize(
    table: &ObservationTable,
    stats: Option<&FeatureStats>,
) -> Result<(ObservationTable, FeatureStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => {
            let mut out = FeatureStats {
                selected_features: Vec::new(),
                means: Vec::new(),
                sds: Vec::new(),
                excluded: Vec::new(),
                cap: table.n_features(),
            };
            for (j, name) in table.feature_names().iter().enumerate() {
                let col = table.feature_column(j);
                let m = math::mean(&col);
                let sd = math::population_sd(&col);
                if has_variation(sd, m) {
                    out.selected_features.push(name.clone());
                    out.means.push(m);
                    out.sds.push(sd);
                } else {
                    warn!("feature `{name}` has zero variance and is excluded");
                    out.excluded.push(name.clone());
                }
            }
            out
        }
    };
    let cols: Vec<usize> = stats
        .selected_features
        .iter()
        .map(|f| {
            table
                .feature_index(f)
                .ok_or_else(|| Error::FeatureMismatch(format!("table lacks feature `{f}`")))
        })
        .collect::<Result<_>>()?;
    let rows = table
        .rows()
        .iter()
        .map(|r| {
            let raw: Vec<f64> = cols.iter().map(|&j| r.covariates[j]).collect();
            DriverWeek {
                covariates: stats.apply(&raw),
                ..r.clone()
            }
        })
        .collect();
    let out = ObservationTable::new(rows, stats.selected_features.clone())?;
    Ok((out, stats))
}

/// Selects up to `cap` features for the mean model of `target`.
///
/// Constant features are dropped; the rest are ranked by the absolute
/// Pearson correlation with the exposure-normalised rate `y / E`, ties
/// broken by column order. The result lists the kept features in column
/// order together with their (population) standardisation statistics.
pub fn filter_features(table: &ObservationTable, cap: usize, target: Target) -> Result<FeatureStats> {
    if cap == 0 {
        return Err(Error::Config("feature cap must be at least 1".into()));
    }
    let rate: Vec<f64> = table
        .rows()
        .iter()
        .map(|r| r.target(target) as f64 / r.exposure_km)
        .collect();
    let mut candidates = Vec::new();
    let mut excluded = Vec::new();
    for (j, name) in table.feature_names().iter().enumerate() {
        let col = table.feature_column(j);
        let m = math::mean(&col);
        let sd = math::population_sd(&col);
        if has_variation(sd, m) {
            let r = math::pearson(&col, &rate).abs();
            candidates.push((j, r, m, sd));
        } else {
            warn!("feature `{name}` has zero variance and is excluded");
            excluded.push(name.clone());
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoFeaturesRemain);
    }
    // stable sort keeps column order among ties
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    candidates.truncate(cap);
    candidates.sort_by_key(|c| c.0);
    Ok(FeatureStats {
        selected_features: candidates
            .iter()
            .map(|c| table.feature_names()[c.0].clone())
            .collect(),
        means: candidates.iter().map(|c| c.2).collect(),
        sds: candidates.iter().map(|c| c.3).collect(),
        excluded,
        cap,
    })
}

/// Driver-level fold membership.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of_driver: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, driver: &str) -> Option<usize> {
        self.fold_of_driver.get(driver).copied()
    }

    pub fn drivers_in(&self, fold: usize) -> Vec<&str> {
        self.fold_of_driver
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(d, _)| d.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.fold_of_driver.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Drivers with any non-zero `target` count in any week.
pub fn nonzero_drivers(table: &ObservationTable, target: Target) -> HashSet<String> {
    table
        .rows()
        .iter()
        .filter(|r| r.target(target) > 0)
        .map(|r| r.driver_id.clone())
        .collect()
}

/// Stratified grouped K-fold over drivers.
///
/// Drivers are split into two strata (any non-zero `target` week versus
/// all-zero), each stratum is shuffled with `seed`, and drivers are dealt
/// round-robin across folds, the second stratum continuing where the first
/// stopped so fold sizes differ by at most one.
pub fn stratified_group_kfold(
    table: &ObservationTable,
    k: usize,
    target: Target,
    seed: u64,
) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config("at least two folds are required".into()));
    }
    let (drivers, _) = table.driver_index();
    if drivers.len() < k {
        return Err(Error::TooFewDrivers {
            drivers: drivers.len(),
            folds: k,
        });
    }
    let nonzero = nonzero_drivers(table, target);
    let (mut positive, mut zero): (Vec<String>, Vec<String>) =
        drivers.into_iter().partition(|d| nonzero.contains(d));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positive.shuffle(&mut rng);
    zero.shuffle(&mut rng);
    let fold_of_driver = positive
        .into_iter()
        .chain(zero)
        .enumerate()
        .map(|(i, d)| (d, i % k))
        .collect();
    Ok(FoldAssignment { k, fold_of_driver })
}
