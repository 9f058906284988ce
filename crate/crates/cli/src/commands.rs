use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use nme_core::cv::{run_cv, sweep_resume, write_sweep_csv, SweepRow, SweepSpec};
use nme_core::data::{load_csv_with, LoadOptions, LoadReport};
use nme_core::em::Membership;
use nme_core::metrics::{aic_bic, MetricsReport};
use nme_core::pipeline::{FittedPipeline, ModelSpec};
use nme_core::synth::{generate, one_group_default, two_group_default, GroundTruth, SimConfig};
use nme_core::{ObservationTable, Target};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{CvArgs, DataArgs, FitArgs, ModelArgs, ScoreArgs, SimulateArgs, SweepArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Fit(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Fit(_) => 3,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Classifies an error raised while fitting: bad settings or data are
/// configuration errors, everything else is a fit failure.
fn fit_err(e: nme_core::Error) -> CliError {
    use nme_core::Error as E;
    match e {
        E::Config(_) | E::TooFewDrivers { .. } | E::NoFeaturesRemain | E::FeatureMismatch(_) | E::EmptyTable => {
            CliError::Config(e.to_string())
        }
        other => CliError::Fit(other.to_string()),
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load(data: &DataArgs, targets: &[Target]) -> CliResult<(ObservationTable, LoadReport)> {
    let options = LoadOptions {
        covariates: data.covariates.clone(),
        exclude: data.exclude.clone(),
    };
    let (table, report) =
        load_csv_with(&data.input, targets, &options).map_err(|e| config_err(format!("{}: {e}", data.input.display())))?;
    if report.dropped() > 0 {
        warn!(
            "dropped {} of {} rows ({} non-positive distance, {} missing target, {} missing covariate)",
            report.dropped(),
            report.rows_read,
            report.dropped_nonpositive_exposure,
            report.dropped_missing_target,
            report.dropped_missing_covariate
        );
    }
    info!("{} driver-weeks, {} drivers, {} covariates", table.len(), table.n_drivers(), table.n_features());
    Ok((table, report))
}

fn model_spec(m: &ModelArgs) -> CliResult<ModelSpec> {
    if m.model.is_grouped() && m.groups == 0 {
        return Err(config_err("--groups must be at least 1"));
    }
    if m.max_features == 0 {
        return Err(config_err("--max-features must be at least 1"));
    }
    if !(m.epsilon > 0.0) {
        return Err(config_err("--epsilon must be positive"));
    }
    Ok(ModelSpec {
        family: m.model,
        groups: if m.model.is_grouped() { m.groups } else { 1 },
        theta: m.theta,
        inflation: m.inflation,
        max_features: m.max_features,
        max_iter: m.max_iter,
        epsilon: m.epsilon,
        max_em_iters: m.max_em_iters,
        mstep_max_iters: ModelSpec::new(m.model).mstep_max_iters,
        restarts: m.restarts.max(1),
        seed: m.seed,
    })
}

fn write_output(path: Option<&Path>, contents: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| config_err(format!("{}: {e}", p.display()))),
        None => {
            println!("{contents}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(config_err)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Saved output of `fit`.
#[derive(Serialize, Deserialize)]
pub struct FitOutput {
    pub manifest: RunManifest,
    pub load_report: LoadReport,
    pub summary: FitSummary,
    pub model: FittedPipeline,
}

#[derive(Serialize, Deserialize)]
pub struct FitSummary {
    pub family: String,
    pub target: Target,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub converged: bool,
    pub selected_features: Vec<String>,
}

pub fn fit(args: FitArgs) -> CliResult {
    let start = Instant::now();
    let spec = model_spec(&args.model)?;
    let (table, load_report) = load(&args.data, &[args.model.target])?;
    let model = FittedPipeline::fit(&table, args.model.target, &spec).map_err(fit_err)?;
    if !model.model.converged() {
        warn!("the fit did not converge; estimates are from the last iterate");
    }
    let (aic, bic) = aic_bic(model.loglik(), model.n_params(), model.n_obs);
    let summary = FitSummary {
        family: spec.family.to_string(),
        target: args.model.target,
        loglik: model.loglik(),
        aic,
        bic,
        n_params: model.n_params(),
        n_obs: model.n_obs,
        converged: model.model.converged(),
        selected_features: model.stats.selected_features.clone(),
    };
    let mut manifest = RunManifest::new("fit", serde_json::to_value(&spec).map_err(config_err)?, spec.seed);
    manifest.add_input(&args.data.input).map_err(config_err)?;
    manifest.finish(start.elapsed());
    let out = FitOutput {
        manifest,
        load_report,
        summary,
        model,
    };
    write_output(args.out.as_deref(), &to_json(&out)?)
}

#[derive(Serialize, Deserialize)]
pub struct CvOutput {
    pub manifest: RunManifest,
    pub target: Target,
    pub report: MetricsReport,
}

pub fn cv(args: CvArgs) -> CliResult {
    let start = Instant::now();
    let spec = model_spec(&args.model)?;
    if args.folds < 2 {
        return Err(config_err("--folds must be at least 2"));
    }
    let target = args.model.target;
    let (table, _) = load(&args.data, &[target])?;
    if table.n_drivers() < args.folds {
        return Err(config_err(format!("{} drivers cannot fill {} folds", table.n_drivers(), args.folds)));
    }
    let report = run_cv(&table, target, &spec, args.folds, spec.seed).map_err(fit_err)?;
    if report.is_partial() {
        warn!("folds {:?} failed; metrics use the remaining folds", report.failed_folds);
    }
    let config = json!({ "model": spec, "folds": args.folds });
    let mut manifest = RunManifest::new("cv", config, spec.seed);
    manifest.add_input(&args.data.input).map_err(config_err)?;
    manifest.finish(start.elapsed());
    if let Some(path) = &args.csv {
        let file = File::create(path).map_err(config_err)?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(MetricsReport::CSV_HEADER).map_err(config_err)?;
        w.write_record(report.csv_record(spec.family.name(), target)).map_err(config_err)?;
        w.flush().map_err(config_err)?;
    }
    let out = CvOutput {
        manifest,
        target,
        report,
    };
    write_output(args.out.as_deref(), &to_json(&out)?)
}

fn parse_targets(raw: &[String]) -> CliResult<Vec<Target>> {
    let mut out = Vec::new();
    for t in raw {
        if t.trim().eq_ignore_ascii_case("all") {
            out.extend(Target::all());
        } else {
            out.push(t.parse().map_err(config_err)?);
        }
    }
    out.dedup();
    Ok(out)
}

fn read_journal(path: &Path) -> CliResult<Vec<SweepRow>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(config_err(format!("{}: {e}", path.display()))),
    };
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(config_err)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => rows.push(r),
            Err(e) => warn!("ignoring journal line {}: {e}", i + 1),
        }
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
pub struct SweepOutput {
    pub manifest: RunManifest,
    pub rows: Vec<SweepRow>,
}

pub fn sweep(args: SweepArgs) -> CliResult {
    let start = Instant::now();
    let targets = parse_targets(&args.targets)?;
    let mut base = ModelSpec::new(nme_core::pipeline::ModelFamily::Poisson);
    base.max_features = args.max_features;
    base.inflation = args.inflation;
    base.restarts = args.restarts.max(1);
    let spec = SweepSpec {
        families: args.models.clone(),
        groups: args.g_list.clone(),
        thetas: args.theta_grid.clone(),
        targets: targets.clone(),
        folds: args.folds,
        seed: args.seed,
        base,
    }
    .normalized()
    .map_err(config_err)?;
    let (table, _) = load(&args.data, &targets)?;

    let journal_path = with_suffix(&args.out, ".journal.jsonl");
    let cells = spec.cells();
    let done: Vec<SweepRow> = if args.resume {
        let rows: Vec<SweepRow> = read_journal(&journal_path)?
            .into_iter()
            .filter(|r| cells.contains(&r.key()))
            .collect();
        info!("resuming: {} of {} cells already done", rows.len(), cells.len());
        rows
    } else {
        Vec::new()
    };
    let journal = OpenOptions::new()
        .create(true)
        .append(args.resume)
        .write(true)
        .truncate(!args.resume)
        .open(&journal_path)
        .map_err(|e| config_err(format!("{}: {e}", journal_path.display())))?;
    let journal = Mutex::new(BufWriter::new(journal));
    let rows = sweep_resume(&table, &spec, done, |row| {
        let line = serde_json::to_string(row).expect("rows serialise");
        let mut j = journal.lock().expect("journal lock");
        if let Err(e) = writeln!(j, "{line}").and_then(|_| j.flush()) {
            warn!("journal write failed: {e}");
        }
        info!("finished {} / {} / G={} / theta={:?}: {}", row.target, row.family, row.groups, row.theta, row.status.name());
    })
    .map_err(config_err)?;

    let csv_path = with_suffix(&args.out, ".csv");
    let file = File::create(&csv_path).map_err(|e| config_err(format!("{}: {e}", csv_path.display())))?;
    write_sweep_csv(&rows, file).map_err(config_err)?;
    let mut manifest = RunManifest::new("sweep", serde_json::to_value(&spec).map_err(config_err)?, spec.seed);
    manifest.add_input(&args.data.input).map_err(config_err)?;
    manifest.finish(start.elapsed());
    let succeeded = rows.iter().filter(|r| r.is_success()).count();
    let out = SweepOutput { manifest, rows };
    write_output(Some(&with_suffix(&args.out, ".json")), &to_json(&out)?)?;
    eprintln!("{succeeded} of {} cells succeeded", out.rows.len());
    if succeeded == 0 {
        return Err(CliError::Fit("every sweep cell failed".into()));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct SimulateOutput {
    pub manifest: RunManifest,
    pub truth: GroundTruth,
}

pub fn simulate(args: SimulateArgs) -> CliResult {
    let start = Instant::now();
    let mut config: SimConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
        }
        None => match args.preset.as_str() {
            "two-group" => two_group_default(0),
            "one-group" => one_group_default(0),
            other => return Err(config_err(format!("unknown preset `{other}` (two-group, one-group)"))),
        },
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(config_err)?;
    let sim = generate(&config).map_err(config_err)?;
    let csv_path = with_suffix(&args.out, ".csv");
    let file = File::create(&csv_path).map_err(|e| config_err(format!("{}: {e}", csv_path.display())))?;
    sim.table.write_csv(BufWriter::new(file)).map_err(config_err)?;

    let mut manifest = RunManifest::new("simulate", serde_json::to_value(&config).map_err(config_err)?, config.seed);
    if let Some(path) = &args.config {
        manifest.add_input(path).map_err(config_err)?;
    }
    manifest.finish(start.elapsed());
    let out = SimulateOutput {
        manifest,
        truth: sim.ground_truth(&config),
    };
    write_output(Some(&with_suffix(&args.out, ".truth.json")), &to_json(&out)?)?;
    eprintln!("wrote {} rows for {} drivers", sim.table.len(), sim.table.n_drivers());
    Ok(())
}

pub fn score(args: ScoreArgs) -> CliResult {
    let start = Instant::now();
    let membership = match args.membership.as_str() {
        "posterior" => Membership::Posterior,
        "prior" => Membership::Prior,
        other => return Err(config_err(format!("membership must be `posterior` or `prior`, got `{other}`"))),
    };
    let text = fs::read_to_string(&args.model).map_err(|e| config_err(format!("{}: {e}", args.model.display())))?;
    let saved: FitOutput = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", args.model.display())))?;
    let model = saved.model;
    let (table, _) = load(&args.data, &[model.target])?;
    let loglik = model.score(&table).map_err(config_err)?;
    if let Some(path) = &args.predictions {
        let pred = model.predict(&table, membership).map_err(config_err)?;
        let file = File::create(path).map_err(config_err)?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["driver_id", "week", "observed", "mean", "zero_prob"]).map_err(config_err)?;
        for (r, p) in table.rows().iter().zip(&pred) {
            w.write_record([
                r.driver_id.clone(),
                r.week.to_string(),
                r.target(model.target).to_string(),
                p.mean.to_string(),
                p.zero_prob.to_string(),
            ])
            .map_err(config_err)?;
        }
        w.flush().map_err(config_err)?;
    }
    let mut manifest = RunManifest::new("score", json!({ "membership": args.membership }), saved.manifest.seed);
    manifest.add_input(&args.model).map_err(config_err)?;
    manifest.add_input(&args.data.input).map_err(config_err)?;
    manifest.finish(start.elapsed());
    let out = json!({
        "manifest": manifest,
        "target": model.target,
        "loglik": loglik,
        "stored_loglik": model.loglik(),
        "n_obs": table.len(),
    });
    write_output(args.out.as_deref(), &to_json(&out)?)
}
