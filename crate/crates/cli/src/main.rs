mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nme_core::pipeline::ModelFamily;
use nme_core::{InflationSpec, Target, ThetaMode};

const INPUT_HELP: &str = "\
INPUT FORMAT
  Comma-separated UTF-8 with a header row and one row per driver-week:
    driver_id                driver identifier (aliases: driver, id_driver)
    week                     week index (aliases: week_index, week_id)
    total_distance           weekly driven distance in km (the exposure; rows with
                             non-positive distance are dropped)
    sum_harsh_braking        weekly event counts, one column per event type
    sum_harsh_acceleration
    sum_speeding_serious
    sum_forward_collision
    sum_lane_departure
    sum_too_close_distance
    <covariates...>          any further numeric columns, e.g. mean_speed_limit,
                             prop_motorway, mean_speed, prop_night
  claims_count and exposure_in_weeks are never used as covariates. Empty cells,
  NA and NaN count as missing; rows missing a used value are dropped.

TARGETS
  harsh_braking, harsh_acceleration, speeding_serious, forward_collision,
  lane_departure, too_close_distance, nme_total (the sum of all six).

ENVIRONMENT
  Every flag can also be set through an NME_* variable, e.g. NME_TARGET,
  NME_MODEL, NME_GROUPS, NME_SEED, NME_JOBS. RUST_LOG controls logging.

EXIT CODES
  0 success (non-convergence is reported as a warning)
  2 invalid configuration or input
  3 model fitting failed";

#[derive(Parser, Debug)]
#[command(
    name = "nme",
    version,
    about = "Fit, cross-validate and compare zero-inflated count models of weekly near-miss events",
    after_long_help = INPUT_HELP
)]
struct Cli {
    /// Worker threads (default: 1, or all cores for `sweep`).
    #[arg(long, global = true, env = "NME_JOBS")]
    jobs: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one model and write it as JSON.
    Fit(FitArgs),
    /// K-fold stratified grouped cross-validation of one model.
    Cv(CvArgs),
    /// Evaluate a grid of models, groups and dispersions over several targets.
    Sweep(SweepArgs),
    /// Generate a synthetic driver-week CSV with ground truth.
    Simulate(SimulateArgs),
    /// Re-evaluate a saved model on a CSV.
    Score(ScoreArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Driver-week CSV (see `--help` for the expected columns).
    #[arg(long, env = "NME_INPUT")]
    input: PathBuf,

    /// Use only these covariate columns.
    #[arg(long, value_delimiter = ',', env = "NME_COVARIATES")]
    covariates: Option<Vec<String>>,

    /// Never use these columns as covariates.
    #[arg(long, value_delimiter = ',', env = "NME_EXCLUDE")]
    exclude: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Event to model.
    #[arg(long, default_value = "harsh_braking", env = "NME_TARGET")]
    target: Target,

    /// poisson, zip, gzip or gzigp.
    #[arg(long, default_value = "zip", env = "NME_MODEL")]
    model: ModelFamily,

    /// Number of latent driver groups (gzip and gzigp).
    #[arg(long, default_value_t = 2, env = "NME_GROUPS")]
    groups: usize,

    /// Dispersion for gzigp: `free` or a fixed value in (-1, 1).
    #[arg(long, default_value = "free", env = "NME_THETA")]
    theta: ThetaMode,

    /// Covariates kept after correlation filtering.
    #[arg(long, default_value_t = 10, env = "NME_MAX_FEATURES")]
    max_features: usize,

    /// Covariates in the inflation logit: `intercept` or `full`.
    #[arg(long, default_value = "intercept", env = "NME_INFLATION")]
    inflation: InflationSpec,

    #[arg(long, default_value_t = 0, env = "NME_SEED")]
    seed: u64,

    /// EM restarts.
    #[arg(long, default_value_t = 3, env = "NME_RESTARTS")]
    restarts: usize,

    /// Optimiser iterations for single-component fits.
    #[arg(long, default_value_t = 800, env = "NME_MAX_ITER")]
    max_iter: usize,

    /// EM stops when the relative log-likelihood change is below this.
    #[arg(long, default_value_t = 1e-4, env = "NME_EPSILON")]
    epsilon: f64,

    #[arg(long, default_value_t = 100, env = "NME_MAX_EM_ITERS")]
    max_em_iters: usize,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Output JSON (stdout when omitted).
    #[arg(long, env = "NME_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5, env = "NME_FOLDS")]
    folds: usize,
    /// Output JSON (stdout when omitted).
    #[arg(long, env = "NME_OUT")]
    out: Option<PathBuf>,
    /// Also write the report as a one-row CSV.
    #[arg(long, env = "NME_CSV")]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Model families to include.
    #[arg(long, value_delimiter = ',', default_value = "poisson,zip,gzip,gzigp", env = "NME_MODELS")]
    models: Vec<ModelFamily>,

    /// Group counts for gzip and gzigp (at most 10).
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4", env = "NME_G_LIST")]
    g_list: Vec<usize>,

    /// Fixed dispersions for gzigp; ±1 is replaced by ±0.999.
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        default_value = "-0.75,-0.5,-0.25,0,0.25,0.5,0.75",
        env = "NME_THETA_GRID"
    )]
    theta_grid: Vec<f64>,

    /// Targets, or `all` for the six events and nme_total.
    #[arg(long, value_delimiter = ',', default_value = "all", env = "NME_TARGETS")]
    targets: Vec<String>,

    #[arg(long, default_value_t = 5, env = "NME_FOLDS")]
    folds: usize,

    #[arg(long, default_value_t = 10, env = "NME_MAX_FEATURES")]
    max_features: usize,

    #[arg(long, default_value = "intercept", env = "NME_INFLATION")]
    inflation: InflationSpec,

    #[arg(long, default_value_t = 0, env = "NME_SEED")]
    seed: u64,

    #[arg(long, default_value_t = 3, env = "NME_RESTARTS")]
    restarts: usize,

    /// Output prefix: writes PREFIX.csv, PREFIX.json and PREFIX.journal.jsonl.
    #[arg(long, env = "NME_OUT")]
    out: PathBuf,

    /// Keep finished cells from an earlier run's journal and run only the rest.
    #[arg(long, env = "NME_RESUME")]
    resume: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulation config JSON; `--preset` is used when omitted.
    #[arg(long, env = "NME_SIM_CONFIG")]
    config: Option<PathBuf>,

    /// Built-in config: two-group or one-group.
    #[arg(long, default_value = "two-group", env = "NME_PRESET")]
    preset: String,

    /// Override the config's seed.
    #[arg(long, env = "NME_SEED")]
    seed: Option<u64>,

    /// Output prefix: writes PREFIX.csv and PREFIX.truth.json.
    #[arg(long, env = "NME_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Model JSON written by `fit`.
    #[arg(long, env = "NME_MODEL_FILE")]
    model: PathBuf,

    #[command(flatten)]
    data: DataArgs,

    /// Weights for mixtures: `posterior` (training drivers only) or `prior`.
    #[arg(long, default_value = "prior", env = "NME_MEMBERSHIP")]
    membership: String,

    /// Write per-row predictions to this CSV.
    #[arg(long, env = "NME_PREDICTIONS")]
    predictions: Option<PathBuf>,

    /// Output JSON (stdout when omitted).
    #[arg(long, env = "NME_OUT")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let default_jobs = if matches!(cli.command, Command::Sweep(_)) { 0 } else { 1 };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(default_jobs))
        .build_global()
    {
        log::warn!("thread pool already initialised: {e}");
    }

    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Cv(a) => commands::cv(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Score(a) => commands::score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
