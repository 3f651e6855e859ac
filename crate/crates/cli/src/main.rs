//! Batch front end: simulate, fit, predict, validate and summarize.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use disagg_core::aggregation::{custom_support, read_supports, summarize_support, write_supports};
use disagg_core::config::Config;
use disagg_core::dataset::{load_estimates, load_hierarchy, read_rows, save_hierarchy, write_rows, SupportValue};
use disagg_core::error::Error;
use disagg_core::io::{read_columns, write_columns, ColumnHeader};
use disagg_core::metrics::{histogram, kde, predictive_report, truncated_normal_pdf};
use disagg_core::model::{prepare_data, run_chains, study_window, ModelChoice};
use disagg_core::posterior::{ess_shortfalls, load_draws, save_draws, summarize_params, write_param_summary};
use disagg_core::simulation::Replicate;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "survey-disagg", version, about = "Spatio-temporal disaggregation of survey proportions")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the sampler and simulation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    chains: Option<usize>,
    /// `proposed` or `standard-binomial`.
    #[arg(long, global = true, default_value = "proposed")]
    model: String,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic data set: geometry, hierarchy, population, estimates,
    /// annual truth, county supports and their true values.
    Simulate,
    /// Run the sampler and write draws, a parameter summary and acceptance rates.
    Fit {
        /// Directory holding geometry.csv, hierarchy.csv, population.csv and
        /// estimates.csv, unless the config names the files.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Posterior summaries and draws of aggregate supports.
    Predict {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        supports: Option<PathBuf>,
    },
    /// Score predictions against known support values.
    Validate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Histogram, density and trace tables of selected columns of a draws file.
    Summarize {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long = "target", required = true)]
        targets: Vec<String>,
        /// `NAME=estimate,std_error` adds a truncated-normal reference curve.
        #[arg(long = "reference")]
        references: Vec<String>,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Sampler(String),
    EssFloor(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Sampler(_) => 3,
            Failure::EssFloor(_) => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(m) | Failure::Sampler(m) => write!(f, "{m}"),
            Failure::EssFloor(m) => write!(f, "effective sample size below the floor: {m}"),
        }
    }
}

fn sampler_failure(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::MissingSampleSize(_) => Failure::Input(e.to_string()),
        other => Failure::Sampler(other.to_string()),
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.mcmc.seed = s;
        cfg.simulation.seed = s;
    }
    if let Some(c) = cli.chains {
        cfg.mcmc.chains = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() {
    if let Some(n) = std::env::var("SURVEY_DISAGG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread limit not applied: {e}");
        }
    }
}

fn resolve(configured: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    configured.clone().unwrap_or_else(|| dir.join(name))
}

fn simulate(cfg: &Config, out: &Path) -> Result<(), Failure> {
    let sim = &cfg.simulation;
    let rep = Replicate::generate(sim, sim.seed)?;
    let fp = cfg.fingerprint();
    save_hierarchy(&rep.hierarchy, out, &fp)?;
    write_rows(&out.join("estimates.csv"), &fp, &rep.observed.estimates)?;
    write_rows(&out.join("truth.csv"), &fp, &rep.truth_rows(sim))?;
    let supports = rep.county_supports(sim)?;
    write_supports(&out.join("supports.csv"), &fp, &supports)?;
    let values = supports
        .iter()
        .map(|s| {
            Ok(SupportValue {
                support_name: s.name.clone(),
                value: rep.support_truth(sim, s)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    write_rows(&out.join("support_truth.csv"), &fp, &values)?;
    log::info!("wrote {} estimates and {} supports to {}", rep.observed.estimates.len(), supports.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct AcceptanceRow<'a> {
    step: &'a str,
    rate: f64,
}

fn fit(cfg: &Config, choice: ModelChoice, data_dir: &Path, out: &Path) -> Result<(), Failure> {
    let paths = &cfg.paths;
    let h = load_hierarchy(
        &resolve(&paths.geometry, data_dir, "geometry.csv"),
        &resolve(&paths.hierarchy, data_dir, "hierarchy.csv"),
        &resolve(&paths.population, data_dir, "population.csv"),
    )?;
    let estimates = load_estimates(&resolve(&paths.estimates, data_dir, "estimates.csv"))?;
    let data = prepare_data(&h, &estimates, study_window(&estimates)?, cfg, choice)?;
    log::info!(
        "fitting {} observations on {} cells with {} chain(s)",
        data.observations.len(),
        data.layout.n_cells(),
        cfg.mcmc.chains
    );
    let draws = run_chains(cfg, &data).map_err(sampler_failure)?;
    save_draws(&out.join("draws.bin"), &draws)?;
    write_param_summary(&out.join("summary.csv"), &draws)?;
    let rates: Vec<AcceptanceRow> = draws.acceptance.iter().map(|(s, r)| AcceptanceRow { step: s, rate: *r }).collect();
    write_rows(&out.join("acceptance.csv"), &draws.fingerprint, &rates)?;
    let short = ess_shortfalls(&summarize_params(&draws), cfg.mcmc.min_ess);
    if !short.is_empty() {
        let list: Vec<String> = short.iter().map(|(p, e)| format!("{p} ({e:.0})")).collect();
        return Err(Failure::EssFloor(list.join(", ")));
    }
    Ok(())
}

fn predict(cfg: &Config, draws_path: &Path, supports: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let draws = load_draws(draws_path)?;
    let path = supports
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.supports.clone())
        .ok_or_else(|| Failure::Input("no support file given".into()))?;
    let specs = read_supports(&path)?;
    let mut summaries = Vec::with_capacity(specs.len());
    let mut columns = Vec::with_capacity(specs.len());
    for spec in &specs {
        let values = custom_support(&draws, spec)?;
        summaries.push(summarize_support(&spec.name, &values)?);
        columns.push(values);
    }
    write_rows(&out.join("predictions.csv"), &draws.fingerprint, &summaries)?;
    let header = ColumnHeader {
        columns: specs.iter().map(|s| s.name.clone()).collect(),
        rows: draws.n_draws(),
        fingerprint: draws.fingerprint.clone(),
        meta: serde_json::Value::Null,
    };
    write_columns(&out.join("prediction_draws.bin"), &header, &columns)?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    model: String,
    n: usize,
    bias: f64,
    mspe: f64,
    mape: f64,
    pi_coverage_50: f64,
    pi_coverage_95: f64,
}

fn validate(cfg: &Config, model: &str, predictions: &Path, truth: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let (header, columns) = read_columns(predictions)?;
    let path = truth
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.truth.clone())
        .ok_or_else(|| Failure::Input("no truth file given".into()))?;
    let truth: Vec<SupportValue> = read_rows(&path)?;
    let preds: Vec<(String, Vec<f64>)> = header.columns.iter().cloned().zip(columns).collect();
    let pairs: Vec<(String, f64)> = truth.into_iter().map(|t| (t.support_name, t.value)).collect();
    let r = predictive_report(&preds, &pairs)?;
    let row = ScoreRow {
        model: model.to_string(),
        n: r.n,
        bias: r.bias,
        mspe: r.mspe,
        mape: r.mape,
        pi_coverage_50: r.pi_coverage_50,
        pi_coverage_95: r.pi_coverage_95,
    };
    write_rows(&out.join("scores.csv"), &header.fingerprint, &[row])?;
    Ok(())
}

#[derive(Serialize)]
struct HistRow {
    bin_lo: f64,
    bin_hi: f64,
    density: f64,
}

#[derive(Serialize)]
struct DensityRow {
    x: f64,
    kde: f64,
    reference: Option<f64>,
}

#[derive(Serialize)]
struct TraceRow {
    draw: usize,
    value: f64,
}

fn parse_reference(s: &str) -> Result<(String, f64, f64), Failure> {
    let bad = || Failure::Input(format!("reference {s} is not NAME=estimate,std_error"));
    let (name, rest) = s.split_once('=').ok_or_else(bad)?;
    let (e, se) = rest.split_once(',').ok_or_else(bad)?;
    let e: f64 = e.trim().parse().map_err(|_| bad())?;
    let se: f64 = se.trim().parse().map_err(|_| bad())?;
    if !(se > 0.0) {
        return Err(bad());
    }
    Ok((name.to_string(), e, se))
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn summarize(draws: &Path, targets: &[String], references: &[String], bins: usize, out: &Path) -> Result<(), Failure> {
    let (header, columns) = read_columns(draws)?;
    let refs = references.iter().map(|r| parse_reference(r)).collect::<Result<Vec<_>, _>>()?;
    for target in targets {
        let k = header
            .columns
            .iter()
            .position(|c| c == target)
            .ok_or_else(|| Failure::Input(format!("unknown target {target}")))?;
        let values = &columns[k];
        let (lo, hi) = if values.iter().all(|v| (0.0..=1.0).contains(v)) {
            (0.0, 1.0)
        } else {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, if hi > lo { hi } else { lo + 1.0 })
        };
        let stem = file_stem(target);
        let hist: Vec<HistRow> = histogram(values, lo, hi, bins)?
            .into_iter()
            .map(|(bin_lo, bin_hi, density)| HistRow { bin_lo, bin_hi, density })
            .collect();
        write_rows(&out.join(format!("hist_{stem}.csv")), &header.fingerprint, &hist)?;

        let grid: Vec<f64> = (0..=200).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect();
        let dens = kde(values, &grid)?;
        let reference = refs.iter().find(|(n, _, _)| n == target);
        let rows: Vec<DensityRow> = grid
            .iter()
            .zip(dens)
            .map(|(&x, kde)| DensityRow {
                x,
                kde,
                reference: reference.map(|&(_, e, se)| truncated_normal_pdf(x, e, se, 0.0, 1.0)),
            })
            .collect();
        write_rows(&out.join(format!("density_{stem}.csv")), &header.fingerprint, &rows)?;

        let trace: Vec<TraceRow> = values.iter().enumerate().map(|(draw, &value)| TraceRow { draw, value }).collect();
        write_rows(&out.join(format!("trace_{stem}.csv")), &header.fingerprint, &trace)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let choice: ModelChoice = cli.model.parse()?;
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Failure::Input(format!("{}: {e}", cli.out_dir.display())))?;
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Simulate => simulate(&cfg, out),
        Command::Fit { data_dir } => fit(&cfg, choice, data_dir.as_deref().unwrap_or(out), out),
        Command::Predict { draws, supports } => predict(&cfg, draws, supports.as_deref(), out),
        Command::Validate { predictions, truth } => validate(&cfg, &cli.model, predictions, truth.as_deref(), out),
        Command::Summarize {
            draws,
            targets,
            references,
            bins,
        } => summarize(draws, targets, references, *bins, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
