//! Command-line front end: `simulate`, `estimate`, `backtest` and `allocate`.
//!
//! Every output path picks CSV or JSON from its extension and gets a
//! `<stem>.meta.json` companion recording the command and its options.
//! `--config FILE` reads `key = value` lines that stand in for flags the
//! command line does not set itself.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::backtest::{run_backtest, BacktestConfig};
use crate::coefficients::{fit_curves, BandwidthRule};
use crate::data::{read_panel_csv, write_panel_csv, Dataset};
use crate::error::DynCovError;
use crate::garch::{write_fits_csv, GarchFit, InitMode};
use crate::index::IndexConfig;
use crate::panel::{FactorPanel, ReturnPanel};
use crate::pipeline::{estimate_face, forecast, FaceConfig, FaceEstimate, Strategy};
use crate::portfolio::{markowitz_weights, write_matrix_csv};
use crate::simulation::{run_simulation_study, simulate_dgp, SimulationConfig};

#[derive(Debug, Parser)]
#[command(name = "dyncov", version, about = "Dynamic factor covariance estimation and portfolio backtests")]
struct Cli {
    /// File of `key = value` lines supplying default flag values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replication study on the simulated single-index design.
    Simulate(SimulateArgs),
    /// Fit the full model on a dataset and report its components.
    Estimate(EstimateArgs),
    /// Rolling daily backtest on French-format files.
    Backtest(BacktestArgs),
    /// Markowitz weights for the day after the last observation.
    Allocate(AllocateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct FaceArgs {
    /// Seed for the random initial index direction.
    #[arg(long, default_value_t = 0)]
    index_seed: u64,
    /// Index-estimation bandwidth as a fraction of the index range.
    #[arg(long, default_value_t = 0.2)]
    index_bandwidth: f64,
    /// GARCH pre-sample initialization: alpha0 or first-residual.
    #[arg(long, default_value = "alpha0", value_parser = parse_init_mode)]
    garch_init: InitMode,
}

impl FaceArgs {
    fn config(&self) -> FaceConfig {
        FaceConfig {
            index: IndexConfig {
                bandwidth_fraction: self.index_bandwidth,
                seed: self.index_seed,
                ..IndexConfig::default()
            },
            init_mode: self.garch_init,
            ..FaceConfig::default()
        }
    }
}

fn parse_init_mode(s: &str) -> Result<InitMode, String> {
    s.parse().map_err(|e: DynCovError| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: DynCovError| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
struct DataArgs {
    /// French-format 49-industry daily returns.
    #[arg(long, value_name = "FILE")]
    industry: Option<PathBuf>,
    /// French-format daily three-factor file.
    #[arg(long, value_name = "FILE")]
    ff: Option<PathBuf>,
    /// Plain CSV of returns (header of asset names).
    #[arg(long, value_name = "FILE", conflicts_with = "industry")]
    returns: Option<PathBuf>,
    /// Plain CSV of factors (header of factor names).
    #[arg(long, value_name = "FILE", conflicts_with = "ff")]
    factors: Option<PathBuf>,
    /// Use only the last N observations.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    p: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Master seed: fixes the curve constants and every replication stream.
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Daily target return, percent.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, value_delimiter = ',', default_value = "face,sam,fan", value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    /// Also write replication 0 as `returns.csv` and `factors.csv` here.
    #[arg(long, value_name = "DIR")]
    export: Option<PathBuf>,
    #[command(flatten)]
    face: FaceArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    face: FaceArgs,
    /// Number of index values in the reported curve grid.
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct BacktestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    lookback: usize,
    /// Daily target return, percent.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// Calendar years to trade; default trades every day after the lookback.
    #[arg(long, value_delimiter = ',')]
    years: Option<Vec<i32>>,
    #[arg(long, value_delimiter = ',', default_value = "face,sam,fan,market", value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    #[command(flatten)]
    face: FaceArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct AllocateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "face", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Daily target return, percent.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[command(flatten)]
    face: FaceArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(DynCovError),
}

impl From<DynCovError> for CliError {
    fn from(e: DynCovError) -> Self {
        Self::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

fn format_of(path: &Path) -> CliResult<Format> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("csv") => Ok(Format::Csv),
        Some("json") => Ok(Format::Json),
        _ => Err(CliError::Usage(format!("{}: output must end in .csv or .json", path.display()))),
    }
}

/// `dir/stem.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Meta<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    options: &'a T,
}

fn write_meta<T: Serialize>(out: &Path, command: &'static str, options: &T) -> CliResult<()> {
    let meta = Meta {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        options,
    };
    write_json(&sibling(out, "meta.json"), &meta)
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

/// Returns, factors and (for French files) the dates of the requested data.
fn load_data(args: &DataArgs) -> CliResult<(ReturnPanel, FactorPanel, Option<Dataset>)> {
    let (returns, factors, dataset) = match (&args.industry, &args.ff, &args.returns, &args.factors) {
        (Some(ind), Some(ff), None, None) => {
            require_file(ind)?;
            require_file(ff)?;
            let ds = Dataset::load(ind, ff)?;
            (ds.returns.clone(), ds.factors.clone(), Some(ds))
        }
        (None, None, Some(r), Some(f)) => {
            require_file(r)?;
            require_file(f)?;
            let (rn, rv) = read_panel_csv(r)?;
            let (fnames, fv) = read_panel_csv(f)?;
            (ReturnPanel::with_names(rv, rn)?, FactorPanel::with_names(fv, fnames, None)?, None)
        }
        _ => {
            return Err(CliError::Usage(
                "data needs either --industry and --ff, or --returns and --factors".into(),
            ))
        }
    };
    let n = returns.n_obs();
    if returns.n_obs() != factors.n_obs() {
        return Err(DynCovError::DimensionMismatch(format!(
            "{} return rows but {} factor rows",
            returns.n_obs(),
            factors.n_obs()
        ))
        .into());
    }
    match args.window {
        Some(w) if w > n => Err(CliError::Usage(format!("--window {w} exceeds the {n} available rows"))),
        Some(w) => Ok((
            returns.slice(n - w, n),
            factors.slice(n - w, n),
            dataset.map(|d| d.slice(n - w, n)),
        )),
        None => Ok((returns, factors, dataset)),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let format = format_of(&args.out)?;
    let config = SimulationConfig::reference(args.n, args.p, args.seed)?;
    let table = run_simulation_study(&config, args.reps, &args.strategies, &args.face.config(), args.delta)?;
    match format {
        Format::Json => write_json(&args.out, &table)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(create(&args.out)?);
            w.write_record(["replication", "estimator", "delta_cov", "delta_inv", "entropy_norm", "portfolio_return"])
                .map_err(DynCovError::from)?;
            for r in &table.records {
                w.write_record([
                    r.replication.to_string(),
                    r.estimator.to_string(),
                    r.delta_cov.to_string(),
                    r.delta_inv.to_string(),
                    r.entropy_norm.to_string(),
                    r.portfolio_return.to_string(),
                ])
                .map_err(DynCovError::from)?;
            }
            w.flush()?;
            let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
            let mut w = csv::Writer::from_writer(create(&sibling(&args.out, "summary.csv"))?);
            w.write_record([
                "estimator",
                "successes",
                "failures",
                "mean_delta_cov",
                "sd_delta_cov",
                "mean_delta_inv",
                "sd_delta_inv",
                "mean_return",
                "sd_return",
                "sharpe",
            ])
            .map_err(DynCovError::from)?;
            for s in &table.summaries {
                w.write_record([
                    s.estimator.to_string(),
                    s.successes.to_string(),
                    s.failures.to_string(),
                    s.mean_delta_cov.to_string(),
                    opt(s.sd_delta_cov),
                    s.mean_delta_inv.to_string(),
                    opt(s.sd_delta_inv),
                    s.mean_return.to_string(),
                    opt(s.sd_return),
                    opt(s.sharpe),
                ])
                .map_err(DynCovError::from)?;
            }
            w.flush()?;
        }
    }
    if let Some(dir) = &args.export {
        let data = simulate_dgp(&config, 0)?;
        let (returns, factors) = data.estimation_window();
        write_panel_csv(create(&dir.join("returns.csv"))?, returns.names(), returns.data())?;
        write_panel_csv(create(&dir.join("factors.csv"))?, factors.names(), factors.data())?;
    }
    write_meta(&args.out, "simulate", args)
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Serialize)]
struct CurveGrid {
    u: Vec<f64>,
    /// `g[i][k]` at grid point `i`, asset `k`.
    g: Vec<Vec<f64>>,
    /// `phi[i][k][j]`.
    phi: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct GarchRow {
    asset: String,
    /// `None` where the fit failed and the residual variance was used.
    params: Option<Vec<f64>>,
    nll: Option<f64>,
    converged: bool,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    assets: &'a [String],
    factors: &'a [String],
    beta: Vec<f64>,
    index_iterations: usize,
    index_converged: bool,
    selected_k: usize,
    h2: f64,
    u_last: f64,
    garch: Vec<GarchRow>,
    sigma2_forecast: Vec<f64>,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    curves: CurveGrid,
}

impl<'a> EstimateReport<'a> {
    fn new(assets: &'a [String], factors: &'a [String], est: &FaceEstimate, curves: CurveGrid) -> Self {
        Self {
            assets,
            factors,
            beta: est.index.beta.iter().copied().collect(),
            index_iterations: est.index.iterations,
            index_converged: est.index.converged,
            selected_k: est.cv.selected_k,
            h2: est.h2_used,
            u_last: est.u_last,
            garch: est
                .garch
                .iter()
                .zip(assets)
                .map(|(f, a)| GarchRow {
                    asset: a.clone(),
                    params: f.as_ref().map(|f| f.params.to_vec()),
                    nll: f.as_ref().map(|f| f.nll),
                    converged: f.as_ref().is_some_and(|f| f.converged),
                })
                .collect(),
            sigma2_forecast: est.sigma2_forecast.iter().copied().collect(),
            mean: est.mean.iter().copied().collect(),
            covariance: rows_of(&est.covariance.matrix),
            curves,
        }
    }
}

/// `count` evenly spaced points between the 5% and 95% quantiles of `values`.
fn quantile_grid(values: &[f64], count: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
    let (lo, hi) = (at(0.05), at(0.95));
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

fn cmd_estimate(args: &EstimateArgs) -> CliResult<()> {
    let format = format_of(&args.out)?;
    if args.grid == 0 {
        return Err(CliError::Usage("--grid must be positive".into()));
    }
    let (returns, factors, _) = load_data(&args.data)?;
    let est = estimate_face(&returns, &factors, &args.face.config())?;
    let n = factors.n_obs();
    let lagged = factors.slice(0, n - 1).index_values(&est.index.beta);
    let grid = quantile_grid(&lagged, args.grid);
    let rule = BandwidthRule::NearestNeighbours(est.cv.selected_k);
    let field = fit_curves(&returns, &factors, &est.index.beta, rule, &grid)?;
    let curves = CurveGrid {
        u: field.query_points.clone(),
        g: field.g.iter().map(|g| g.iter().copied().collect()).collect(),
        phi: field.phi.iter().map(rows_of).collect(),
    };
    match format {
        Format::Json => write_json(
            &args.out,
            &EstimateReport::new(returns.names(), factors.names(), &est, curves),
        )?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(create(&args.out)?);
            w.write_record(["factor", "beta"]).map_err(DynCovError::from)?;
            for (name, b) in factors.names().iter().zip(est.index.beta.iter()) {
                w.write_record([name.clone(), b.to_string()]).map_err(DynCovError::from)?;
            }
            w.flush()?;

            let mut w = csv::Writer::from_writer(create(&sibling(&args.out, "curves.csv"))?);
            w.write_record(["u", "asset", "term", "value"]).map_err(DynCovError::from)?;
            for (i, u) in curves.u.iter().enumerate() {
                for (k, asset) in returns.names().iter().enumerate() {
                    w.write_record([u.to_string(), asset.clone(), "g".into(), curves.g[i][k].to_string()])
                        .map_err(DynCovError::from)?;
                    for (j, f) in factors.names().iter().enumerate() {
                        w.write_record([u.to_string(), asset.clone(), f.clone(), curves.phi[i][k][j].to_string()])
                            .map_err(DynCovError::from)?;
                    }
                }
            }
            w.flush()?;

            let (fits, names): (Vec<GarchFit>, Vec<String>) = est
                .garch
                .iter()
                .zip(returns.names())
                .filter_map(|(f, name)| f.clone().map(|f| (f, name.clone())))
                .unzip();
            write_fits_csv(create(&sibling(&args.out, "garch.csv"))?, &fits, &names)?;
            write_matrix_csv(
                create(&sibling(&args.out, "covariance.csv"))?,
                &est.covariance.matrix,
                returns.names(),
            )?;
        }
    }
    write_meta(&args.out, "estimate", args)
}

fn cmd_backtest(args: &BacktestArgs) -> CliResult<()> {
    let format = format_of(&args.out)?;
    if args.data.industry.is_none() || args.data.ff.is_none() {
        return Err(CliError::Usage("backtest needs --industry and --ff".into()));
    }
    let (_, _, dataset) = load_data(&args.data)?;
    let dataset = dataset.ok_or_else(|| CliError::Usage("backtest needs dated data".into()))?;
    let cfg = BacktestConfig {
        strategies: args.strategies.clone(),
        lookback: args.lookback,
        delta: args.delta,
        years: args.years.clone(),
        face: args.face.config(),
    };
    let ledger = run_backtest(&dataset, &cfg)?;
    match format {
        Format::Json => write_json(&args.out, &ledger)?,
        Format::Csv => {
            ledger.write_records_csv(create(&args.out)?)?;
            ledger.write_summary_csv(create(&sibling(&args.out, "summary.csv"))?)?;
        }
    }
    write_meta(&args.out, "backtest", args)
}

#[derive(Serialize)]
struct Allocation<'a> {
    strategy: Strategy,
    delta: f64,
    target_return: f64,
    repaired: bool,
    assets: &'a [String],
    weights: Vec<f64>,
}

fn cmd_allocate(args: &AllocateArgs) -> CliResult<()> {
    let format = format_of(&args.out)?;
    let (returns, factors, _) = load_data(&args.data)?;
    let fc = forecast(args.strategy, &returns, &factors, &args.face.config())?;
    let w = markowitz_weights(&fc.covariance, &fc.mean, args.delta)?;
    match format {
        Format::Json => write_json(
            &args.out,
            &Allocation {
                strategy: args.strategy,
                delta: args.delta,
                target_return: w.target_return,
                repaired: w.repaired,
                assets: returns.names(),
                weights: w.weights.iter().copied().collect(),
            },
        )?,
        Format::Csv => {
            let mut out = csv::Writer::from_writer(create(&args.out)?);
            out.write_record(["asset", "weight"]).map_err(DynCovError::from)?;
            for (name, v) in returns.names().iter().zip(w.weights.iter()) {
                out.write_record([name.clone(), v.to_string()]).map_err(DynCovError::from)?;
            }
            out.flush()?;
        }
    }
    write_meta(&args.out, "allocate", args)
}

/// Parses a `key = value` file; blank lines and `#` comments are skipped.
fn read_config(path: &Path) -> CliResult<Vec<(String, String)>> {
    require_file(path)?;
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

fn flag_name(arg: &str) -> Option<&str> {
    let rest = arg.strip_prefix("--")?;
    Some(rest.split_once('=').map_or(rest, |(k, _)| k))
}

/// Inserts config-file flags right after the subcommand, skipping any flag
/// the command line already sets.
fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            config = strs.get(i + 1).cloned();
        } else if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        }
    }
    let Some(config) = config else { return Ok(args) };
    let given: Vec<&str> = strs.iter().filter_map(|a| flag_name(a)).collect();
    let Some(sub) = strs
        .iter()
        .position(|a| ["simulate", "estimate", "backtest", "allocate"].contains(&a.as_str()))
    else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (k, v) in read_config(Path::new(&config))? {
        if k == "config" || given.contains(&k.as_str()) {
            continue;
        }
        injected.push(OsString::from(format!("--{k}")));
        injected.push(OsString::from(v));
    }
    let mut out = args;
    out.splice(sub + 1..sub + 1, injected);
    Ok(out)
}

/// Runs the command line and returns the process exit status: 0 on
/// success, 2 for usage errors and missing files, 1 for other failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => return report(e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Backtest(a) => cmd_backtest(a),
        Command::Allocate(a) => cmd_allocate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> i32 {
    match e {
        CliError::Usage(msg) => {
            eprintln!("error: {msg}");
            2
        }
        CliError::Run(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_fills_only_missing_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        std::fs::write(&cfg, "# defaults\nlookback = 300\ndelta=0.5\n").unwrap();
        let args: Vec<OsString> = ["dyncov", "backtest", "--delta", "2", "--config", cfg.to_str().unwrap()]
            .iter()
            .map(OsString::from)
            .collect();
        let out: Vec<String> = expand_config(args)
            .unwrap()
            .into_iter()
            .map(|a| a.into_string().unwrap())
            .collect();
        assert_eq!(&out[..4], ["dyncov", "backtest", "--lookback", "300"]);
        assert_eq!(out.iter().filter(|a| *a == "--delta").count(), 1);
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(format_of(Path::new("a/b.csv")).unwrap(), Format::Csv);
        assert_eq!(format_of(Path::new("b.JSON")).unwrap(), Format::Json);
        assert!(matches!(format_of(Path::new("b.txt")), Err(CliError::Usage(_))));
        assert_eq!(sibling(Path::new("a/b.csv"), "meta.json"), PathBuf::from("a/b.meta.json"));
    }
}
