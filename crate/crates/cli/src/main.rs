use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use esmcast_core::backtest::{
    flush_partial, load_data, read_fleet, read_forecasts_csv, run_backtest, write_report, Arm, BacktestError,
    ForecastSeries, ModelKind, RunConfig,
};
use esmcast_core::dispatch::rolling_mcp;
use esmcast_core::evaluate::{self, DayAheadForecast};
use esmcast_core::forest::fit_rf_model;
use esmcast_core::linear::{fit_ens_lear, fit_larx, fit_lear, forecast_ens_lear, forecast_larx, forecast_lear};
use esmcast_core::neural::{fit_lstm, search_dnn};
use esmcast_core::panel::{format_timestamp, load_panel, naive_forecast, write_panel, HourlyPanel, HOURS, MCP};
use esmcast_core::storage::{backtest_storage, write_storage_csv, StorageSpec};
use esmcast_core::synth::synth_market;

#[derive(Parser)]
#[command(name = "esmcast", version, about = "Day-ahead price forecasting with dispatch-model clearing prices")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the hourly MCP of a panel from a fleet and add it as the `mcp` column.
    SimulateEsm {
        #[arg(long)]
        panel: PathBuf,
        /// Fleet description in JSON.
        #[arg(long)]
        fleet: PathBuf,
        #[arg(long, default_value_t = esmcast_core::dispatch::DEFAULT_WINDOW_HOURS)]
        window_hours: usize,
        #[arg(long, default_value_t = esmcast_core::dispatch::DEFAULT_KEEP_HOURS)]
        keep_hours: usize,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic market panel (and its fleet).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        days: Option<usize>,
        /// Also write the generating fleet as JSON.
        #[arg(long)]
        fleet_out: Option<PathBuf>,
    },
    /// Calibrate one model for a delivery day and write its parameters.
    Fit(ModelArgs),
    /// Calibrate one model and forecast the 24 hours of a delivery day.
    Forecast(ModelArgs),
    /// Metrics per series of a forecasts file (needs a `naive` series for rMAE).
    Evaluate {
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise GW p-value matrix of the series in a forecasts file.
    Gw {
        #[arg(long)]
        forecasts: PathBuf,
        /// Output directory for gw_pvalues.csv and gw_pvalues.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Storage arbitrage backtest of the series in a forecasts file.
    Storage {
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rolling backtest with metrics, GW tests, storage results and a manifest.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Comma-separated model names.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        /// Re-run every forecast on data cut at the bid deadline and compare.
        #[arg(long)]
        audit: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// fundamentals, mcp-only or fundamentals+mcp; may be repeated.
    #[arg(long)]
    arm: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: String,
    /// Panel CSV; defaults to the config's data source.
    #[arg(long)]
    panel: Option<PathBuf>,
    /// Delivery day; defaults to the panel's last day.
    #[arg(long)]
    date: Option<NaiveDate>,
}

/// Errors in user input exit with 2, everything else with 1.
struct ConfigError(String);

impl std::fmt::Debug for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn lift(e: BacktestError) -> anyhow::Error {
    if e.is_config() {
        config_err(e.to_string())
    } else {
        e.into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::SimulateEsm {
            panel,
            fleet,
            window_hours,
            keep_hours,
            out,
        } => simulate_esm(&panel, &fleet, window_hours, keep_hours, &out),
        Command::Synth { common, days, fleet_out } => synth(&common, days, fleet_out.as_deref()),
        Command::Fit(args) => fit_or_forecast(&args, false),
        Command::Forecast(args) => fit_or_forecast(&args, true),
        Command::Evaluate { forecasts, out } => evaluate_cmd(&forecasts, out.as_deref()),
        Command::Gw { forecasts, out } => gw_cmd(&forecasts, out.as_deref()),
        Command::Storage { forecasts, out } => storage_cmd(&forecasts, out.as_deref()),
        Command::Backtest { common, models, audit } => backtest_cmd(&common, models, audit),
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(lift)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if !common.arm.is_empty() {
        cfg.arms = common
            .arm
            .iter()
            .map(|a| a.parse::<Arm>().map_err(config_err))
            .collect::<Result<_, _>>()?;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

/// Writes to `path`, or stdout when absent.
fn emit(path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
        }
        None => std::io::stdout().write_all(bytes).map_err(Into::into),
    }
}

fn read_panel(path: &Path) -> anyhow::Result<HourlyPanel> {
    let file = fs::File::open(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    load_panel(file, &Default::default()).with_context(|| format!("loading {}", path.display()))
}

fn simulate_esm(panel: &Path, fleet: &Path, window: usize, keep: usize, out: &Path) -> anyhow::Result<()> {
    let panel = read_panel(panel)?;
    let fleet = read_fleet(fleet).map_err(lift)?;
    let mcp = rolling_mcp(&fleet, &panel, window, keep)?;
    if panel.has(MCP) {
        log::warn!("replacing the existing mcp column");
    }
    let panel = panel.with_series(MCP, mcp)?;
    let mut buf = Vec::new();
    write_panel(&panel, &mut buf)?;
    emit(Some(out), &buf)
}

fn synth(common: &Common, days: Option<usize>, fleet_out: Option<&Path>) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(d) = days {
        cfg.synth.days = d;
    }
    let (panel, fleet) = synth_market(&cfg.synth, cfg.seed).map_err(|e| config_err(e.to_string()))?;
    let mut buf = Vec::new();
    write_panel(&panel, &mut buf)?;
    emit(cfg.out.as_deref(), &buf)?;
    if let Some(p) = fleet_out {
        emit(Some(p), serde_json::to_string_pretty(&fleet)?.as_bytes())?;
    }
    Ok(())
}

fn fit_or_forecast(args: &ModelArgs, forecast: bool) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(p) = &args.panel {
        cfg.data.panel = Some(p.clone());
    }
    let kind: ModelKind = args.model.parse().map_err(config_err)?;
    let arm = match cfg.arms.as_slice() {
        [a] => *a,
        _ if !kind.uses_arm() => Arm::Fundamentals,
        _ => return Err(config_err("choose exactly one --arm")),
    };
    cfg.validate().map_err(lift)?;
    let panel = load_data(&cfg).map_err(lift)?;
    let day = match args.date {
        Some(d) => panel
            .day_index(d)
            .ok_or_else(|| config_err(format!("{d} is not in the panel")))?,
        None => panel.n_days() - 1,
    };
    let exo_owned = arm.exo(&cfg.fundamentals);
    let exo: Vec<&str> = exo_owned.iter().map(|s| s.as_str()).collect();
    let id = kind.name();
    let date = panel.date(day);
    let (params, fc): (String, Option<DayAheadForecast>) = match kind {
        ModelKind::Naive => {
            let p = naive_forecast(&panel, date)?;
            (String::new(), Some(DayAheadForecast::new(id, date, p)?))
        }
        ModelKind::Esm => {
            let p = panel.day_values(MCP, day)?;
            (String::new(), Some(DayAheadForecast::from_slice(id, date, p)?))
        }
        ModelKind::Larx => {
            let m = fit_larx(&panel, day, cfg.larx.window_days, &exo, &cfg.larx.config)?;
            let f = forecast.then(|| forecast_larx(&m, &panel, day, id)).transpose()?;
            (m.coefficients_text(), f)
        }
        ModelKind::Lear => {
            let m = fit_lear(&panel, day, cfg.lear.window_days, &exo, &cfg.lear.config)?;
            let f = forecast.then(|| forecast_lear(&m, &panel, day, id)).transpose()?;
            (m.coefficients_text(), f)
        }
        ModelKind::EnsLear => {
            let ms = fit_ens_lear(&panel, day, &cfg.ens_lear.windows, &exo, &cfg.ens_lear.config)?;
            let f = forecast.then(|| forecast_ens_lear(&ms, &panel, day, id)).transpose()?;
            (ms.iter().map(|m| m.coefficients_text()).collect(), f)
        }
        ModelKind::Rf => {
            let m = fit_rf_model(&panel, day, cfg.rf.window_days, &exo, &cfg.rf.params, cfg.seed)?;
            let f = forecast.then(|| m.forecast(&panel, day, id)).transpose()?;
            (serde_json::to_string(&m)?, f)
        }
        ModelKind::Dnn | ModelKind::EnsDnn => {
            let seeds: Vec<u64> = if kind == ModelKind::Dnn {
                cfg.dnn.seeds.iter().take(1).copied().collect()
            } else {
                cfg.dnn.seeds.clone()
            };
            let mut text = String::new();
            let mut members = Vec::new();
            for s in seeds {
                let m = search_dnn(&panel, day, cfg.dnn.window_days, &exo, &cfg.dnn.config, s)?;
                text.push_str(&m.net.to_text());
                if forecast {
                    members.push(m.forecast(&panel, day, id)?);
                }
            }
            let f = forecast.then(|| evaluate::ensemble_forecast(id, &members)).transpose()?;
            (text, f)
        }
        ModelKind::Lstm => {
            let m = fit_lstm(&panel, day, cfg.lstm.window_days, &exo, &cfg.lstm.config, cfg.seed)?;
            let f = forecast.then(|| m.forecast(&panel, day, id)).transpose()?;
            (m.net.to_text(), f)
        }
    };
    let out = cfg.out.as_deref();
    if forecast {
        let f = fc.expect("forecast requested");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["timestamp", "model", "arm", "forecast"])?;
        let arm_name = if kind.uses_arm() { arm.name() } else { "none" };
        for h in 0..HOURS {
            w.write_record([format_timestamp(f.date, h), id.to_string(), arm_name.to_string(), format!("{:.6}", f.prices[h])])?;
        }
        emit(out, &w.into_inner()?)
    } else {
        if params.is_empty() {
            return Err(config_err(format!("{id} has no parameters to fit")));
        }
        emit(out, params.as_bytes())
    }
}

fn read_forecasts(path: &Path) -> anyhow::Result<(Vec<ForecastSeries>, Vec<(NaiveDate, [f64; HOURS])>)> {
    let file = fs::File::open(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let (series, actual) = read_forecasts_csv(file).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    if series.is_empty() {
        return Err(config_err(format!("{} holds no forecasts", path.display())));
    }
    let actual: Vec<(NaiveDate, [f64; HOURS])> = actual.into_iter().collect();
    for s in &series {
        if s.forecasts.len() != actual.len() {
            return Err(anyhow!("{} covers {} of {} days", s.label(), s.forecasts.len(), actual.len()));
        }
    }
    Ok((series, actual))
}

fn flat(days: impl Iterator<Item = [f64; HOURS]>) -> Vec<f64> {
    days.flat_map(|d| d.into_iter()).collect()
}

fn evaluate_cmd(path: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (series, actual) = read_forecasts(path)?;
    let naive = series
        .iter()
        .find(|s| s.model == "naive" && s.member_of.is_none())
        .ok_or_else(|| config_err("the forecasts file needs a `naive` series for rMAE"))?;
    let naive = flat(naive.forecasts.iter().map(|f| f.prices));
    let act = flat(actual.iter().map(|a| a.1));
    let rows = series
        .iter()
        .map(|s| {
            let r = evaluate::metrics(&flat(s.forecasts.iter().map(|f| f.prices)), &act, &naive)?;
            let arm = s.arm.map(|a| a.name().to_string()).unwrap_or_else(|| "none".into());
            let model = match &s.member_of {
                Some(e) => format!("{e}/{}", s.model),
                None => s.model.clone(),
            };
            Ok((model, arm, r))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    evaluate::write_metrics_csv(&rows, &mut buf)?;
    emit(out, &buf)
}

fn main_series(series: Vec<ForecastSeries>) -> Vec<ForecastSeries> {
    series.into_iter().filter(|s| s.member_of.is_none()).collect()
}

fn gw_cmd(path: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (series, actual) = read_forecasts(path)?;
    let errors: Vec<(String, Vec<[f64; HOURS]>)> = main_series(series)
        .iter()
        .map(|s| {
            let e = s
                .forecasts
                .iter()
                .zip(&actual)
                .map(|(f, a)| std::array::from_fn(|h| f.prices[h] - a.1[h]))
                .collect();
            (s.label(), e)
        })
        .collect();
    let m = evaluate::gw_matrix(&errors)?;
    let mut csv_buf = Vec::new();
    m.write_csv(&mut csv_buf)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("gw_pvalues.csv"), &csv_buf)?;
            let mut json = m.to_json();
            if !json.ends_with('\n') {
                json.push('\n');
            }
            fs::write(dir.join("gw_pvalues.json"), json)?;
            Ok(())
        }
        None => emit(None, &csv_buf),
    }
}

fn storage_cmd(path: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (series, actual) = read_forecasts(path)?;
    let inputs: Vec<(String, Vec<DayAheadForecast>)> =
        main_series(series).into_iter().map(|s| (s.label(), s.forecasts)).collect();
    let rows = backtest_storage(&inputs, &actual, &StorageSpec::archetypes())?;
    let mut buf = Vec::new();
    write_storage_csv(&rows, &mut buf)?;
    emit(out, &buf)
}

fn backtest_cmd(common: &Common, models: Option<Vec<String>>, audit: bool) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(ms) = models {
        cfg.models = ms
            .iter()
            .map(|m| m.trim().parse::<ModelKind>().map_err(config_err))
            .collect::<Result<_, _>>()?;
    }
    cfg.audit |= audit;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| config_err("an output directory is required (--out or `out` in the config)"))?;
    cfg.validate().map_err(lift)?;
    let panel = load_data(&cfg).map_err(lift)?;
    let report = match run_backtest(&cfg, &panel) {
        Ok(r) => r,
        Err(e) => {
            if let Ok(Some(p)) = flush_partial(&e, &out) {
                eprintln!("partial forecasts written to {}", p.display());
            }
            return Err(lift(e));
        }
    };
    let manifest = write_report(&report, &cfg, &out)?;
    log::info!("wrote {} files to {} (config {})", manifest.files.len() + 2, out.display(), manifest.config_hash);
    for (model, arm, r) in &report.metrics {
        log::info!("{model} [{arm}] MAE {:.3}", r.mae);
    }
    Ok(())
}
