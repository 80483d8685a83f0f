//! Rolling day-ahead backtest over the three regressor arms, with metrics,
//! pairwise GW tests, the storage backtest and a reproducibility manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dispatch::{self, FleetSpec, DEFAULT_KEEP_HOURS, DEFAULT_WINDOW_HOURS};
use crate::evaluate::{self, DayAheadForecast, GwMatrix, MetricsReport, GW_MIN_DAYS};
use crate::forest::{fit_rf_model, ForestParams, RfModel};
use crate::linear::{
    fit_ens_lear, fit_larx, fit_lear, forecast_ens_lear, forecast_larx, forecast_lear, LarxModel, LearConfig, LearModel,
    DEFAULT_ENS_WINDOWS,
};
use crate::neural::{fit_dnn, fit_lstm, search_dnn, Candidate, DnnConfig, DnnModel, LstmConfig, LstmModel};
use crate::panel::{self, format_timestamp, load_panel, naive_forecast, ColumnSchema, HourlyPanel, HOURS, MCP};
use crate::storage::{backtest_storage, write_storage_csv, StorageResult, StorageSpec};
use crate::synth::{synth_market, SynthConfig};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{model} [{arm}] on {date}: {message}")]
    Failed {
        model: String,
        arm: String,
        date: NaiveDate,
        message: String,
        /// Forecasts finished before the failure.
        partial: Vec<ForecastSeries>,
    },
    #[error("leakage: {model} [{arm}] on {date} changes when data after the bid deadline is removed")]
    Leakage { model: String, arm: String, date: NaiveDate },
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Eval(#[from] evaluate::EvalError),
    #[error(transparent)]
    Storage(#[from] crate::storage::StorageError),
}

impl BacktestError {
    pub fn is_config(&self) -> bool {
        matches!(self, BacktestError::Config(_))
    }
}

/// Regressor sets compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "fundamentals")]
    Fundamentals,
    #[serde(rename = "mcp-only")]
    McpOnly,
    #[serde(rename = "fundamentals+mcp")]
    FundamentalsMcp,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Fundamentals, Arm::McpOnly, Arm::FundamentalsMcp];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Fundamentals => "fundamentals",
            Arm::McpOnly => "mcp-only",
            Arm::FundamentalsMcp => "fundamentals+mcp",
        }
    }

    pub fn exo(self, fundamentals: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        if self != Arm::McpOnly {
            out.extend(fundamentals.iter().cloned());
        }
        if self != Arm::Fundamentals {
            out.push(MCP.to_string());
        }
        out
    }

    pub fn uses_mcp(self) -> bool {
        self != Arm::Fundamentals
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown arm `{s}` (fundamentals, mcp-only, fundamentals+mcp)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Same hour one week earlier.
    Naive,
    /// The dispatch model's MCP used directly as the forecast.
    Esm,
    Larx,
    Lear,
    EnsLear,
    Rf,
    Dnn,
    EnsDnn,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::Naive,
        ModelKind::Esm,
        ModelKind::Larx,
        ModelKind::Lear,
        ModelKind::EnsLear,
        ModelKind::Rf,
        ModelKind::Dnn,
        ModelKind::EnsDnn,
        ModelKind::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Naive => "naive",
            ModelKind::Esm => "esm",
            ModelKind::Larx => "larx",
            ModelKind::Lear => "lear",
            ModelKind::EnsLear => "ens-lear",
            ModelKind::Rf => "rf",
            ModelKind::Dnn => "dnn",
            ModelKind::EnsDnn => "ens-dnn",
            ModelKind::Lstm => "lstm",
        }
    }

    /// Models that take no regressors run once, outside the arms.
    pub fn uses_arm(self) -> bool {
        !matches!(self, ModelKind::Naive | ModelKind::Esm)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown model `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Hourly CSV; without it a synthetic market is generated.
    pub panel: Option<PathBuf>,
    pub schema: ColumnSchema,
    /// Fleet JSON used to compute the MCP when the CSV has none.
    pub fleet: Option<PathBuf>,
    pub window_hours: usize,
    pub keep_hours: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            panel: None,
            schema: ColumnSchema::default(),
            fleet: None,
            window_hours: DEFAULT_WINDOW_HOURS,
            keep_hours: DEFAULT_KEEP_HOURS,
        }
    }
}

/// Days between refits per model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cadence {
    pub linear: usize,
    pub forest: usize,
    pub neural: usize,
}

impl Default for Cadence {
    fn default() -> Self {
        Cadence {
            linear: 1,
            forest: 7,
            neural: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearSettings {
    pub window_days: usize,
    pub config: LearConfig,
}

impl Default for LinearSettings {
    fn default() -> Self {
        LinearSettings {
            window_days: 182,
            config: LearConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsLearSettings {
    pub windows: Vec<usize>,
    pub config: LearConfig,
}

impl Default for EnsLearSettings {
    fn default() -> Self {
        EnsLearSettings {
            windows: DEFAULT_ENS_WINDOWS.to_vec(),
            config: LearConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfSettings {
    pub window_days: usize,
    pub params: ForestParams,
}

impl Default for RfSettings {
    fn default() -> Self {
        RfSettings {
            window_days: 91,
            params: ForestParams {
                trees: 50,
                min_samples_leaf: 3,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnnSettings {
    pub window_days: usize,
    pub config: DnnConfig,
    /// One per Ens-DNN member; the single DNN uses the first.
    pub seeds: Vec<u64>,
}

impl Default for DnnSettings {
    fn default() -> Self {
        DnnSettings {
            window_days: 182,
            config: DnnConfig::default(),
            seeds: vec![1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmSettings {
    pub window_days: usize,
    pub config: LstmConfig,
}

impl Default for LstmSettings {
    fn default() -> Self {
        LstmSettings {
            window_days: 182,
            config: LstmConfig::default(),
        }
    }
}

/// Everything a backtest run depends on. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub test_days: usize,
    pub arms: Vec<Arm>,
    pub models: Vec<ModelKind>,
    /// Exogenous series of the fundamentals arms.
    pub fundamentals: Vec<String>,
    pub cadence: Cadence,
    pub larx: LinearSettings,
    pub lear: LinearSettings,
    pub ens_lear: EnsLearSettings,
    pub rf: RfSettings,
    pub dnn: DnnSettings,
    pub lstm: LstmSettings,
    /// Names from the built-in archetypes (storage1, storage2, storage3).
    pub storage: Vec<String>,
    /// Re-run every forecast on data cut at the bid deadline and compare.
    pub audit: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            synth: SynthConfig {
                days: 300,
                ..Default::default()
            },
            test_days: 90,
            arms: vec![Arm::FundamentalsMcp],
            models: vec![ModelKind::Naive, ModelKind::Esm, ModelKind::Larx, ModelKind::Lear],
            fundamentals: panel::FUNDAMENTALS.iter().map(|s| s.to_string()).collect(),
            cadence: Cadence::default(),
            larx: LinearSettings::default(),
            lear: LinearSettings::default(),
            ens_lear: EnsLearSettings::default(),
            rf: RfSettings::default(),
            dnn: DnnSettings::default(),
            lstm: LstmSettings::default(),
            storage: StorageSpec::archetypes().into_iter().map(|(n, _)| n).collect(),
            audit: false,
            out: None,
        }
    }
}

impl RunConfig {
    /// Parses TOML. `seed` must be given explicitly; relative paths are
    /// resolved against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self, BacktestError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| BacktestError::Config(e.to_string()))?;
        if value.get("seed").is_none() {
            return Err(BacktestError::Config("`seed` must be set explicitly".into()));
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| BacktestError::Config(e.to_string()))?;
        if let Some(base) = base {
            let fix = |p: &mut Option<PathBuf>| {
                if let Some(path) = p {
                    if path.is_relative() {
                        *path = base.join(&*path);
                    }
                }
            };
            fix(&mut cfg.data.panel);
            fix(&mut cfg.data.fleet);
            fix(&mut cfg.out);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BacktestError> {
        let text = fs::read_to_string(path).map_err(|e| BacktestError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), BacktestError> {
        let bad = |m: String| Err(BacktestError::Config(m));
        for p in [&self.data.panel, &self.data.fleet].into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("file {} does not exist", p.display()));
            }
        }
        if self.test_days == 0 {
            return bad("test_days must be at least 1".into());
        }
        if self.models.is_empty() {
            return bad("no models selected".into());
        }
        if self.arms.is_empty() && self.models.iter().any(|m| m.uses_arm()) {
            return bad("no arms selected".into());
        }
        let c = self.cadence;
        if c.linear == 0 || c.forest == 0 || c.neural == 0 {
            return bad("refit cadences must be at least 1 day".into());
        }
        let known = StorageSpec::archetypes();
        for s in &self.storage {
            if !known.iter().any(|(n, _)| n == s) {
                return bad(format!("unknown storage archetype `{s}`"));
            }
        }
        if self.models.contains(&ModelKind::EnsDnn) || self.models.contains(&ModelKind::Dnn) {
            if self.dnn.seeds.is_empty() {
                return bad("dnn.seeds is empty".into());
            }
        }
        if self.models.contains(&ModelKind::EnsLear) && self.ens_lear.windows.is_empty() {
            return bad("ens_lear.windows is empty".into());
        }
        if self.fundamentals.is_empty() && self.arms.contains(&Arm::Fundamentals) {
            return bad("the fundamentals arm needs at least one series".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form without the output directory, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.without_out()).expect("config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }

    fn without_out(&self) -> RunConfig {
        RunConfig {
            out: None,
            ..self.clone()
        }
    }

    fn storages(&self) -> Vec<(String, StorageSpec)> {
        StorageSpec::archetypes()
            .into_iter()
            .filter(|(n, _)| self.storage.contains(n))
            .collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads the CSV (computing the MCP from the fleet when missing) or generates
/// a synthetic market.
pub fn load_data(cfg: &RunConfig) -> Result<HourlyPanel, BacktestError> {
    let Some(path) = &cfg.data.panel else {
        return synth_market(&cfg.synth, cfg.seed)
            .map(|(p, _)| p)
            .map_err(|e| BacktestError::Data(e.to_string()));
    };
    let file = fs::File::open(path).map_err(|e| BacktestError::Config(format!("{}: {e}", path.display())))?;
    let mut panel = load_panel(file, &cfg.data.schema).map_err(|e| BacktestError::Data(format!("{}: {e}", path.display())))?;
    if !panel.has(MCP) {
        if let Some(fleet_path) = &cfg.data.fleet {
            let fleet = read_fleet(fleet_path)?;
            let mcp = dispatch::rolling_mcp(&fleet, &panel, cfg.data.window_hours, cfg.data.keep_hours)
                .map_err(|e| BacktestError::Data(e.to_string()))?;
            panel = panel.with_series(MCP, mcp).map_err(|e| BacktestError::Data(e.to_string()))?;
        }
    }
    Ok(panel)
}

pub fn read_fleet(path: &Path) -> Result<FleetSpec, BacktestError> {
    let text = fs::read_to_string(path).map_err(|e| BacktestError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| BacktestError::Config(format!("{}: {e}", path.display())))
}

/// Forecasts of one model on one arm over the test days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSeries {
    pub model: String,
    /// `None` for models without regressors.
    pub arm: Option<Arm>,
    /// Set on ensemble members: the ensemble's model name.
    pub member_of: Option<String>,
    pub forecasts: Vec<DayAheadForecast>,
}

impl ForecastSeries {
    /// `model` or `model[arm]`.
    pub fn label(&self) -> String {
        match self.arm {
            Some(a) => format!("{}[{}]", self.model, a),
            None => self.model.clone(),
        }
    }

    fn arm_name(&self) -> String {
        self.arm.map(|a| a.name().to_string()).unwrap_or_else(|| "none".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCheck {
    pub ensemble: String,
    pub arm: Option<Arm>,
    pub ensemble_mae: f64,
    pub mean_member_mae: f64,
}

impl EnsembleCheck {
    pub fn holds(&self) -> bool {
        self.ensemble_mae <= self.mean_member_mae + 1e-12 * self.mean_member_mae.abs().max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub config_hash: String,
    pub seed: u64,
    pub dates: Vec<NaiveDate>,
    pub actual: Vec<[f64; HOURS]>,
    /// Main models first, ensemble members after, in run order.
    pub series: Vec<ForecastSeries>,
    pub metrics: Vec<(String, String, MetricsReport)>,
    pub gw: Option<GwMatrix>,
    pub storage: Vec<StorageResult>,
    pub ensembles: Vec<EnsembleCheck>,
}

impl BacktestReport {
    pub fn series(&self, model: &str, arm: Option<Arm>) -> Option<&ForecastSeries> {
        self.series
            .iter()
            .find(|s| s.model == model && s.arm == arm && s.member_of.is_none())
    }

    pub fn mae(&self, model: &str, arm: Option<Arm>) -> Option<f64> {
        let arm_name = arm.map(|a| a.name()).unwrap_or("none");
        self.metrics
            .iter()
            .find(|(m, a, _)| m == model && a == arm_name)
            .map(|r| r.2.mae)
    }
}

enum Fitted {
    Naive,
    Esm,
    Larx(LarxModel),
    Lear(LearModel),
    EnsLear(Vec<LearModel>),
    Rf(RfModel),
    Dnn(Vec<DnnModel>),
    Lstm(LstmModel),
}

struct Job<'a> {
    cfg: &'a RunConfig,
    kind: ModelKind,
    exo: Vec<String>,
    /// Hyperparameters found at the first DNN fit, with the member seeds.
    dnn_hyper: Vec<(Candidate, u64)>,
    /// Test hook: forecasts the target day's own price when it is visible.
    #[cfg(test)]
    peek: bool,
}

impl Job<'_> {
    fn cadence(&self) -> usize {
        match self.kind {
            ModelKind::Naive | ModelKind::Esm => usize::MAX,
            ModelKind::Larx | ModelKind::Lear | ModelKind::EnsLear => self.cfg.cadence.linear,
            ModelKind::Rf => self.cfg.cadence.forest,
            ModelKind::Dnn | ModelKind::EnsDnn | ModelKind::Lstm => self.cfg.cadence.neural,
        }
    }

    fn dnn_seeds(&self) -> Vec<u64> {
        let s = &self.cfg.dnn.seeds;
        let seeds = if self.kind == ModelKind::Dnn { &s[..1] } else { &s[..] };
        seeds.iter().map(|v| v ^ self.cfg.seed.rotate_left(17)).collect()
    }

    fn fit(&mut self, panel: &HourlyPanel, day: usize) -> Result<Fitted, String> {
        let exo: Vec<&str> = self.exo.iter().map(|s| s.as_str()).collect();
        let cfg = self.cfg;
        let e = |x: &dyn fmt::Display| x.to_string();
        Ok(match self.kind {
            ModelKind::Naive => Fitted::Naive,
            ModelKind::Esm => Fitted::Esm,
            ModelKind::Larx => Fitted::Larx(fit_larx(panel, day, cfg.larx.window_days, &exo, &cfg.larx.config).map_err(|x| e(&x))?),
            ModelKind::Lear => Fitted::Lear(fit_lear(panel, day, cfg.lear.window_days, &exo, &cfg.lear.config).map_err(|x| e(&x))?),
            ModelKind::EnsLear => Fitted::EnsLear(
                fit_ens_lear(panel, day, &cfg.ens_lear.windows, &exo, &cfg.ens_lear.config).map_err(|x| e(&x))?,
            ),
            ModelKind::Rf => Fitted::Rf(
                fit_rf_model(panel, day, cfg.rf.window_days, &exo, &cfg.rf.params, cfg.seed).map_err(|x| e(&x))?,
            ),
            ModelKind::Dnn | ModelKind::EnsDnn => {
                if self.dnn_hyper.is_empty() {
                    let mut members = Vec::new();
                    for s in self.dnn_seeds() {
                        let m = search_dnn(panel, day, cfg.dnn.window_days, &exo, &cfg.dnn.config, s).map_err(|x| e(&x))?;
                        self.dnn_hyper.push((m.candidate.clone(), s));
                        members.push(m);
                    }
                    Fitted::Dnn(members)
                } else {
                    let members = self
                        .dnn_hyper
                        .iter()
                        .map(|(c, s)| fit_dnn(panel, day, cfg.dnn.window_days, &exo, c, &cfg.dnn.config, *s))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|x| e(&x))?;
                    Fitted::Dnn(members)
                }
            }
            ModelKind::Lstm => Fitted::Lstm(
                fit_lstm(panel, day, cfg.lstm.window_days, &exo, &cfg.lstm.config, cfg.seed).map_err(|x| e(&x))?,
            ),
        })
    }

    /// The model's forecast plus its members' forecasts for ensembles.
    fn forecast(&self, fitted: &Fitted, panel: &HourlyPanel, day: usize) -> Result<(DayAheadForecast, Vec<DayAheadForecast>), String> {
        let id = self.kind.name();
        let date = panel.date(day);
        let e = |x: &dyn fmt::Display| x.to_string();
        #[cfg(test)]
        if self.peek {
            let seen = panel.day_values(panel::PRICE, day).map_err(|x| e(&x))?;
            if seen.iter().all(|v| v.is_finite()) {
                return Ok((DayAheadForecast::from_slice(id, date, seen).map_err(|x| e(&x))?, vec![]));
            }
        }
        Ok(match fitted {
            Fitted::Naive => {
                let p = naive_forecast(panel, date).map_err(|x| e(&x))?;
                (DayAheadForecast::new(id, date, p).map_err(|x| e(&x))?, vec![])
            }
            Fitted::Esm => {
                let v = panel.day_values(MCP, day).map_err(|x| e(&x))?;
                (DayAheadForecast::from_slice(id, date, v).map_err(|x| e(&x))?, vec![])
            }
            Fitted::Larx(m) => (forecast_larx(m, panel, day, id).map_err(|x| e(&x))?, vec![]),
            Fitted::Lear(m) => (forecast_lear(m, panel, day, id).map_err(|x| e(&x))?, vec![]),
            Fitted::EnsLear(ms) => {
                let members = ms
                    .iter()
                    .map(|m| forecast_lear(m, panel, day, &format!("lear-w{}", m.window_days)))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|x| e(&x))?;
                let ens = forecast_ens_lear(ms, panel, day, id).map_err(|x| e(&x))?;
                (ens, members)
            }
            Fitted::Rf(m) => (m.forecast(panel, day, id).map_err(|x| e(&x))?, vec![]),
            Fitted::Dnn(ms) => {
                let members = ms
                    .iter()
                    .zip(&self.dnn_hyper)
                    .map(|(m, (_, s))| m.forecast(panel, day, &format!("dnn-s{s}")))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|x| e(&x))?;
                let ens = evaluate::ensemble_forecast(id, &members).map_err(|x| e(&x))?;
                let members = if ms.len() > 1 { members } else { vec![] };
                (ens, members)
            }
            Fitted::Lstm(m) => (m.forecast(panel, day, id).map_err(|x| e(&x))?, vec![]),
        })
    }
}

type JobOutput = (Vec<DayAheadForecast>, Vec<Vec<DayAheadForecast>>);

/// Runs one model over the test days. With `censor`, every fit and forecast
/// sees only the data available at its bid deadline.
fn run_job(job: &mut Job, panel: &HourlyPanel, test: std::ops::Range<usize>, censor: bool) -> Result<JobOutput, (NaiveDate, String)> {
    let mut fitted: Option<(usize, Fitted)> = None;
    let mut main = Vec::with_capacity(test.len());
    let mut members: Vec<Vec<DayAheadForecast>> = Vec::new();
    let cadence = job.cadence();
    for day in test {
        let date = panel.date(day);
        let stale = match &fitted {
            None => true,
            Some((at, _)) => day - at >= cadence,
        };
        if stale {
            let view;
            let source = if censor {
                view = panel.censored_for_bid(day);
                &view
            } else {
                panel
            };
            let f = job.fit(source, day).map_err(|m| (date, m))?;
            fitted = Some((day, f));
        }
        let view;
        let source = if censor {
            view = panel.censored_for_bid(day);
            &view
        } else {
            panel
        };
        let (f, ms) = job
            .forecast(&fitted.as_ref().expect("fitted above").1, source, day)
            .map_err(|m| (date, m))?;
        main.push(f);
        if members.is_empty() {
            members = vec![Vec::new(); ms.len()];
        }
        for (acc, m) in members.iter_mut().zip(ms) {
            acc.push(m);
        }
    }
    Ok((main, members))
}

fn flatten(days: &[[f64; HOURS]]) -> Vec<f64> {
    days.iter().flatten().copied().collect()
}

fn prices_of(fs: &[DayAheadForecast]) -> Vec<[f64; HOURS]> {
    fs.iter().map(|f| f.prices).collect()
}

/// Runs the configured models over the last `test_days` days of `panel`.
pub fn run_backtest(cfg: &RunConfig, panel: &HourlyPanel) -> Result<BacktestReport, BacktestError> {
    cfg.validate()?;
    let n = panel.n_days();
    if cfg.test_days + 8 > n {
        return Err(BacktestError::Config(format!(
            "{} test days need a longer panel than {n} days",
            cfg.test_days
        )));
    }
    let needs_mcp = cfg.models.contains(&ModelKind::Esm) || cfg.arms.iter().any(|a| a.uses_mcp());
    if needs_mcp && !panel.has(MCP) {
        return Err(BacktestError::Config(
            "the panel has no mcp series; add one or configure data.fleet".into(),
        ));
    }
    let test = n - cfg.test_days..n;
    let dates: Vec<NaiveDate> = test.clone().map(|d| panel.date(d)).collect();
    let actual: Vec<[f64; HOURS]> = test
        .clone()
        .map(|d| panel.day_values(panel::PRICE, d).expect("price").try_into().expect("24 hours"))
        .collect();

    let mut jobs = Vec::new();
    for &kind in &cfg.models {
        if kind.uses_arm() {
            for &arm in &cfg.arms {
                jobs.push((kind, Some(arm)));
            }
        } else {
            jobs.push((kind, None));
        }
    }

    let mut series: Vec<ForecastSeries> = Vec::new();
    let mut member_series: Vec<ForecastSeries> = Vec::new();
    for (kind, arm) in jobs {
        log::info!("running {kind}{}", arm.map(|a| format!(" [{a}]")).unwrap_or_default());
        let mut job = Job {
            cfg,
            kind,
            exo: arm.map(|a| a.exo(&cfg.fundamentals)).unwrap_or_default(),
            dnn_hyper: Vec::new(),
            #[cfg(test)]
            peek: cfg.fundamentals.iter().any(|f| f == "peek"),
        };
        let fail = |date: NaiveDate, message: String, series: &[ForecastSeries]| BacktestError::Failed {
            model: kind.name().into(),
            arm: arm.map(|a| a.name().to_string()).unwrap_or_else(|| "none".into()),
            date,
            message,
            partial: series.to_vec(),
        };
        let (main, members) = run_job(&mut job, panel, test.clone(), false).map_err(|(d, m)| fail(d, m, &series))?;
        if cfg.audit {
            let mut audit_job = Job {
                dnn_hyper: Vec::new(),
                ..job
            };
            let (censored, censored_members) =
                run_job(&mut audit_job, panel, test.clone(), true).map_err(|(d, m)| fail(d, m, &series))?;
            let differs = main.iter().zip(&censored).find(|(a, b)| a != b).or_else(|| {
                members
                    .iter()
                    .flatten()
                    .zip(censored_members.iter().flatten())
                    .find(|(a, b)| a != b)
            });
            if let Some((a, _)) = differs {
                return Err(BacktestError::Leakage {
                    model: kind.name().into(),
                    arm: arm.map(|x| x.name().to_string()).unwrap_or_else(|| "none".into()),
                    date: a.date,
                });
            }
        }
        for m in members {
            member_series.push(ForecastSeries {
                model: m[0].model.clone(),
                arm,
                member_of: Some(kind.name().into()),
                forecasts: m,
            });
        }
        series.push(ForecastSeries {
            model: kind.name().into(),
            arm,
            member_of: None,
            forecasts: main,
        });
    }

    let naive: Vec<[f64; HOURS]> = dates
        .iter()
        .map(|&d| naive_forecast(panel, d).map_err(|e| BacktestError::Data(e.to_string())))
        .collect::<Result<_, _>>()?;
    let actual_flat = flatten(&actual);
    let naive_flat = flatten(&naive);
    let mut metrics = Vec::new();
    for s in &series {
        let r = evaluate::metrics(&flatten(&prices_of(&s.forecasts)), &actual_flat, &naive_flat)?;
        metrics.push((s.model.clone(), s.arm_name(), r));
    }

    let mut ensembles = Vec::new();
    for s in &series {
        let members: Vec<&ForecastSeries> = member_series
            .iter()
            .filter(|m| m.member_of.as_deref() == Some(&s.model) && m.arm == s.arm)
            .collect();
        if members.is_empty() {
            continue;
        }
        let ens = evaluate::metrics(&flatten(&prices_of(&s.forecasts)), &actual_flat, &naive_flat)?.mae;
        let mut total = 0.0;
        for m in &members {
            total += evaluate::metrics(&flatten(&prices_of(&m.forecasts)), &actual_flat, &naive_flat)?.mae;
        }
        ensembles.push(EnsembleCheck {
            ensemble: s.model.clone(),
            arm: s.arm,
            ensemble_mae: ens,
            mean_member_mae: total / members.len() as f64,
        });
    }

    let gw = if dates.len() >= GW_MIN_DAYS && series.len() >= 2 {
        let errors: Vec<(String, Vec<[f64; HOURS]>)> = series
            .iter()
            .map(|s| {
                let e = s
                    .forecasts
                    .iter()
                    .zip(&actual)
                    .map(|(f, a)| std::array::from_fn(|h| f.prices[h] - a[h]))
                    .collect();
                (s.label(), e)
            })
            .collect();
        Some(evaluate::gw_matrix(&errors)?)
    } else {
        log::warn!("GW matrix skipped: needs {GW_MIN_DAYS} test days and two models");
        None
    };

    let storage_inputs: Vec<(String, Vec<DayAheadForecast>)> =
        series.iter().map(|s| (s.label(), s.forecasts.clone())).collect();
    let actual_days: Vec<(NaiveDate, [f64; HOURS])> = dates.iter().copied().zip(actual.iter().copied()).collect();
    let storage = backtest_storage(&storage_inputs, &actual_days, &cfg.storages())?;

    series.extend(member_series);
    Ok(BacktestReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        dates,
        actual,
        series,
        metrics,
        gw,
        storage,
        ensembles,
    })
}

/// Long format: `timestamp,model,arm,ensemble,forecast,actual`.
pub fn write_forecasts_csv<W: Write>(series: &[ForecastSeries], actual: &[[f64; HOURS]], sink: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["timestamp", "model", "arm", "ensemble", "forecast", "actual"])?;
    for s in series {
        for (f, a) in s.forecasts.iter().zip(actual) {
            for h in 0..HOURS {
                w.write_record([
                    format_timestamp(f.date, h),
                    s.model.clone(),
                    s.arm_name(),
                    s.member_of.clone().unwrap_or_default(),
                    format!("{:.6}", f.prices[h]),
                    format!("{:.6}", a[h]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ForecastRecord {
    timestamp: String,
    model: String,
    arm: String,
    #[serde(default)]
    ensemble: String,
    forecast: f64,
    actual: f64,
}

/// Reads a forecasts file back into series (in first-appearance order) and
/// the actual prices per date.
pub fn read_forecasts_csv<R: Read>(source: R) -> Result<(Vec<ForecastSeries>, BTreeMap<NaiveDate, [f64; HOURS]>), BacktestError> {
    let mut rdr = csv::Reader::from_reader(source);
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut days: BTreeMap<(String, String, String), BTreeMap<NaiveDate, [Option<f64>; HOURS]>> = BTreeMap::new();
    let mut actual: BTreeMap<NaiveDate, [Option<f64>; HOURS]> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<ForecastRecord>().enumerate() {
        let rec = rec?;
        let (date, hour) = panel::parse_timestamp(&rec.timestamp)
            .ok_or_else(|| BacktestError::Data(format!("row {}: bad timestamp `{}`", i + 2, rec.timestamp)))?;
        let key = (rec.model, rec.arm, rec.ensemble);
        if !days.contains_key(&key) {
            order.push(key.clone());
        }
        days.entry(key).or_default().entry(date).or_insert([None; HOURS])[hour] = Some(rec.forecast);
        actual.entry(date).or_insert([None; HOURS])[hour] = Some(rec.actual);
    }
    let complete = |d: &NaiveDate, v: &[Option<f64>; HOURS]| -> Result<[f64; HOURS], BacktestError> {
        let mut out = [0.0; HOURS];
        for (h, x) in v.iter().enumerate() {
            out[h] = x.ok_or_else(|| BacktestError::Data(format!("{d} is missing hour {h}")))?;
        }
        Ok(out)
    };
    let mut series = Vec::new();
    for key in order {
        let forecasts = days[&key]
            .iter()
            .map(|(d, v)| Ok(DayAheadForecast::new(key.0.clone(), *d, complete(d, v)?)?))
            .collect::<Result<Vec<_>, BacktestError>>()?;
        let arm = if key.1 == "none" {
            None
        } else {
            Some(Arm::from_str(&key.1).map_err(BacktestError::Data)?)
        };
        series.push(ForecastSeries {
            model: key.0.clone(),
            arm,
            member_of: (!key.2.is_empty()).then(|| key.2.clone()),
            forecasts,
        });
    }
    let actual = actual
        .iter()
        .map(|(d, v)| Ok((*d, complete(d, v)?)))
        .collect::<Result<_, BacktestError>>()?;
    Ok((series, actual))
}

pub fn write_ensembles_csv<W: Write>(rows: &[EnsembleCheck], sink: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["ensemble", "arm", "ensemble_mae", "mean_member_mae"])?;
    for r in rows {
        w.write_record([
            r.ensemble.clone(),
            r.arm.map(|a| a.name().to_string()).unwrap_or_else(|| "none".into()),
            format!("{:.6}", r.ensemble_mae),
            format!("{:.6}", r.mean_member_mae),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub dnn_seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub models: Vec<ModelKind>,
    pub first_test_date: NaiveDate,
    pub test_days: usize,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

/// Writes the report files into `dir` and returns the manifest.
pub fn write_report(report: &BacktestReport, cfg: &RunConfig, dir: &Path) -> Result<Manifest, BacktestError> {
    fs::create_dir_all(dir)?;
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();

    let mut buf = Vec::new();
    evaluate::write_metrics_csv(&report.metrics, &mut buf)?;
    files.insert("metrics.csv".into(), buf);

    let mut buf = Vec::new();
    write_forecasts_csv(&report.series, &report.actual, &mut buf)?;
    files.insert("forecasts.csv".into(), buf);

    if let Some(gw) = &report.gw {
        let mut buf = Vec::new();
        gw.write_csv(&mut buf)?;
        files.insert("gw_pvalues.csv".into(), buf);
        let mut json = gw.to_json().into_bytes();
        if json.last() != Some(&b'\n') {
            json.push(b'\n');
        }
        files.insert("gw_pvalues.json".into(), json);
    }

    let mut buf = Vec::new();
    write_storage_csv(&report.storage, &mut buf)?;
    files.insert("storage.csv".into(), buf);

    if !report.ensembles.is_empty() {
        let mut buf = Vec::new();
        write_ensembles_csv(&report.ensembles, &mut buf)?;
        files.insert("ensembles.csv".into(), buf);
    }

    for (name, bytes) in &files {
        fs::write(dir.join(name), bytes)?;
    }
    let manifest = Manifest {
        tool: "esmcast".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: report.config_hash.clone(),
        seed: report.seed,
        dnn_seeds: cfg.dnn.seeds.clone(),
        arms: cfg.arms.clone(),
        models: cfg.models.clone(),
        first_test_date: report.dates[0],
        test_days: report.dates.len(),
        files: files.iter().map(|(k, v)| (k.clone(), hex(&Sha256::digest(v)))).collect(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join("manifest.json"), json)?;
    fs::write(dir.join("config.toml"), cfg.without_out().to_toml())?;
    Ok(manifest)
}

/// Writes whatever finished before a failed run as `forecasts.partial.csv`.
pub fn flush_partial(err: &BacktestError, dir: &Path) -> Result<Option<PathBuf>, BacktestError> {
    let BacktestError::Failed { partial, .. } = err else {
        return Ok(None);
    };
    if partial.is_empty() {
        return Ok(None);
    }
    fs::create_dir_all(dir)?;
    let path = dir.join("forecasts.partial.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["timestamp", "model", "arm", "forecast"])?;
    for s in partial {
        for f in &s.forecasts {
            for h in 0..HOURS {
                w.write_record([format_timestamp(f.date, h), s.model.clone(), s.arm_name(), format!("{:.6}", f.prices[h])])?;
            }
        }
    }
    w.flush()?;
    Ok(Some(path))
}
