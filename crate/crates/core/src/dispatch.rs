//! Single-zone hourly dispatch and market clearing prices.
//!
//! Each window is a cost-minimising LP over thermal generation, renewable
//! curtailment, load shedding and an optional pumped storage. The market
//! clearing price of an hour is the dual of that hour's demand balance.
//! Unit commitment (start-up costs, minimum load) is relaxed away.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{solve_lp, LpError, LpProblem, RowSense, Sense};
use crate::panel::{self, HourlyPanel, PanelError, HOURS};

pub const DEFAULT_CURTAILMENT_COST: f64 = 20.0;
pub const DEFAULT_SHEDDING_COST: f64 = 3000.0;
pub const DEFAULT_ENERGY_POWER_FACTOR: f64 = 9.0;

pub const DEFAULT_WINDOW_HOURS: usize = 36;
pub const DEFAULT_KEEP_HOURS: usize = 24;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("inconsistent window: {0}")]
    InconsistentWindow(String),
    #[error("invalid fleet: {0}")]
    InvalidFleet(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("fleet config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fuel {
    Gas,
    Coal,
}

/// Ties a unit's marginal cost to hourly fuel and carbon prices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuelLink {
    pub fuel: Fuel,
    /// Electrical efficiency, MWh_el per MWh_th.
    pub efficiency: f64,
    /// tCO2 per MWh_th.
    pub emission_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub name: String,
    /// EUR/MWh; an adder on top of fuel and carbon cost for fuel-linked units.
    pub marginal_cost: f64,
    /// MW
    pub capacity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuel: Option<FuelLink>,
}

impl Unit {
    pub fn new(name: impl Into<String>, marginal_cost: f64, capacity: f64) -> Self {
        Unit {
            name: name.into(),
            marginal_cost,
            capacity,
            fuel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpedStorage {
    /// MW, for both pumping and turbining.
    pub power: f64,
    /// Hours of full-power generation a full reservoir holds.
    #[serde(default = "default_epf")]
    pub energy_power_factor: f64,
    /// Round-trip efficiency, applied when pumping.
    pub efficiency: f64,
}

fn default_epf() -> f64 {
    DEFAULT_ENERGY_POWER_FACTOR
}

/// Hourly fuel prices (EUR/MWh_th) and carbon price (EUR/t).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FuelPrices {
    pub gas: Vec<f64>,
    pub coal: Vec<f64>,
    pub co2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSpec {
    pub units: Vec<Unit>,
    /// MWh/h, indexed by absolute hour. Empty means no wind.
    #[serde(default)]
    pub wind: Vec<f64>,
    #[serde(default)]
    pub solar: Vec<f64>,
    #[serde(default = "default_curtailment")]
    pub curtailment_cost: f64,
    #[serde(default = "default_shedding")]
    pub shedding_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<PumpedStorage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuel_prices: Option<FuelPrices>,
}

fn default_curtailment() -> f64 {
    DEFAULT_CURTAILMENT_COST
}

fn default_shedding() -> f64 {
    DEFAULT_SHEDDING_COST
}

impl FleetSpec {
    pub fn new(units: Vec<Unit>) -> Self {
        FleetSpec {
            units,
            wind: Vec::new(),
            solar: Vec::new(),
            curtailment_cost: DEFAULT_CURTAILMENT_COST,
            shedding_cost: DEFAULT_SHEDDING_COST,
            storage: None,
            fuel_prices: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, DispatchError> {
        let fleet: FleetSpec = toml::from_str(s).map_err(|e| DispatchError::Config(e.to_string()))?;
        fleet.validate()?;
        Ok(fleet)
    }

    pub fn to_toml_string(&self) -> Result<String, DispatchError> {
        toml::to_string(self).map_err(|e| DispatchError::Config(e.to_string()))
    }

    pub fn renewables(&self, t: usize) -> f64 {
        self.wind.get(t).copied().unwrap_or(0.0) + self.solar.get(t).copied().unwrap_or(0.0)
    }

    /// Marginal cost of unit `u` in absolute hour `t`.
    pub fn unit_cost(&self, u: usize, t: usize) -> Result<f64, DispatchError> {
        let unit = &self.units[u];
        let Some(link) = unit.fuel else {
            return Ok(unit.marginal_cost);
        };
        let prices = self.fuel_prices.as_ref().ok_or_else(|| {
            DispatchError::InvalidFleet(format!("unit {} is fuel-linked but no fuel prices are set", unit.name))
        })?;
        let fuel = match link.fuel {
            Fuel::Gas => &prices.gas,
            Fuel::Coal => &prices.coal,
        };
        let (Some(f), Some(c)) = (fuel.get(t), prices.co2.get(t)) else {
            return Err(DispatchError::InconsistentWindow(format!("no fuel prices for hour {t}")));
        };
        Ok(unit.marginal_cost + (f + c * link.emission_factor) / link.efficiency)
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        let bad = |m: String| Err(DispatchError::InvalidFleet(m));
        if !self.curtailment_cost.is_finite() || !self.shedding_cost.is_finite() {
            return bad("curtailment and shedding costs must be finite".into());
        }
        for u in &self.units {
            if !u.capacity.is_finite() || u.capacity < 0.0 {
                return bad(format!("unit {} has invalid capacity {}", u.name, u.capacity));
            }
            if !u.marginal_cost.is_finite() {
                return bad(format!("unit {} has a non-finite cost", u.name));
            }
            if let Some(l) = u.fuel {
                if !(l.efficiency > 0.0 && l.efficiency <= 1.0) || l.emission_factor < 0.0 {
                    return bad(format!("unit {} has an invalid fuel link", u.name));
                }
            }
            if u.fuel.is_none() {
                if u.marginal_cost >= self.shedding_cost {
                    return bad(format!("unit {} is not cheaper than load shedding", u.name));
                }
                if u.marginal_cost <= -self.curtailment_cost {
                    return bad(format!("unit {} is cheaper than curtailment", u.name));
                }
            }
        }
        if let Some(s) = &self.storage {
            if !(s.power >= 0.0 && s.energy_power_factor >= 0.0 && s.efficiency > 0.0 && s.efficiency <= 1.0) {
                return bad("storage parameters out of range".into());
            }
        }
        if self.wind.iter().chain(&self.solar).any(|v| !v.is_finite() || *v < 0.0) {
            return bad("renewable profiles must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketClearingResult {
    /// Absolute hours covered.
    pub hours: Range<usize>,
    /// EUR/MWh per hour.
    pub mcp: Vec<f64>,
    /// generation[unit][hour]
    pub generation: Vec<Vec<f64>>,
    pub curtailed: Vec<f64>,
    pub shed: Vec<f64>,
    pub charge: Vec<f64>,
    pub discharge: Vec<f64>,
    pub storage_level: Vec<f64>,
    pub objective: f64,
}

impl MarketClearingResult {
    /// supply + shedding - (demand + curtailment) per hour; zero up to solver tolerance.
    pub fn balance_residual(&self, fleet: &FleetSpec, demand: &[f64]) -> Vec<f64> {
        self.hours
            .clone()
            .enumerate()
            .map(|(k, t)| {
                let thermal: f64 = self.generation.iter().map(|g| g[k]).sum();
                thermal + fleet.renewables(t) + self.discharge[k] + self.shed[k]
                    - demand[t]
                    - self.curtailed[k]
                    - self.charge[k]
            })
            .collect()
    }
}

/// Clears one window of at least 24 hours with an empty storage at the start.
pub fn clear_window(fleet: &FleetSpec, demand: &[f64], window: Range<usize>) -> Result<MarketClearingResult, DispatchError> {
    if window.len() < HOURS {
        return Err(DispatchError::InconsistentWindow(format!(
            "window of {} hours is shorter than a day",
            window.len()
        )));
    }
    fleet.validate()?;
    solve_window(fleet, demand, window, 0.0)
}

fn solve_window(
    fleet: &FleetSpec,
    demand: &[f64],
    window: Range<usize>,
    initial_level: f64,
) -> Result<MarketClearingResult, DispatchError> {
    if window.is_empty() || window.end > demand.len() {
        return Err(DispatchError::InconsistentWindow(format!(
            "window {:?} not covered by {} demand values",
            window,
            demand.len()
        )));
    }
    for (name, profile) in [("wind", &fleet.wind), ("solar", &fleet.solar)] {
        if !profile.is_empty() && profile.len() < window.end {
            return Err(DispatchError::InconsistentWindow(format!(
                "{name} profile has {} values, window ends at {}",
                profile.len(),
                window.end
            )));
        }
    }
    let n_units = fleet.units.len();
    let len = window.len();
    let mut lp = LpProblem::new(Sense::Minimize);
    let mut gen_vars = vec![Vec::with_capacity(len); n_units];
    let mut curt_vars = Vec::with_capacity(len);
    let mut shed_vars = Vec::with_capacity(len);
    let mut store_vars = Vec::with_capacity(len);

    for (k, t) in window.clone().enumerate() {
        for (u, unit) in fleet.units.iter().enumerate() {
            let c = fleet.unit_cost(u, t)?;
            gen_vars[u].push(lp.add_var(format!("g_{}_{k}", unit.name), c, 0.0, unit.capacity));
        }
        curt_vars.push(lp.add_var(format!("curt_{k}"), fleet.curtailment_cost, 0.0, fleet.renewables(t)));
        shed_vars.push(lp.add_var(format!("shed_{k}"), fleet.shedding_cost, 0.0, f64::INFINITY));
        if let Some(s) = &fleet.storage {
            let ch = lp.add_var(format!("pump_{k}"), 0.0, 0.0, s.power);
            let dis = lp.add_var(format!("turb_{k}"), 0.0, 0.0, s.power);
            let lvl = lp.add_var(format!("level_{k}"), 0.0, 0.0, s.power * s.energy_power_factor);
            store_vars.push((ch, dis, lvl));
        }
    }

    let mut balance_rows = Vec::with_capacity(len);
    for (k, t) in window.clone().enumerate() {
        let mut coeffs: Vec<(usize, f64)> = gen_vars.iter().map(|g| (g[k], 1.0)).collect();
        coeffs.push((curt_vars[k], -1.0));
        coeffs.push((shed_vars[k], 1.0));
        if let Some(&(ch, dis, _)) = store_vars.get(k) {
            coeffs.push((dis, 1.0));
            coeffs.push((ch, -1.0));
        }
        balance_rows.push(lp.add_row(coeffs, RowSense::Eq, demand[t] - fleet.renewables(t)));
    }
    if let Some(s) = &fleet.storage {
        for k in 0..len {
            let (ch, dis, lvl) = store_vars[k];
            let mut coeffs = vec![(lvl, 1.0), (ch, -s.efficiency), (dis, 1.0)];
            let rhs = if k == 0 {
                initial_level
            } else {
                coeffs.push((store_vars[k - 1].2, -1.0));
                0.0
            };
            lp.add_row(coeffs, RowSense::Eq, rhs);
        }
    }

    let sol = solve_lp(&lp)?;
    let pick = |vars: &[usize]| vars.iter().map(|&v| sol.x[v]).collect::<Vec<f64>>();
    let (charge, discharge, storage_level) = if store_vars.is_empty() {
        (vec![0.0; len], vec![0.0; len], vec![0.0; len])
    } else {
        (
            store_vars.iter().map(|s| sol.x[s.0]).collect(),
            store_vars.iter().map(|s| sol.x[s.1]).collect(),
            store_vars.iter().map(|s| sol.x[s.2]).collect(),
        )
    };
    Ok(MarketClearingResult {
        hours: window,
        mcp: balance_rows
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                let mut implied: Vec<(usize, f64)> = gen_vars.iter().map(|g| (g[k], lp.cost[g[k]])).collect();
                implied.push((curt_vars[k], -fleet.curtailment_cost));
                implied.push((shed_vars[k], fleet.shedding_cost));
                exact_dual(&lp, &sol.x, sol.duals[r], &implied)
            })
            .collect(),
        generation: gen_vars.iter().map(|g| pick(g)).collect(),
        curtailed: pick(&curt_vars),
        shed: pick(&shed_vars),
        charge,
        discharge,
        storage_level,
        objective: sol.objective,
    })
}

/// A variable strictly inside its bounds has zero reduced cost, so when it
/// only enters one balance row that row's dual is exactly its price. This
/// removes the rounding left by the basis inverse.
fn exact_dual(lp: &LpProblem, x: &[f64], dual: f64, implied: &[(usize, f64)]) -> f64 {
    for &(v, price) in implied {
        let tol = 1e-9 * lp.upper[v].abs().min(1e12).max(1.0);
        let interior = x[v] > lp.lower[v] + tol && x[v] < lp.upper[v] - tol;
        if interior && (dual - price).abs() <= 1e-9 * price.abs().max(1.0) {
            return price;
        }
    }
    dual
}

/// Hourly MCP over the full horizon of `demand`, solving windows of
/// `window_hours` and keeping the first `keep_hours` of each. The storage
/// level at the end of the kept hours seeds the next window.
pub fn rolling_mcp_for(
    fleet: &FleetSpec,
    demand: &[f64],
    window_hours: usize,
    keep_hours: usize,
) -> Result<Vec<f64>, DispatchError> {
    if keep_hours < HOURS || window_hours < keep_hours {
        return Err(DispatchError::InconsistentWindow(format!(
            "need window ({window_hours}) >= keep ({keep_hours}) >= 24"
        )));
    }
    fleet.validate()?;
    let n = demand.len();
    let mut mcp = Vec::with_capacity(n);
    let mut level = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + window_hours).min(n);
        let res = solve_window(fleet, demand, start..end, level)?;
        let keep = keep_hours.min(end - start);
        mcp.extend_from_slice(&res.mcp[..keep]);
        if fleet.storage.is_some() {
            level = res.storage_level[keep - 1].max(0.0);
        }
        start += keep;
    }
    Ok(mcp)
}

/// Rolling MCP for a panel: demand is the panel load, renewables and fuel
/// prices come from the panel's wind, solar, gas, coal and co2 series.
pub fn rolling_mcp(
    fleet: &FleetSpec,
    panel: &HourlyPanel,
    window_hours: usize,
    keep_hours: usize,
) -> Result<Vec<f64>, DispatchError> {
    let fleet = fleet_for_panel(fleet, panel)?;
    rolling_mcp_for(&fleet, panel.series(panel::LOAD)?, window_hours, keep_hours)
}

/// Copy of `fleet` whose hourly profiles are taken from the panel.
pub fn fleet_for_panel(fleet: &FleetSpec, panel: &HourlyPanel) -> Result<FleetSpec, DispatchError> {
    let mut f = fleet.clone();
    f.wind = panel.series(panel::WIND)?.to_vec();
    f.solar = panel.series(panel::SOLAR)?.to_vec();
    if f.units.iter().any(|u| u.fuel.is_some()) {
        f.fuel_prices = Some(FuelPrices {
            gas: panel.series(panel::GAS)?.to_vec(),
            coal: panel.series(panel::COAL)?.to_vec(),
            co2: panel.series(panel::CO2)?.to_vec(),
        });
    }
    Ok(f)
}

/// Price of the cheapest stack covering `net_load`, with unit costs at hour `t`.
pub fn merit_order_price_at(fleet: &FleetSpec, t: usize, net_load: f64) -> Result<f64, DispatchError> {
    if net_load < 0.0 {
        return Ok(-fleet.curtailment_cost);
    }
    let mut stack: Vec<(f64, f64)> = (0..fleet.units.len())
        .map(|u| Ok((fleet.unit_cost(u, t)?, fleet.units[u].capacity)))
        .collect::<Result<_, DispatchError>>()?;
    stack.retain(|&(_, cap)| cap > 0.0);
    stack.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut covered = 0.0;
    for (cost, cap) in stack {
        covered += cap;
        if covered >= net_load {
            return Ok(cost);
        }
    }
    Ok(fleet.shedding_cost)
}

/// Merit-order price for a storage-free fleet with constant unit costs.
/// At zero net load this is the cost of the cheapest unit.
pub fn merit_order_price(fleet: &FleetSpec, net_load: f64) -> f64 {
    merit_order_price_at(fleet, 0, net_load).unwrap_or(f64::NAN)
}

/// `timestamp,mcp` CSV, mergeable into a panel file.
pub fn write_mcp_csv<W: Write>(panel: &HourlyPanel, mcp: &[f64], sink: W) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["timestamp", panel::MCP])?;
    for (t, v) in mcp.iter().enumerate() {
        w.write_record([panel::format_timestamp(panel.date(t / HOURS), t % HOURS), format!("{v}")])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
