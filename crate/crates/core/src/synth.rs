//! Synthetic market generator for desk-scale experiments.
//!
//! Fundamentals are drawn from simple seasonal and autoregressive processes,
//! the clearing price comes from the rolling dispatch of a generated fleet,
//! and the observed price is that clearing price plus a calendar component
//! and Gaussian noise. The clearing price is therefore an informative
//! regressor by construction.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{self, DispatchError, FleetSpec, Fuel, FuelLink, PumpedStorage, Unit};
use crate::panel::{self, HourlyPanel, PanelError, HOURS};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub start: NaiveDate,
    pub days: usize,
    /// Thermal units in the generated fleet.
    pub n_units: usize,
    /// Mean load, MW.
    pub base_load: f64,
    /// Relative amplitude of the intraday load shape.
    pub load_daily_amplitude: f64,
    /// Relative load reduction on weekends.
    pub load_weekend_drop: f64,
    /// Relative standard deviation of the day-level load factor.
    pub load_day_sd: f64,
    pub wind_capacity: f64,
    pub solar_capacity: f64,
    pub gas_start: f64,
    pub coal_start: f64,
    pub co2_start: f64,
    /// Daily log-volatility of the fuel and carbon prices.
    pub fuel_volatility: f64,
    /// EUR/MWh amplitude of the intraday price component.
    pub daily_amplitude: f64,
    /// EUR/MWh weekend price offset (subtracted on Saturdays and Sundays).
    pub weekly_amplitude: f64,
    /// Standard deviation of the i.i.d. price noise, EUR/MWh.
    pub noise: f64,
    pub storage: bool,
    pub window_hours: usize,
    pub keep_hours: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            start: NaiveDate::from_ymd_opt(2019, 1, 7).expect("valid date"),
            days: 210,
            n_units: 8,
            base_load: 1000.0,
            load_daily_amplitude: 0.2,
            load_weekend_drop: 0.1,
            load_day_sd: 0.05,
            wind_capacity: 350.0,
            solar_capacity: 200.0,
            gas_start: 20.0,
            coal_start: 10.0,
            co2_start: 25.0,
            fuel_volatility: 0.03,
            daily_amplitude: 3.0,
            weekly_amplitude: 2.0,
            noise: 2.0,
            storage: false,
            window_hours: dispatch::DEFAULT_WINDOW_HOURS,
            keep_hours: dispatch::DEFAULT_KEEP_HOURS,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.days == 0 {
            return bad("days must be positive");
        }
        if self.n_units == 0 {
            return bad("the fleet needs at least one unit");
        }
        if !(self.base_load > 0.0) {
            return bad("base_load must be positive");
        }
        let nonneg = [
            self.load_daily_amplitude,
            self.load_weekend_drop,
            self.load_day_sd,
            self.wind_capacity,
            self.solar_capacity,
            self.fuel_volatility,
            self.daily_amplitude,
            self.weekly_amplitude,
            self.noise,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("amplitudes, capacities and noise levels must be finite and non-negative");
        }
        if self.load_daily_amplitude >= 1.0 || self.load_weekend_drop >= 1.0 {
            return bad("relative load amplitudes must stay below 1");
        }
        if [self.gas_start, self.coal_start, self.co2_start].iter().any(|v| !(*v > 0.0)) {
            return bad("starting fuel and carbon prices must be positive");
        }
        Ok(())
    }

    /// Calendar component added on top of the clearing price.
    pub fn seasonal(&self, weekday: usize, hour: usize) -> f64 {
        let intraday = self.daily_amplitude * (2.0 * PI * (hour as f64 - 9.0) / 24.0).sin();
        let weekend = if weekday >= 5 { -self.weekly_amplitude } else { 0.0 };
        intraday + weekend
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Thermal fleet sized to cover 1.2x the peak load. Cheapest first: a must-run
/// block, then coal units, then gas units of decreasing efficiency.
fn generate_fleet(cfg: &SynthConfig, peak_load: f64, rng: &mut ChaCha8Rng) -> FleetSpec {
    let total = 1.2 * peak_load;
    let n = cfg.n_units;
    let mut units = Vec::with_capacity(n);
    if n == 1 {
        units.push(Unit {
            name: "gas_0".into(),
            marginal_cost: 2.0,
            capacity: total,
            fuel: Some(FuelLink {
                fuel: Fuel::Gas,
                efficiency: 0.5,
                emission_factor: 0.2,
            }),
        });
    } else {
        let nuclear = 0.2 * total;
        units.push(Unit::new("nuclear", 8.0, nuclear));
        let rest = n - 1;
        let n_coal = rest / 2;
        let n_gas = rest - n_coal;
        let each = (total - nuclear) / rest as f64;
        for k in 0..n_coal {
            let eff = 0.44 - 0.06 * k as f64 / n_coal.max(1) as f64 + 0.01 * rng.gen::<f64>();
            units.push(Unit {
                name: format!("coal_{k}"),
                marginal_cost: 3.0,
                capacity: each * (0.8 + 0.4 * rng.gen::<f64>()),
                fuel: Some(FuelLink {
                    fuel: Fuel::Coal,
                    efficiency: eff,
                    emission_factor: 0.34,
                }),
            });
        }
        for k in 0..n_gas {
            let eff = 0.58 - 0.22 * k as f64 / n_gas.max(1) as f64 + 0.01 * rng.gen::<f64>();
            units.push(Unit {
                name: format!("gas_{k}"),
                marginal_cost: 2.0,
                capacity: each * (0.8 + 0.4 * rng.gen::<f64>()),
                fuel: Some(FuelLink {
                    fuel: Fuel::Gas,
                    efficiency: eff,
                    emission_factor: 0.2,
                }),
            });
        }
    }
    let mut fleet = FleetSpec::new(units);
    if cfg.storage {
        fleet.storage = Some(PumpedStorage {
            power: 0.05 * peak_load,
            energy_power_factor: dispatch::DEFAULT_ENERGY_POWER_FACTOR,
            efficiency: 0.75,
        });
    }
    fleet
}

/// Generates a panel with `price`, the six fundamentals and `mcp`, plus the
/// fleet (with the panel's renewable and fuel profiles) that produced the MCP.
pub fn synth_market(cfg: &SynthConfig, seed: u64) -> Result<(HourlyPanel, FleetSpec), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.days * HOURS;
    let weekdays: Vec<usize> = (0..cfg.days)
        .map(|d| (cfg.start + Duration::days(d as i64)).weekday().num_days_from_monday() as usize)
        .collect();

    let mut load = Vec::with_capacity(n);
    let mut wind = Vec::with_capacity(n);
    let mut solar = Vec::with_capacity(n);
    let mut gas = Vec::with_capacity(n);
    let mut coal = Vec::with_capacity(n);
    let mut co2 = Vec::with_capacity(n);

    let (mut g, mut c, mut e) = (cfg.gas_start, cfg.coal_start, cfg.co2_start);
    let mut day_factor = 0.0;
    let mut w: f64 = 0.35;
    for d in 0..cfg.days {
        day_factor = 0.7 * day_factor + cfg.load_day_sd * normal(&mut rng);
        let weekend = if weekdays[d] >= 5 { 1.0 - cfg.load_weekend_drop } else { 1.0 };
        let clouds = 0.3 + 0.7 * rng.gen::<f64>();
        if d > 0 {
            g *= (cfg.fuel_volatility * normal(&mut rng)).exp();
            c *= (cfg.fuel_volatility * normal(&mut rng)).exp();
            e *= (cfg.fuel_volatility * normal(&mut rng)).exp();
        }
        for h in 0..HOURS {
            let x = 2.0 * PI * h as f64 / 24.0;
            let shape = -0.75 * x.cos() - 0.25 * (2.0 * x).cos();
            let l = cfg.base_load
                * (1.0 + cfg.load_daily_amplitude * shape)
                * weekend
                * (1.0 + day_factor)
                * (1.0 + 0.01 * normal(&mut rng));
            load.push(l.max(0.0));

            w = (0.95 * w + 0.05 * 0.35 + 0.06 * normal(&mut rng)).clamp(0.0, 1.0);
            wind.push(cfg.wind_capacity * w);

            let sun = if (6..=18).contains(&h) {
                (PI * (h as f64 - 6.0) / 12.0).sin().max(0.0)
            } else {
                0.0
            };
            solar.push(cfg.solar_capacity * sun * clouds);
            gas.push(g);
            coal.push(c);
            co2.push(e);
        }
    }

    let peak = load.iter().cloned().fold(0.0, f64::max);
    let fleet = generate_fleet(cfg, peak, &mut rng);

    let mut series = BTreeMap::new();
    series.insert(panel::LOAD.to_string(), load);
    series.insert(panel::WIND.to_string(), wind);
    series.insert(panel::SOLAR.to_string(), solar);
    series.insert(panel::GAS.to_string(), gas);
    series.insert(panel::COAL.to_string(), coal);
    series.insert(panel::CO2.to_string(), co2);
    let fundamentals = HourlyPanel::new(cfg.start, cfg.days, series)?;

    let fleet = dispatch::fleet_for_panel(&fleet, &fundamentals)?;
    let mcp = dispatch::rolling_mcp(&fleet, &fundamentals, cfg.window_hours, cfg.keep_hours)?;
    let price: Vec<f64> = (0..n)
        .map(|t| {
            let eps = normal(&mut rng);
            mcp[t] + cfg.seasonal(weekdays[t / HOURS], t % HOURS) + cfg.noise * eps
        })
        .collect();
    let panel = fundamentals
        .with_series(panel::MCP, mcp)?
        .with_series(panel::PRICE, price)?;
    Ok((panel, fleet))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            days: 21,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (a, fa) = synth_market(&small(), 7).unwrap();
        let (b, fb) = synth_market(&small(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        let (c, _) = synth_market(&small(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_price_is_mcp_plus_seasonal() {
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let (p, _) = synth_market(&cfg, 1).unwrap();
        let price = p.series(panel::PRICE).unwrap();
        let mcp = p.series(panel::MCP).unwrap();
        for t in 0..p.n_hours() {
            let s = cfg.seasonal(p.weekday(t / HOURS), t % HOURS);
            assert_eq!(price[t], mcp[t] + s);
        }
    }

    #[test]
    fn ninety_days_give_2160_rows() {
        let cfg = SynthConfig { days: 90, ..SynthConfig::default() };
        let (p, fleet) = synth_market(&cfg, 3).unwrap();
        assert_eq!(p.n_hours(), 2160);
        assert_eq!(fleet.units.len(), 8);
        // prices stay away from the shedding and curtailment bounds
        let mcp = p.series(panel::MCP).unwrap();
        assert!(mcp.iter().all(|&m| m > 0.0 && m < 1000.0));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { days: 0, ..small() },
            SynthConfig { noise: -1.0, ..small() },
            SynthConfig { n_units: 0, ..small() },
        ] {
            assert!(matches!(synth_market(&cfg, 0), Err(SynthError::InvalidConfig(_))));
        }
    }

    #[test]
    fn storage_variant_runs() {
        let cfg = SynthConfig { storage: true, days: 7, ..SynthConfig::default() };
        let (p, fleet) = synth_market(&cfg, 2).unwrap();
        assert!(fleet.storage.is_some());
        assert_eq!(p.n_days(), 7);
    }
}
