//! Day-ahead arbitrage of a storage plant against a price forecast.
//!
//! Each day is planned on its own: the plant starts and ends empty, charging
//! `C_h` and generating `G_h` at rated power `cap`, with the level capped at
//! `cap * ecr` and the cycle loss applied on charging.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::DayAheadForecast;
use crate::lp::{solve_lp, LpError, LpProblem, RowSense, Sense};
use crate::panel::HOURS;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("invalid storage spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite price at hour {0}")]
    NonFinitePrice(usize),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("plan violates {constraint} at hour {hour} by {excess:e}")]
    Infeasible {
        constraint: &'static str,
        hour: usize,
        excess: f64,
    },
    #[error("forecasts and actuals cover different days: {0}")]
    MisalignedDays(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageSpec {
    /// Rated power, MW.
    pub cap: f64,
    /// Full-load hours of a full store.
    pub ecr: f64,
    /// Round-trip efficiency in (0, 1].
    pub eta: f64,
}

impl StorageSpec {
    pub fn new(cap: f64, ecr: f64, eta: f64) -> Result<Self, StorageError> {
        let s = StorageSpec { cap, ecr, eta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), StorageError> {
        if !(self.cap > 0.0 && self.cap.is_finite()) {
            return Err(StorageError::InvalidSpec(format!("cap must be positive, got {}", self.cap)));
        }
        if !(self.ecr > 0.0 && self.ecr.is_finite()) {
            return Err(StorageError::InvalidSpec(format!("ecr must be positive, got {}", self.ecr)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(StorageError::InvalidSpec(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        Ok(())
    }

    pub fn max_level(&self) -> f64 {
        self.cap * self.ecr
    }

    /// The three 1 MW plants: long-duration (ecr 7, 75%), medium (3, 80%) and
    /// short (1, 90%).
    pub fn archetypes() -> Vec<(String, StorageSpec)> {
        [("storage1", 7.0, 0.75), ("storage2", 3.0, 0.80), ("storage3", 1.0, 0.90)]
            .iter()
            .map(|&(n, ecr, eta)| (n.to_string(), StorageSpec { cap: 1.0, ecr, eta }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoragePlan {
    pub charge: [f64; HOURS],
    pub generation: [f64; HOURS],
    /// Level at the end of each hour, MWh.
    pub level: [f64; HOURS],
    /// Profit against the prices the plan was made for.
    pub objective: f64,
}

impl StoragePlan {
    pub fn idle() -> Self {
        StoragePlan {
            charge: [0.0; HOURS],
            generation: [0.0; HOURS],
            level: [0.0; HOURS],
            objective: 0.0,
        }
    }
}

fn check_prices(prices: &[f64; HOURS]) -> Result<(), StorageError> {
    match prices.iter().position(|p| !p.is_finite()) {
        Some(h) => Err(StorageError::NonFinitePrice(h)),
        None => Ok(()),
    }
}

/// Profit-maximising 24-hour plan for the given prices.
pub fn plan_day(prices: &[f64; HOURS], spec: &StorageSpec) -> Result<StoragePlan, StorageError> {
    spec.validate()?;
    check_prices(prices)?;
    let mut lp = LpProblem::new(Sense::Maximize);
    let mut c = [0; HOURS];
    let mut g = [0; HOURS];
    let mut sl = [0; HOURS];
    for h in 0..HOURS {
        c[h] = lp.add_var(format!("c_{h}"), -prices[h], 0.0, spec.cap);
        // the store is empty before hour 1, so nothing can be generated then
        let g_max = if h == 0 { 0.0 } else { spec.cap };
        g[h] = lp.add_var(format!("g_{h}"), prices[h], 0.0, g_max);
        sl[h] = lp.add_var(format!("sl_{h}"), 0.0, 0.0, spec.max_level());
    }
    for h in 0..HOURS {
        lp.add_row(vec![(g[h], 1.0), (c[h], 1.0)], RowSense::Le, spec.cap);
        if h == 0 {
            lp.add_row(vec![(sl[0], 1.0), (c[0], -spec.eta)], RowSense::Eq, 0.0);
        } else {
            lp.add_row(
                vec![(sl[h], 1.0), (sl[h - 1], -1.0), (c[h], -spec.eta), (g[h], 1.0)],
                RowSense::Le,
                0.0,
            );
            lp.add_row(vec![(g[h], 1.0), (sl[h - 1], -1.0)], RowSense::Le, 0.0);
        }
    }
    lp.add_row(vec![(sl[HOURS - 1], 1.0)], RowSense::Eq, 0.0);
    let sol = solve_lp(&lp)?;
    let mut plan = StoragePlan::idle();
    for h in 0..HOURS {
        plan.charge[h] = sol.x[c[h]].max(0.0);
        plan.generation[h] = sol.x[g[h]].max(0.0);
        plan.level[h] = sol.x[sl[h]].max(0.0);
        // charging and generating in the same hour nets out at no change in
        // profit and only loosens the level constraint
        let both = plan.charge[h].min(plan.generation[h]);
        if both > 0.0 {
            plan.charge[h] -= both;
            plan.generation[h] -= both;
        }
    }
    plan.level[HOURS - 1] = 0.0;
    plan.objective = realized_profit(&plan, prices);
    check_plan(&plan, spec)?;
    Ok(plan)
}

/// Independent check of the plan constraints, 1e-9 tolerance scaled by plant size.
pub fn check_plan(plan: &StoragePlan, spec: &StorageSpec) -> Result<(), StorageError> {
    let tol = 1e-9 * spec.max_level().max(spec.cap).max(1.0);
    let fail = |constraint, hour, excess: f64| {
        if excess > tol {
            Err(StorageError::Infeasible { constraint, hour, excess })
        } else {
            Ok(())
        }
    };
    for h in 0..HOURS {
        let (c, g, sl) = (plan.charge[h], plan.generation[h], plan.level[h]);
        fail("non-negativity", h, -c.min(g).min(sl))?;
        fail("power limit", h, g + c - spec.cap)?;
        fail("level limit", h, sl - spec.max_level())?;
        if h == 0 {
            fail("empty start", h, (sl - c * spec.eta).abs())?;
            fail("no generation from an empty store", h, g)?;
        } else {
            let prev = plan.level[h - 1];
            fail("level balance", h, sl - (prev + c * spec.eta - g))?;
            fail("generation above stored energy", h, g - prev)?;
        }
    }
    fail("empty end", HOURS - 1, plan.level[HOURS - 1].abs())
}

/// Revenue from generation minus the cost of charging at `prices`.
pub fn realized_profit(plan: &StoragePlan, prices: &[f64; HOURS]) -> f64 {
    (0..HOURS)
        .map(|h| prices[h] * plan.generation[h] - prices[h] * plan.charge[h])
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageResult {
    pub model: String,
    pub storage: String,
    /// Realised profit over the test days divided by `cap`.
    pub profit_per_mw: f64,
    /// `profit_per_mw` scaled to 365 days.
    pub annual_profit_per_mw: f64,
    /// Model profit over perfect-forecast profit; `None` when the latter is 0.
    pub factor: Option<f64>,
    pub days: usize,
}

/// Plans each day on each model's forecast, settles at the actual prices and
/// compares with planning on the actual prices.
pub fn backtest_storage(
    forecasts: &[(String, Vec<DayAheadForecast>)],
    actuals: &[(NaiveDate, [f64; HOURS])],
    storages: &[(String, StorageSpec)],
) -> Result<Vec<StorageResult>, StorageError> {
    for (model, days) in forecasts {
        if days.len() != actuals.len() {
            return Err(StorageError::MisalignedDays(format!(
                "{model} has {} days, actuals {}",
                days.len(),
                actuals.len()
            )));
        }
        if let Some((f, a)) = days.iter().zip(actuals).find(|(f, a)| f.date != a.0) {
            return Err(StorageError::MisalignedDays(format!("{model} forecasts {} where actual is {}", f.date, a.0)));
        }
    }
    let n = actuals.len();
    let mut out = Vec::new();
    for (name, spec) in storages {
        let mut perfect = 0.0;
        for (_, a) in actuals {
            perfect += plan_day(a, spec)?.objective;
        }
        for (model, days) in forecasts {
            let mut profit = 0.0;
            for (f, (_, a)) in days.iter().zip(actuals) {
                profit += realized_profit(&plan_day(&f.prices, spec)?, a);
            }
            let per_mw = profit / spec.cap;
            out.push(StorageResult {
                model: model.clone(),
                storage: name.clone(),
                profit_per_mw: per_mw,
                annual_profit_per_mw: if n == 0 { 0.0 } else { per_mw * 365.0 / n as f64 },
                factor: (perfect != 0.0).then(|| profit / perfect),
                days: n,
            });
        }
    }
    Ok(out)
}

/// Writes `model,storage,annual_profit_per_mw,factor,days`; an undefined factor is `NA`.
pub fn write_storage_csv<W: Write>(rows: &[StorageResult], sink: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["model", "storage", "annual_profit_per_mw", "factor", "days"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.storage.clone(),
            format!("{:.6}", r.annual_profit_per_mw),
            r.factor.map(|f| format!("{f:.6}")).unwrap_or_else(|| "NA".into()),
            r.days.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
