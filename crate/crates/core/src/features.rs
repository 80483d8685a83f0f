//! Regressor layouts for the day-ahead models.
//!
//! The default layout has, for a target day `d`, the 24 hourly prices of days
//! d-1, d-2, d-3 and d-7, each exogenous series at days d, d-1 and d-7, and one
//! weekday dummy per day of the week (Monday first). With two exogenous series
//! that is 96 + 144 + 7 = 247 columns. Regressors do not depend on the target
//! hour, so one design matrix serves all 24 hourly models.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::panel::{HourlyPanel, PanelError, HOURS, PRICE};

const WEEKDAYS: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagSpec {
    /// Day lags of the price (each >= 1).
    pub price_lags: Vec<usize>,
    /// Day lags of each exogenous series (0 = the target day's forecast).
    pub exo_lags: Vec<usize>,
    pub weekday_dummies: bool,
}

impl Default for LagSpec {
    fn default() -> Self {
        LagSpec {
            price_lags: vec![1, 2, 3, 7],
            exo_lags: vec![0, 1, 7],
            weekday_dummies: true,
        }
    }
}

impl LagSpec {
    pub fn max_lag(&self) -> usize {
        self.price_lags
            .iter()
            .chain(&self.exo_lags)
            .copied()
            .max()
            .unwrap_or(0)
    }
}

/// A group of columns that is switched on or off as a unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Price { lag: usize },
    Exo { series: String, lag: usize },
    Weekday,
}

impl Block {
    pub fn width(&self) -> usize {
        match self {
            Block::Weekday => 7,
            _ => HOURS,
        }
    }

    fn column_names(&self) -> Vec<String> {
        fn day(lag: usize) -> String {
            if lag == 0 {
                "d".into()
            } else {
                format!("d-{lag}")
            }
        }
        match self {
            Block::Price { lag } => (0..HOURS).map(|h| format!("price_{}_h{h:02}", day(*lag))).collect(),
            Block::Exo { series, lag } => (0..HOURS)
                .map(|h| format!("{series}_{}_h{h:02}", day(*lag)))
                .collect(),
            Block::Weekday => WEEKDAYS.iter().map(|w| format!("dow_{w}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub lags: LagSpec,
    pub exo: Vec<String>,
    /// One flag per block, in `blocks()` order. `None` keeps every block.
    pub mask: Option<Vec<bool>>,
}

impl FeatureLayout {
    pub fn new(exo: &[&str], lags: LagSpec) -> Self {
        FeatureLayout {
            lags,
            exo: exo.iter().map(|s| s.to_string()).collect(),
            mask: None,
        }
    }

    /// All blocks before masking: price lags, then exogenous blocks grouped by
    /// lag (x1_d, x2_d, x1_{d-1}, x2_{d-1}, ...), then the weekday dummies.
    pub fn all_blocks(&self) -> Vec<Block> {
        let mut blocks: Vec<Block> = self.lags.price_lags.iter().map(|&lag| Block::Price { lag }).collect();
        for &lag in &self.lags.exo_lags {
            for series in &self.exo {
                blocks.push(Block::Exo {
                    series: series.clone(),
                    lag,
                });
            }
        }
        if self.lags.weekday_dummies {
            blocks.push(Block::Weekday);
        }
        blocks
    }

    /// Number of on/off decisions a feature search has over this layout.
    pub fn n_flags(&self) -> usize {
        self.all_blocks().len()
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.n_flags(), "one flag per block");
        self.mask = Some(mask);
        self
    }

    pub fn blocks(&self) -> Vec<Block> {
        let all = self.all_blocks();
        match &self.mask {
            None => all,
            Some(m) => all.into_iter().zip(m).filter(|(_, &on)| on).map(|(b, _)| b).collect(),
        }
    }

    pub fn n_columns(&self) -> usize {
        self.blocks().iter().map(Block::width).sum()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.blocks().iter().flat_map(Block::column_names).collect()
    }

    /// Days of history needed before the first usable target day. Masked
    /// blocks do not shorten it, so every mask sees the same rows.
    pub fn burn_in(&self) -> usize {
        self.lags.max_lag()
    }

    pub fn validate(&self, panel: &HourlyPanel) -> Result<(), PanelError> {
        for s in &self.exo {
            if !panel.has(s) {
                return Err(PanelError::UnknownSeries(s.clone()));
            }
        }
        if self.lags.price_lags.contains(&0) {
            return Err(PanelError::InsufficientHistory(
                "price lag 0 would read the price being forecast".into(),
            ));
        }
        Ok(())
    }

    /// Regressors for target day index `day`. Reads prices strictly before
    /// `day` and exogenous series up to and including `day`.
    pub fn row_into(&self, panel: &HourlyPanel, day: usize, out: &mut Vec<f64>) -> Result<(), PanelError> {
        if day < self.burn_in() {
            return Err(PanelError::InsufficientHistory(format!(
                "day index {day} is inside the {}-day lag burn-in",
                self.burn_in()
            )));
        }
        for block in self.blocks() {
            match block {
                Block::Price { lag } => out.extend_from_slice(panel.day_values(PRICE, day - lag)?),
                Block::Exo { series, lag } => out.extend_from_slice(panel.day_values(&series, day - lag)?),
                Block::Weekday => {
                    let wd = panel.weekday(day);
                    out.extend((0..7).map(|k| if k == wd { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, panel: &HourlyPanel, day: usize) -> Result<Vec<f64>, PanelError> {
        let mut out = Vec::with_capacity(self.n_columns());
        self.row_into(panel, day, &mut out)?;
        Ok(out)
    }

    /// Design matrix with one row per day in `days`.
    pub fn design(&self, panel: &HourlyPanel, days: std::ops::Range<usize>) -> Result<Array2<f64>, PanelError> {
        self.validate(panel)?;
        let p = self.n_columns();
        let mut data = Vec::with_capacity(days.len() * p);
        for d in days.clone() {
            self.row_into(panel, d, &mut data)?;
        }
        Ok(Array2::from_shape_vec((days.len(), p), data).expect("row width matches layout"))
    }
}

/// Regressors and the price target for one delivery hour.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    /// Panel day index of each row.
    pub days: Vec<usize>,
}

/// Price targets at `hour` for the given day indices.
pub fn hourly_targets(panel: &HourlyPanel, days: std::ops::Range<usize>, hour: usize) -> Vec<f64> {
    let p = panel.prices();
    days.map(|d| p[d * HOURS + hour]).collect()
}

/// Builds the matrix for every day that has a full lag history.
pub fn build_feature_matrix(
    panel: &HourlyPanel,
    exo_names: &[&str],
    lags: &LagSpec,
    hour: usize,
) -> Result<FeatureMatrix, PanelError> {
    assert!(hour < HOURS, "hour must be in 0..24");
    let layout = FeatureLayout::new(exo_names, lags.clone());
    layout.validate(panel)?;
    let first = layout.burn_in();
    if panel.n_days() <= first {
        return Err(PanelError::TooShortPanel {
            days: panel.n_days(),
            required: first + 1,
        });
    }
    let days = first..panel.n_days();
    Ok(FeatureMatrix {
        names: layout.column_names(),
        x: layout.design(panel, days.clone())?,
        y: hourly_targets(panel, days.clone(), hour),
        days: days.collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{LOAD, MCP, WIND};
    use chrono::NaiveDate;
    use std::collections::BTreeMap;

    fn panel(days: usize) -> HourlyPanel {
        let n = days * HOURS;
        let mut s = BTreeMap::new();
        s.insert(PRICE.to_string(), (0..n).map(|t| t as f64).collect());
        s.insert(LOAD.to_string(), (0..n).map(|t| 1000.0 + t as f64).collect());
        s.insert(WIND.to_string(), (0..n).map(|t| 2000.0 + t as f64).collect());
        s.insert(MCP.to_string(), (0..n).map(|t| 3000.0 + t as f64).collect());
        HourlyPanel::new(NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(), days, s).unwrap()
    }

    #[test]
    fn column_counts_follow_the_layout() {
        let p = panel(10);
        let lags = LagSpec::default();
        for (exo, expected) in [
            (vec![], 103),
            (vec![LOAD], 175),
            (vec![LOAD, WIND], 247),
            (vec![LOAD, WIND, MCP], 319),
        ] {
            let m = build_feature_matrix(&p, &exo, &lags, 5).unwrap();
            assert_eq!(m.x.ncols(), expected);
            assert_eq!(m.names.len(), expected);
            assert_eq!(expected, 96 + 72 * exo.len() + 7);
        }
    }

    #[test]
    fn ten_days_give_three_rows() {
        let m = build_feature_matrix(&panel(10), &[LOAD], &LagSpec::default(), 0).unwrap();
        assert_eq!(m.x.nrows(), 3);
        assert_eq!(m.days, vec![7, 8, 9]);
    }

    #[test]
    fn block_contents_line_up() {
        let p = panel(10);
        let m = build_feature_matrix(&p, &[LOAD, WIND], &LagSpec::default(), 13).unwrap();
        let row = m.x.row(0);
        let day = 7usize;
        // p_{d-1, h=0} and p_{d-7, h=23}
        assert_eq!(row[0], ((day - 1) * 24) as f64);
        assert_eq!(row[95], ((day - 7) * 24 + 23) as f64);
        // x1_d, x2_d, x1_{d-1}
        assert_eq!(row[96], 1000.0 + (day * 24) as f64);
        assert_eq!(row[120], 2000.0 + (day * 24) as f64);
        assert_eq!(row[144], 1000.0 + ((day - 1) * 24) as f64);
        assert_eq!(m.y[0], (day * 24 + 13) as f64);
        assert_eq!(m.names[96], "load_d_h00");
        assert_eq!(m.names[240], "dow_mon");
    }

    #[test]
    fn exactly_one_weekday_dummy() {
        let m = build_feature_matrix(&panel(20), &[], &LagSpec::default(), 0).unwrap();
        for row in m.x.rows() {
            let dummies = &row.as_slice().unwrap()[96..103];
            assert_eq!(dummies.iter().sum::<f64>(), 1.0);
            assert!(dummies.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        // 2020-01-13 (day 7) is a Monday
        assert_eq!(m.x[[0, 96]], 1.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            build_feature_matrix(&panel(7), &[], &LagSpec::default(), 0),
            Err(PanelError::TooShortPanel { .. })
        ));
        assert!(matches!(
            build_feature_matrix(&panel(10), &["gas"], &LagSpec::default(), 0),
            Err(PanelError::UnknownSeries(_))
        ));
    }

    #[test]
    fn two_exo_series_give_eleven_flags() {
        let l = FeatureLayout::new(&[LOAD, WIND], LagSpec::default());
        assert_eq!(l.n_flags(), 11);
        let masked = l.clone().with_mask(vec![true, false, false, false, true, false, false, false, false, false, true]);
        assert_eq!(masked.n_columns(), 24 + 24 + 7);
    }
}
