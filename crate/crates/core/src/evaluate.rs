//! Forecast accuracy metrics, forecast averaging and the Giacomini-White test.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

use crate::panel::HOURS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("naive forecast has zero MAE; rMAE is undefined")]
    ZeroNaiveMae,
    #[error("GW test needs at least {required} days, got {got}")]
    TooFewDays { got: usize, required: usize },
    #[error("loss differential is constant; the GW statistic is undefined")]
    DegenerateVariance,
    #[error("nothing to combine")]
    Empty,
    #[error("non-finite forecast value")]
    NonFinite,
}

/// 24 hourly price predictions for one delivery day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayAheadForecast {
    pub model: String,
    pub date: NaiveDate,
    pub prices: [f64; HOURS],
}

impl DayAheadForecast {
    pub fn new(model: impl Into<String>, date: NaiveDate, prices: [f64; HOURS]) -> Result<Self, EvalError> {
        if prices.iter().any(|p| !p.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(DayAheadForecast {
            model: model.into(),
            date,
            prices,
        })
    }

    pub fn from_slice(model: impl Into<String>, date: NaiveDate, prices: &[f64]) -> Result<Self, EvalError> {
        let arr: [f64; HOURS] = prices
            .try_into()
            .map_err(|_| EvalError::LengthMismatch(format!("{} values, expected 24", prices.len())))?;
        Self::new(model, date, arr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent, in [0, 200].
    pub smape: f64,
    /// `None` when the naive forecast is perfect.
    pub rmae: Option<f64>,
    pub days: usize,
}

impl MetricsReport {
    pub fn rmae(&self) -> Result<f64, EvalError> {
        self.rmae.ok_or(EvalError::ZeroNaiveMae)
    }
}

fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// MAE, RMSE, sMAPE and rMAE over whole days. An hour where both the price and
/// the forecast are zero adds nothing to the sMAPE sum.
pub fn metrics(pred: &[f64], actual: &[f64], naive: &[f64]) -> Result<MetricsReport, EvalError> {
    if pred.len() != actual.len() || naive.len() != actual.len() {
        return Err(EvalError::LengthMismatch(format!(
            "forecast {}, actual {}, naive {}",
            pred.len(),
            actual.len(),
            naive.len()
        )));
    }
    if actual.is_empty() || actual.len() % HOURS != 0 {
        return Err(EvalError::LengthMismatch(format!(
            "{} values is not a positive whole number of days",
            actual.len()
        )));
    }
    let n = actual.len() as f64;
    let mae_model = mae(pred, actual);
    let rmse = (pred.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum::<f64>() / n).sqrt();
    let smape = 100.0
        * pred
            .iter()
            .zip(actual)
            .map(|(p, a)| {
                let den = p.abs() + a.abs();
                if den == 0.0 {
                    0.0
                } else {
                    2.0 * (a - p).abs() / den
                }
            })
            .sum::<f64>()
        / n;
    let mae_naive = mae(naive, actual);
    Ok(MetricsReport {
        mae: mae_model,
        rmse,
        smape,
        rmae: (mae_naive > 0.0).then(|| mae_model / mae_naive),
        days: actual.len() / HOURS,
    })
}

/// Pointwise arithmetic mean of aligned series.
pub fn ensemble_average<S: AsRef<[f64]>>(members: &[S]) -> Result<Vec<f64>, EvalError> {
    let first = members.first().ok_or(EvalError::Empty)?.as_ref();
    let len = first.len();
    let mut out = vec![0.0; len];
    for m in members {
        let m = m.as_ref();
        if m.len() != len {
            return Err(EvalError::LengthMismatch(format!("member of length {} vs {len}", m.len())));
        }
        for (o, v) in out.iter_mut().zip(m) {
            *o += v;
        }
    }
    let k = members.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

/// Averages member forecasts for the same day into one forecast named `model`.
pub fn ensemble_forecast(model: &str, members: &[DayAheadForecast]) -> Result<DayAheadForecast, EvalError> {
    let first = members.first().ok_or(EvalError::Empty)?;
    if members.iter().any(|m| m.date != first.date) {
        return Err(EvalError::LengthMismatch("members forecast different days".into()));
    }
    let series: Vec<&[f64]> = members.iter().map(|m| m.prices.as_slice()).collect();
    DayAheadForecast::from_slice(model, first.date, &ensemble_average(&series)?)
}

/// Minimum number of days for a GW comparison.
pub const GW_MIN_DAYS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GwResult {
    /// N * mean^2 / long-run variance of the daily loss differential, the
    /// variance rescaled by its small-sample bias under independence.
    pub statistic: f64,
    /// Upper tail of chi-squared(1): two-sided.
    pub p_value: f64,
    /// Mean of sum_h |e_A| - sum_h |e_B|; negative means A is more accurate.
    pub mean_differential: f64,
    /// Signed statistic sqrt(N) * mean / sd, for one-sided tests.
    pub z: f64,
    pub days: usize,
}

impl GwResult {
    /// P-value of the one-sided alternative "A is more accurate than B".
    pub fn p_a_better(&self) -> f64 {
        Normal::new(0.0, 1.0).expect("standard normal").cdf(self.z)
    }
}

/// Daily L1 loss differential between two models' hourly errors.
pub fn loss_differential(errors_a: &[[f64; HOURS]], errors_b: &[[f64; HOURS]]) -> Vec<f64> {
    errors_a
        .iter()
        .zip(errors_b)
        .map(|(a, b)| a.iter().map(|e| e.abs()).sum::<f64>() - b.iter().map(|e| e.abs()).sum::<f64>())
        .collect()
}

/// Bartlett-weighted long-run variance with ceil(N^(1/3)) lags.
pub fn newey_west_variance(x: &[f64]) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let lags = (n as f64).cbrt().ceil() as usize;
    let gamma = |l: usize| dev[l..].iter().zip(&dev).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let mut v = gamma(0);
    for l in 1..=lags.min(n.saturating_sub(1)) {
        v += 2.0 * (1.0 - l as f64 / (lags as f64 + 1.0)) * gamma(l);
    }
    v
}

/// Expected value of `newey_west_variance / var` for serially independent
/// data: demeaning pulls every autocovariance down by about var/n.
fn newey_west_bias(n: usize) -> f64 {
    let lags = (n as f64).cbrt().ceil();
    let weights: f64 = (1..=lags as usize).map(|l| 1.0 - l as f64 / (lags + 1.0)).sum();
    (n as f64 - 1.0 - 2.0 * weights) / n as f64
}

/// Unconditional Giacomini-White test on the daily L1 loss differential.
pub fn gw_test(errors_a: &[[f64; HOURS]], errors_b: &[[f64; HOURS]]) -> Result<GwResult, EvalError> {
    if errors_a.len() != errors_b.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} vs {} days",
            errors_a.len(),
            errors_b.len()
        )));
    }
    let n = errors_a.len();
    if n < GW_MIN_DAYS {
        return Err(EvalError::TooFewDays {
            got: n,
            required: GW_MIN_DAYS,
        });
    }
    let delta = loss_differential(errors_a, errors_b);
    let mean = delta.iter().sum::<f64>() / n as f64;
    let var = newey_west_variance(&delta) / newey_west_bias(n);
    let scale = delta.iter().map(|d| d * d).sum::<f64>() / n as f64;
    if !(var > 1e-20 * scale.max(f64::MIN_POSITIVE)) {
        return Err(EvalError::DegenerateVariance);
    }
    let statistic = n as f64 * mean * mean / var;
    let p_value = 1.0 - ChiSquared::new(1.0).expect("one degree of freedom").cdf(statistic);
    Ok(GwResult {
        statistic,
        p_value,
        mean_differential: mean,
        z: (n as f64).sqrt() * mean / var.sqrt(),
        days: n,
    })
}

/// Pairwise one-sided p-values. `p[row][col]` tests whether the column model
/// is more accurate than the row model; small values favour the column.
/// The diagonal is `None`. A pair with identical losses gets 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwMatrix {
    pub models: Vec<String>,
    pub p_values: Vec<Vec<Option<f64>>>,
}

pub fn gw_matrix(models: &[(String, Vec<[f64; HOURS]>)]) -> Result<GwMatrix, EvalError> {
    if models.len() < 2 {
        return Err(EvalError::LengthMismatch("GW matrix needs at least two models".into()));
    }
    let k = models.len();
    let mut p = vec![vec![None; k]; k];
    for (r, row) in p.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            if r == c {
                continue;
            }
            *cell = Some(match gw_test(&models[c].1, &models[r].1) {
                Ok(res) => res.p_a_better(),
                Err(EvalError::DegenerateVariance) => 1.0,
                Err(e) => return Err(e),
            });
        }
    }
    Ok(GwMatrix {
        models: models.iter().map(|m| m.0.clone()).collect(),
        p_values: p,
    })
}

impl GwMatrix {
    /// Diagonal cells are written as `NA`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["model".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.models.iter().zip(&self.p_values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| match c {
                Some(v) => format!("{v:.6}"),
                None => "NA".to_string(),
            }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = serde_json::json!({
            "alpha": 0.05,
            "orientation": "p_values[row][col] tests whether the column model beats the row model",
            "models": self.models,
            "p_values": self.p_values,
        });
        serde_json::to_string_pretty(&doc).expect("serialisable")
    }
}

/// Writes `model,arm,mae,rmse,smape,rmae,days` rows; an undefined rMAE is `NA`.
pub fn write_metrics_csv<W: Write>(rows: &[(String, String, MetricsReport)], sink: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["model", "arm", "mae", "rmse", "smape", "rmae", "days"])?;
    for (model, arm, m) in rows {
        w.write_record([
            model.clone(),
            arm.clone(),
            format!("{:.6}", m.mae),
            format!("{:.6}", m.rmse),
            format!("{:.6}", m.smape),
            m.rmae.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into()),
            m.days.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(v: f64) -> Vec<f64> {
        vec![v; HOURS]
    }

    #[test]
    fn perfect_forecast() {
        let actual: Vec<f64> = (0..48).map(|t| t as f64 + 1.0).collect();
        let m = metrics(&actual, &actual, &day(0.0).repeat(2)).unwrap();
        assert_eq!((m.mae, m.rmse, m.smape, m.rmae), (0.0, 0.0, 0.0, Some(0.0)));
        assert_eq!(m.days, 2);
    }

    #[test]
    fn hand_computed_example() {
        // the four-hour example, repeated to fill a day
        let actual: Vec<f64> = [1.0, 2.0, 3.0, 4.0].repeat(6);
        let pred: Vec<f64> = [2.0, 2.0, 2.0, 4.0].repeat(6);
        let m = metrics(&pred, &actual, &day(0.0)).unwrap();
        assert!((m.mae - 0.5).abs() < 1e-12);
        assert!((m.rmse - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((m.smape - 80.0 / 3.0).abs() < 1e-12);
        assert!((m.rmae.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn naive_against_itself() {
        let actual: Vec<f64> = (0..24).map(|t| (t as f64).sin() * 10.0).collect();
        let naive: Vec<f64> = actual.iter().map(|v| v + 3.0).collect();
        assert_eq!(metrics(&naive, &actual, &naive).unwrap().rmae, Some(1.0));
        assert!(metrics(&naive, &actual, &actual).unwrap().rmae().is_err());
    }

    #[test]
    fn smape_zero_over_zero() {
        let m = metrics(&day(0.0), &day(0.0), &day(1.0)).unwrap();
        assert_eq!(m.smape, 0.0);
        let m = metrics(&day(0.0), &day(5.0), &day(1.0)).unwrap();
        assert_eq!(m.smape, 200.0);
    }

    #[test]
    fn length_checks() {
        assert!(matches!(metrics(&[1.0; 24], &[1.0; 23], &[1.0; 24]), Err(EvalError::LengthMismatch(_))));
        assert!(matches!(metrics(&[1.0; 12], &[1.0; 12], &[1.0; 12]), Err(EvalError::LengthMismatch(_))));
        assert!(ensemble_average(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert_eq!(ensemble_average::<Vec<f64>>(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn averaging() {
        assert_eq!(ensemble_average(&[vec![10.0], vec![20.0]]).unwrap(), vec![15.0]);
        assert_eq!(ensemble_average(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let members: Vec<DayAheadForecast> = [10.0, 20.0, 30.0, 40.0]
            .iter()
            .map(|&v| DayAheadForecast::new("m", d, [v; 24]).unwrap())
            .collect();
        assert_eq!(ensemble_forecast("ens", &members).unwrap().prices, [25.0; 24]);
    }

    #[test]
    fn gw_identical_errors_are_degenerate() {
        let e: Vec<[f64; 24]> = (0..40).map(|d| [d as f64; 24]).collect();
        assert_eq!(gw_test(&e, &e), Err(EvalError::DegenerateVariance));
        assert!(matches!(gw_test(&e[..10], &e[..10]), Err(EvalError::TooFewDays { .. })));
    }

    #[test]
    fn gw_symmetry() {
        let a: Vec<[f64; 24]> = (0..60).map(|d| [((d * 7) % 5) as f64; 24]).collect();
        let b: Vec<[f64; 24]> = (0..60).map(|d| [((d * 3) % 4) as f64 + 0.5; 24]).collect();
        let ab = gw_test(&a, &b).unwrap();
        let ba = gw_test(&b, &a).unwrap();
        assert!((ab.p_value - ba.p_value).abs() < 1e-15);
        assert_eq!(ab.mean_differential, -ba.mean_differential);
        assert!((ab.p_a_better() + ba.p_a_better() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_layout() {
        let a: Vec<[f64; 24]> = (0..40).map(|d| [((d % 3) as f64) * 0.1; 24]).collect();
        let b: Vec<[f64; 24]> = (0..40).map(|d| [((d % 5) as f64) + 1.0; 24]).collect();
        let m = gw_matrix(&[("a".into(), a.clone()), ("b".into(), b), ("a2".into(), a)]).unwrap();
        assert_eq!(m.p_values[0][0], None);
        // column a beats row b
        assert!(m.p_values[1][0].unwrap() < 0.01);
        assert!(m.p_values[0][1].unwrap() > 0.99);
        assert_eq!(m.p_values[0][2], Some(1.0));
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model,a,b,a2\na,NA,"));
        assert!(m.to_json().contains("\"p_values\""));
    }
}
