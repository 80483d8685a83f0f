//! Hourly market panel: ingestion, calendar helpers and train/validation/test splits.
//!
//! A panel is a block of whole calendar days, each with exactly 24 hourly rows.
//! Days are contiguous and every named series has one value per hour. DST
//! corrections must be resolved before ingestion; the calendar here is naive.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::ops::Range;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HOURS: usize = 24;

pub const PRICE: &str = "price";
pub const LOAD: &str = "load";
pub const WIND: &str = "wind";
pub const SOLAR: &str = "solar";
pub const GAS: &str = "gas";
pub const COAL: &str = "coal";
pub const CO2: &str = "co2";
pub const MCP: &str = "mcp";

/// The six market fundamentals, in CSV column order.
pub const FUNDAMENTALS: [&str; 6] = [LOAD, WIND, SOLAR, GAS, COAL, CO2];

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("missing column `{column}`")]
    MissingColumn { column: String },
    #[error("row {row}: non-contiguous hours ({detail})")]
    NonContiguousHours { row: usize, detail: String },
    #[error("row {row}, column `{column}`: {detail}")]
    UnparseableValue {
        row: usize,
        column: String,
        detail: String,
    },
    #[error("panel has {days} days but at least {required} are needed")]
    TooShortPanel { days: usize, required: usize },
    #[error("unknown series `{0}`")]
    UnknownSeries(String),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("series `{name}` has {len} values, expected {expected}")]
    LengthMismatch {
        name: String,
        len: usize,
        expected: usize,
    },
    #[error("series `{name}` contains a non-finite value at hour {index}")]
    NonFinite { name: String, index: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Maps canonical series names onto CSV header names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub timestamp: String,
    /// canonical name -> header name; all required.
    pub required: BTreeMap<String, String>,
    /// canonical name -> header name; loaded when present.
    pub optional: BTreeMap<String, String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        let required = std::iter::once(PRICE)
            .chain(FUNDAMENTALS)
            .map(|c| (c.to_string(), c.to_string()))
            .collect();
        let optional = [(MCP.to_string(), MCP.to_string())].into_iter().collect();
        ColumnSchema {
            timestamp: "timestamp".into(),
            required,
            optional,
        }
    }
}

/// Aligned hourly series over contiguous whole days.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyPanel {
    start: NaiveDate,
    days: usize,
    series: BTreeMap<String, Vec<f64>>,
}

impl HourlyPanel {
    /// Validates lengths and finiteness; every series must hold `24 * days` values.
    pub fn new(
        start: NaiveDate,
        days: usize,
        series: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, PanelError> {
        for (name, values) in &series {
            check_series(name, values, days * HOURS)?;
        }
        Ok(HourlyPanel {
            start,
            days,
            series,
        })
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn n_days(&self) -> usize {
        self.days
    }

    pub fn n_hours(&self) -> usize {
        self.days * HOURS
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + Duration::days(day as i64)
    }

    /// Signed offset of `date` from the panel start; may lie outside the panel.
    pub fn day_offset(&self, date: NaiveDate) -> i64 {
        (date - self.start).num_days()
    }

    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        let off = self.day_offset(date);
        (off >= 0 && (off as usize) < self.days).then_some(off as usize)
    }

    /// Monday = 0.
    pub fn weekday(&self, day: usize) -> usize {
        self.date(day).weekday().num_days_from_monday() as usize
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    pub fn has(&self, name: &str) -> bool {
        self.series.contains_key(name)
    }

    pub fn series(&self, name: &str) -> Result<&[f64], PanelError> {
        self.series
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| PanelError::UnknownSeries(name.to_string()))
    }

    /// The 24 values of `name` on day index `day`.
    pub fn day_values(&self, name: &str, day: usize) -> Result<&[f64], PanelError> {
        let s = self.series(name)?;
        if day >= self.days {
            return Err(PanelError::InsufficientHistory(format!(
                "day index {day} outside panel of {} days",
                self.days
            )));
        }
        Ok(&s[day * HOURS..(day + 1) * HOURS])
    }

    pub fn prices(&self) -> &[f64] {
        self.series.get(PRICE).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Adds or replaces a series.
    pub fn with_series(mut self, name: &str, values: Vec<f64>) -> Result<Self, PanelError> {
        check_series(name, &values, self.n_hours())?;
        self.series.insert(name.to_string(), values);
        Ok(self)
    }

    /// Sub-panel covering the given day range.
    pub fn slice_days(&self, days: Range<usize>) -> HourlyPanel {
        assert!(days.end <= self.days && days.start <= days.end);
        let hours = days.start * HOURS..days.end * HOURS;
        HourlyPanel {
            start: self.date(days.start),
            days: days.len(),
            series: self
                .series
                .iter()
                .map(|(k, v)| (k.clone(), v[hours.clone()].to_vec()))
                .collect(),
        }
    }

    /// Copy of the panel as seen by a bidder before the gate closure for day `day`:
    /// days after `day` are dropped and the price of `day` itself is masked with NaN.
    /// Fundamentals and the MCP of `day` remain, being day-ahead forecasts.
    pub fn censored_for_bid(&self, day: usize) -> HourlyPanel {
        let mut out = self.slice_days(0..(day + 1).min(self.days));
        if day < self.days {
            if let Some(p) = out.series.get_mut(PRICE) {
                p[day * HOURS..].iter_mut().for_each(|v| *v = f64::NAN);
            }
        }
        out
    }

    /// Column order used when writing: price, the fundamentals, then the rest.
    fn column_order(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = std::iter::once(PRICE)
            .chain(FUNDAMENTALS)
            .filter(|c| self.has(c))
            .collect();
        let rest: Vec<&str> = self.names().filter(|n| !cols.contains(n)).collect();
        cols.extend(rest);
        cols
    }
}

fn check_series(name: &str, values: &[f64], expected: usize) -> Result<(), PanelError> {
    if values.len() != expected {
        return Err(PanelError::LengthMismatch {
            name: name.to_string(),
            len: values.len(),
            expected,
        });
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(PanelError::NonFinite {
            name: name.to_string(),
            index,
        });
    }
    Ok(())
}

pub fn format_timestamp(date: NaiveDate, hour: usize) -> String {
    format!("{}T{:02}", date.format(TIMESTAMP_FORMAT), hour)
}

pub fn parse_timestamp(raw: &str) -> Option<(NaiveDate, usize)> {
    let (date, hour) = raw.trim().split_once('T')?;
    let date = NaiveDate::parse_from_str(date, TIMESTAMP_FORMAT).ok()?;
    if hour.len() != 2 {
        return None;
    }
    let hour: usize = hour.parse().ok()?;
    (hour < HOURS).then_some((date, hour))
}

/// Reads a panel CSV (`timestamp,price,load,...`). Rows may arrive in any order;
/// they are sorted and then checked for duplicates and hourly contiguity.
pub fn load_panel<R: Read>(source: R, schema: &ColumnSchema) -> Result<HourlyPanel, PanelError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |col: &str| headers.iter().position(|h| h == col);

    let ts_col = find(&schema.timestamp).ok_or_else(|| PanelError::MissingColumn {
        column: schema.timestamp.clone(),
    })?;
    let mut columns: Vec<(String, String, usize)> = Vec::new();
    for (canonical, header) in &schema.required {
        let idx = find(header).ok_or_else(|| PanelError::MissingColumn {
            column: header.clone(),
        })?;
        columns.push((canonical.clone(), header.clone(), idx));
    }
    for (canonical, header) in &schema.optional {
        if let Some(idx) = find(header) {
            columns.push((canonical.clone(), header.clone(), idx));
        }
    }

    // (timestamp, csv row number, values)
    let mut rows: Vec<((NaiveDate, usize), usize, Vec<f64>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1
        let row = i + 2;
        let raw_ts = record.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(raw_ts).ok_or_else(|| PanelError::UnparseableValue {
            row,
            column: schema.timestamp.clone(),
            detail: format!("bad timestamp `{raw_ts}`, expected YYYY-MM-DDTHH"),
        })?;
        let mut values = Vec::with_capacity(columns.len());
        for (_, header, idx) in &columns {
            let raw = record.get(*idx).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| PanelError::UnparseableValue {
                row,
                column: header.clone(),
                detail: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(PanelError::UnparseableValue {
                    row,
                    column: header.clone(),
                    detail: format!("`{raw}` is not finite"),
                });
            }
            values.push(v);
        }
        rows.push((ts, row, values));
    }
    if rows.is_empty() {
        return Err(PanelError::TooShortPanel {
            days: 0,
            required: 1,
        });
    }

    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let mut seen = HashSet::new();
    for (ts, row, _) in &rows {
        if !seen.insert(*ts) {
            return Err(PanelError::UnparseableValue {
                row: *row,
                column: schema.timestamp.clone(),
                detail: format!("duplicate timestamp {}", format_timestamp(ts.0, ts.1)),
            });
        }
    }

    let (start, first_hour) = rows[0].0;
    if first_hour != 0 {
        return Err(PanelError::NonContiguousHours {
            row: rows[0].1,
            detail: format!("first row starts at hour {first_hour}, expected 00"),
        });
    }
    for (k, (ts, row, _)) in rows.iter().enumerate() {
        let expected_day = start + Duration::days((k / HOURS) as i64);
        let expected = (expected_day, k % HOURS);
        if *ts != expected {
            return Err(PanelError::NonContiguousHours {
                row: *row,
                detail: format!(
                    "found {}, expected {}",
                    format_timestamp(ts.0, ts.1),
                    format_timestamp(expected.0, expected.1)
                ),
            });
        }
    }
    if rows.len() % HOURS != 0 {
        let last = rows.last().expect("non-empty");
        return Err(PanelError::NonContiguousHours {
            row: last.1,
            detail: format!("last day ends at hour {:02}, expected 23", last.0 .1),
        });
    }

    let days = rows.len() / HOURS;
    let mut series: BTreeMap<String, Vec<f64>> = columns
        .iter()
        .map(|(c, _, _)| (c.clone(), Vec::with_capacity(rows.len())))
        .collect();
    for (_, _, values) in rows {
        for ((canonical, _, _), v) in columns.iter().zip(values) {
            series.get_mut(canonical).expect("column registered").push(v);
        }
    }
    HourlyPanel::new(start, days, series)
}

/// Writes the panel in the same CSV layout `load_panel` reads. Values use the
/// shortest round-trip representation so a reload is bit-exact.
pub fn write_panel<W: Write>(panel: &HourlyPanel, sink: W) -> Result<(), PanelError> {
    let mut writer = csv::Writer::from_writer(sink);
    let cols = panel.column_order();
    let mut header = vec!["timestamp".to_string()];
    header.extend(cols.iter().map(|c| c.to_string()));
    writer.write_record(&header)?;
    let data: Vec<&[f64]> = cols
        .iter()
        .map(|c| panel.series(c).expect("listed column"))
        .collect();
    for t in 0..panel.n_hours() {
        let mut record = vec![format_timestamp(panel.date(t / HOURS), t % HOURS)];
        record.extend(data.iter().map(|s| format!("{}", s[t])));
        writer.write_record(&record)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Half-open range of day indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRange {
    pub start: usize,
    pub end: usize,
}

impl DayRange {
    pub fn new(start: usize, end: usize) -> Self {
        DayRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Validation length used on the full-size market data, in days.
pub const FULL_VALIDATION_DAYS: usize = 42 * 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DayRange,
    pub validation: DayRange,
    pub test: DayRange,
}

impl SplitSpec {
    pub fn new(train: DayRange, validation: DayRange, test: DayRange) -> Result<Self, PanelError> {
        if train.is_empty() || test.is_empty() {
            return Err(PanelError::InvalidSplit(
                "train and test ranges must be non-empty".into(),
            ));
        }
        if train.end > validation.start || validation.end > test.start {
            return Err(PanelError::InvalidSplit(format!(
                "ranges must be ordered and disjoint: train {:?}, validation {:?}, test {:?}",
                train, validation, test
            )));
        }
        Ok(SplitSpec {
            train,
            validation,
            test,
        })
    }

    /// Splits `n_days` so that the last `test_days` are the test period and the
    /// `validation_days` before them are the validation period.
    pub fn from_tail(n_days: usize, validation_days: usize, test_days: usize) -> Result<Self, PanelError> {
        if validation_days + test_days >= n_days {
            return Err(PanelError::InvalidSplit(format!(
                "{validation_days} validation + {test_days} test days leave no training data in {n_days} days"
            )));
        }
        let test_start = n_days - test_days;
        let val_start = test_start - validation_days;
        SplitSpec::new(
            DayRange::new(0, val_start),
            DayRange::new(val_start, test_start),
            DayRange::new(test_start, n_days),
        )
    }

    /// Validation length scaled down from the full-size 42 weeks.
    pub fn scaled_validation_days(factor: f64) -> usize {
        ((FULL_VALIDATION_DAYS as f64) * factor).ceil().max(1.0) as usize
    }
}

/// Same hour one week earlier, for every weekday.
pub fn naive_forecast(panel: &HourlyPanel, day: NaiveDate) -> Result<[f64; HOURS], PanelError> {
    let off = panel.day_offset(day);
    if off < 7 || off - 7 >= panel.n_days() as i64 {
        return Err(PanelError::InsufficientHistory(format!(
            "naive forecast for {day} needs {} in the panel",
            day - Duration::days(7)
        )));
    }
    let src = panel.day_values(PRICE, (off - 7) as usize)?;
    let mut out = [0.0; HOURS];
    out.copy_from_slice(src);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_for(days: usize, skip: Option<(usize, usize)>, dup: Option<(usize, usize)>) -> String {
        let start = NaiveDate::from_ymd_opt(2020, 1, 6).unwrap();
        let mut s = String::from("timestamp,price,load,wind,solar,gas,coal,co2\n");
        for d in 0..days {
            for h in 0..HOURS {
                if skip == Some((d, h)) {
                    continue;
                }
                let line = format!(
                    "{},{},{},1,2,20,10,25\n",
                    format_timestamp(start + Duration::days(d as i64), h),
                    30.0 + h as f64,
                    500.0 + d as f64
                );
                s.push_str(&line);
                if dup == Some((d, h)) {
                    s.push_str(&line);
                }
            }
        }
        s
    }

    #[test]
    fn loads_two_days() {
        let panel = load_panel(csv_for(2, None, None).as_bytes(), &ColumnSchema::default()).unwrap();
        assert_eq!(panel.n_days(), 2);
        assert_eq!(panel.n_hours(), 48);
        assert_eq!(panel.day_values(PRICE, 1).unwrap()[3], 33.0);
        assert!(!panel.has(MCP));
    }

    #[test]
    fn missing_hour_is_rejected() {
        let err = load_panel(csv_for(2, Some((0, 13)), None).as_bytes(), &ColumnSchema::default())
            .unwrap_err();
        assert!(matches!(err, PanelError::NonContiguousHours { .. }), "{err}");
    }

    #[test]
    fn duplicate_row_is_rejected() {
        let err = load_panel(csv_for(2, None, Some((1, 5))).as_bytes(), &ColumnSchema::default())
            .unwrap_err();
        match err {
            PanelError::UnparseableValue { detail, .. } => assert!(detail.contains("duplicate")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "timestamp,price,load\n2020-01-01T00,1,2\n";
        match load_panel(csv.as_bytes(), &ColumnSchema::default()).unwrap_err() {
            PanelError::MissingColumn { column } => assert_eq!(column, "co2"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_value_names_row_and_column() {
        let csv = csv_for(1, None, None).replacen(",1,2,20", ",x,2,20", 1);
        match load_panel(csv.as_bytes(), &ColumnSchema::default()).unwrap_err() {
            PanelError::UnparseableValue { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "wind");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unsorted_rows_are_sorted() {
        let csv = csv_for(2, None, None);
        let mut lines: Vec<&str> = csv.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        let shuffled = format!("{header}\n{}\n", lines.join("\n"));
        let a = load_panel(csv.as_bytes(), &ColumnSchema::default()).unwrap();
        let b = load_panel(shuffled.as_bytes(), &ColumnSchema::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn naive_copies_last_week() {
        let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        let prices: Vec<f64> = (0..8 * HOURS).map(|t| (t % HOURS) as f64).collect();
        let panel =
            HourlyPanel::new(start, 8, [(PRICE.to_string(), prices)].into_iter().collect()).unwrap();
        let f = naive_forecast(&panel, panel.date(7)).unwrap();
        assert_eq!(f.to_vec(), (0..24).map(f64::from).collect::<Vec<_>>());
        // next, not yet observed, day also works: only d-7 is required
        assert!(naive_forecast(&panel, panel.date(8)).is_ok());
        assert!(matches!(
            naive_forecast(&panel, panel.date(0)),
            Err(PanelError::InsufficientHistory(_))
        ));
    }

    #[test]
    fn constant_history_gives_constant_naive() {
        let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        let panel = HourlyPanel::new(
            start,
            10,
            [(PRICE.to_string(), vec![30.0; 240])].into_iter().collect(),
        )
        .unwrap();
        assert_eq!(naive_forecast(&panel, panel.date(9)).unwrap(), [30.0; 24]);
    }

    #[test]
    fn split_from_tail() {
        let s = SplitSpec::from_tail(100, 20, 10).unwrap();
        assert_eq!(s.train, DayRange::new(0, 70));
        assert_eq!(s.validation, DayRange::new(70, 90));
        assert_eq!(s.test, DayRange::new(90, 100));
        assert!(SplitSpec::from_tail(30, 20, 10).is_err());
        assert!(SplitSpec::new(DayRange::new(0, 10), DayRange::new(5, 12), DayRange::new(12, 14)).is_err());
        assert_eq!(SplitSpec::scaled_validation_days(1.0), 294);
        assert_eq!(SplitSpec::scaled_validation_days(0.25), 74);
    }

    #[test]
    fn censoring_masks_the_target_day() {
        let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        let panel = HourlyPanel::new(
            start,
            5,
            [
                (PRICE.to_string(), vec![1.0; 120]),
                (LOAD.to_string(), vec![2.0; 120]),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap();
        let c = panel.censored_for_bid(3);
        assert_eq!(c.n_days(), 4);
        assert!(c.day_values(PRICE, 3).unwrap().iter().all(|v| v.is_nan()));
        assert!(c.day_values(PRICE, 2).unwrap().iter().all(|v| *v == 1.0));
        assert!(c.day_values(LOAD, 3).unwrap().iter().all(|v| *v == 2.0));
    }
}
