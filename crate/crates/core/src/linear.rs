//! LASSO by cyclic coordinate descent and the LARX / LEAR / Ens-LEAR models.
//!
//! The objective is `RSS + lambda * |theta|_1` on z-scored columns and a
//! centred target, so the intercept is implicit and recovered when the
//! coefficients are mapped back to the original scale. With this scaling the
//! smallest penalty that zeroes every coefficient is `2 * max_j |x_j' y|`.
//!
//! Descent runs in covariance mode: Gram columns are computed on first use
//! and cached on the design, so the 24 hourly targets sharing one design, and
//! the successive penalties of a path, reuse them.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{ensemble_forecast, DayAheadForecast, EvalError};
use crate::features::{FeatureLayout, LagSpec};
use crate::panel::{HourlyPanel, PanelError, HOURS, PRICE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LassoError {
    #[error("need at least {required} rows, got {rows}")]
    TooFewRows { rows: usize, required: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in the {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error)]
pub enum LinearError {
    #[error(transparent)]
    Lasso(#[from] LassoError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("missing regressor: {0}")]
    MissingRegressor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoOptions {
    /// Convergence threshold on the largest coefficient change in one sweep
    /// (standardized scale).
    pub tol: f64,
    /// Cap on the number of sweeps.
    pub max_iter: usize,
    /// Z-score columns and centre the target. When false the columns are used
    /// as given and there is no intercept.
    pub standardize: bool,
    /// Measure `tol` in units of the target's standard deviation.
    pub relative_tol: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            tol: 1e-7,
            max_iter: 10_000,
            standardize: true,
            relative_tol: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Coordinate-descent sweeps, counting partial sweeps over the active set.
    pub iterations: usize,
    /// Final penalised objective on the standardized problem.
    pub objective: f64,
    /// False when `max_iter` ran out; the coefficients are then the last iterate.
    pub converged: bool,
    /// Columns with zero variance; their coefficients are fixed at 0.
    pub degenerate_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    /// Coefficients on the original column scale.
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl LassoFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(row.len(), self.coef.len());
        self.intercept + self.coef.iter().zip(row).map(|(c, x)| c * x).sum::<f64>()
    }

    pub fn n_nonzero(&self) -> usize {
        self.coef.iter().filter(|c| **c != 0.0).count()
    }
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Minimiser of `a * t^2 - 2 * b * t + lambda * |t|` for `a > 0`.
pub fn scalar_lasso(a: f64, b: f64, lambda: f64) -> f64 {
    soft_threshold(b, lambda / 2.0) / a
}

/// Target statistics against one design.
#[derive(Debug, Clone)]
pub struct LassoTarget {
    xty: Vec<f64>,
    yy: f64,
    y_mean: f64,
    sd: f64,
}

#[derive(Debug, Clone)]
struct SolveInfo {
    iterations: usize,
    objective: f64,
    converged: bool,
}

/// Standardized design with a lazily filled Gram cache.
#[derive(Debug, Clone)]
pub struct LassoDesign {
    n: usize,
    p: usize,
    cols: Vec<Vec<f64>>,
    means: Vec<f64>,
    scales: Vec<f64>,
    col_sq: Vec<f64>,
    degenerate: Vec<bool>,
    centered: bool,
    gram: Vec<Option<Vec<f64>>>,
}

impl LassoDesign {
    pub fn new(x: ArrayView2<f64>, standardize: bool) -> Result<Self, LassoError> {
        let (n, p) = x.dim();
        if n < 2 {
            return Err(LassoError::TooFewRows { rows: n, required: 2 });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LassoError::NonFinite("design matrix"));
        }
        let mut cols = Vec::with_capacity(p);
        let mut means = vec![0.0; p];
        let mut scales = vec![1.0; p];
        let mut col_sq = vec![0.0; p];
        let mut degenerate = vec![false; p];
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let mut c: Vec<f64> = col.to_vec();
            if standardize {
                let mean = c.iter().sum::<f64>() / n as f64;
                let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                means[j] = mean;
                if sd <= 1e-12 * (1.0 + mean.abs()) {
                    degenerate[j] = true;
                    c.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    scales[j] = sd;
                    c.iter_mut().for_each(|v| *v = (*v - mean) / sd);
                }
            }
            col_sq[j] = c.iter().map(|v| v * v).sum();
            if col_sq[j] == 0.0 {
                degenerate[j] = true;
            }
            cols.push(c);
        }
        Ok(LassoDesign {
            n,
            p,
            cols,
            means,
            scales,
            col_sq,
            degenerate,
            centered: standardize,
            gram: vec![None; p],
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.p
    }

    pub fn target(&self, y: &[f64]) -> Result<LassoTarget, LassoError> {
        if y.len() != self.n {
            return Err(LassoError::DimensionMismatch(format!("{} rows, {} targets", self.n, y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(LassoError::NonFinite("target"));
        }
        let y_mean = if self.centered {
            y.iter().sum::<f64>() / self.n as f64
        } else {
            0.0
        };
        let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        Ok(LassoTarget {
            xty: self.cols.iter().map(|c| dot(c, &yc)).collect(),
            yy: dot(&yc, &yc),
            y_mean,
            sd: (dot(&yc, &yc) / self.n as f64).sqrt(),
        })
    }

    /// Smallest penalty at which every coefficient is exactly zero.
    pub fn lambda_max(&self, t: &LassoTarget) -> f64 {
        t.xty
            .iter()
            .zip(&self.degenerate)
            .filter(|(_, d)| !**d)
            .map(|(v, _)| 2.0 * v.abs())
            .fold(0.0, f64::max)
    }

    fn gram_col(&mut self, j: usize) -> &[f64] {
        if self.gram[j].is_none() {
            let cj = &self.cols[j];
            let g = self.cols.iter().map(|c| dot(cj, c)).collect();
            self.gram[j] = Some(g);
        }
        self.gram[j].as_deref().expect("filled above")
    }

    fn objective(&self, t: &LassoTarget, lambda: f64, beta: &[f64], g: &[f64]) -> f64 {
        // X'(y - X b) = g, so RSS = y'y - b'X'y - b'g
        let mut rss = t.yy;
        let mut l1 = 0.0;
        for j in 0..self.p {
            if beta[j] != 0.0 {
                rss -= beta[j] * (t.xty[j] + g[j]);
                l1 += beta[j].abs();
            }
        }
        rss.max(0.0) + lambda * l1
    }

    /// One pass over `idx`. Gradient entries are kept current only for `track`
    /// (all columns when `None`).
    fn sweep(&mut self, lambda: f64, beta: &mut [f64], g: &mut [f64], idx: &[usize], track: Option<&[usize]>) -> f64 {
        let mut max_delta: f64 = 0.0;
        for &j in idx {
            if self.degenerate[j] {
                continue;
            }
            let cj = self.col_sq[j];
            let old = beta[j];
            let new = scalar_lasso(cj, g[j] + cj * old, lambda);
            if new != old {
                let delta = new - old;
                let gc = self.gram_col(j);
                match track {
                    None => {
                        for (gk, gjk) in g.iter_mut().zip(gc) {
                            *gk -= gjk * delta;
                        }
                    }
                    Some(ks) => {
                        for &k in ks {
                            g[k] -= gc[k] * delta;
                        }
                    }
                }
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        max_delta
    }

    /// `X'(y - X beta)` from scratch.
    fn gradient(&mut self, t: &LassoTarget, beta: &[f64]) -> Vec<f64> {
        let mut g = t.xty.clone();
        for k in 0..self.p {
            if beta[k] != 0.0 {
                let b = beta[k];
                let gc = self.gram_col(k);
                for (gj, gkj) in g.iter_mut().zip(gc) {
                    *gj -= gkj * b;
                }
            }
        }
        g
    }

    /// Coordinate descent from the warm start `beta` (standardized scale).
    /// Full sweeps alternate with sweeps over the current nonzero set until a
    /// full sweep moves no coefficient by `tol` or more.
    fn solve(&mut self, t: &LassoTarget, lambda: f64, beta: &mut [f64], opts: &LassoOptions) -> SolveInfo {
        for k in 0..self.p {
            if self.degenerate[k] {
                beta[k] = 0.0;
            }
        }
        let tol = if opts.relative_tol { opts.tol * t.sd } else { opts.tol };
        let all: Vec<usize> = (0..self.p).collect();
        let mut g = self.gradient(t, beta);
        let mut obj = self.objective(t, lambda, beta, &g);
        let slack = 1e-10 * (t.yy + obj + 1.0);
        let mut iterations = 0;
        let mut converged = false;
        let step = |this: &Self, beta: &[f64], g: &[f64], prev: f64| {
            let next = this.objective(t, lambda, beta, g);
            assert!(next <= prev + slack, "descent objective rose from {prev} to {next}");
            next
        };
        'outer: while iterations < opts.max_iter {
            let d = self.sweep(lambda, beta, &mut g, &all, None);
            obj = step(self, beta, &g, obj);
            iterations += 1;
            if d < tol {
                converged = true;
                break;
            }
            let active: Vec<usize> = (0..self.p).filter(|&j| beta[j] != 0.0).collect();
            loop {
                if iterations >= opts.max_iter {
                    break 'outer;
                }
                let d = self.sweep(lambda, beta, &mut g, &active, Some(&active));
                obj = step(self, beta, &g, obj);
            iterations += 1;
                if d < tol {
                    break;
                }
            }
            g = self.gradient(t, beta);
        }
        SolveInfo {
            iterations,
            objective: obj,
            converged,
        }
    }

    fn original_scale(&self, t: &LassoTarget, beta: &[f64]) -> (Vec<f64>, f64) {
        let coef: Vec<f64> = beta
            .iter()
            .zip(&self.scales)
            .zip(&self.degenerate)
            .map(|((b, s), d)| if *d { 0.0 } else { b / s })
            .collect();
        let intercept = if self.centered {
            t.y_mean - coef.iter().zip(&self.means).map(|(c, m)| c * m).sum::<f64>()
        } else {
            0.0
        };
        (coef, intercept)
    }

    fn to_fit(&self, t: &LassoTarget, lambda: f64, beta: &[f64], info: SolveInfo) -> LassoFit {
        let (coef, intercept) = self.original_scale(t, beta);
        LassoFit {
            coef,
            intercept,
            lambda,
            means: self.means.clone(),
            scales: self.scales.clone(),
            diagnostics: FitDiagnostics {
                iterations: info.iterations,
                objective: info.objective,
                converged: info.converged,
                degenerate_columns: (0..self.p).filter(|&j| self.degenerate[j]).collect(),
            },
        }
    }

    /// Fits the penalties of `path` in order, warm-starting each from the last,
    /// and returns the fit at the final penalty.
    pub fn fit_path(&mut self, t: &LassoTarget, path: &[f64], opts: &LassoOptions) -> Result<LassoFit, LassoError> {
        let last = *path
            .last()
            .ok_or_else(|| LassoError::InvalidArgument("empty penalty path".into()))?;
        let mut beta = vec![0.0; self.p];
        let mut info = None;
        for &lambda in path {
            check_lambda(lambda)?;
            info = Some(self.solve(t, lambda, &mut beta, opts));
        }
        let info = info.expect("path is non-empty");
        if !info.converged {
            log::warn!("lasso did not converge in {} sweeps at lambda {last}", info.iterations);
        }
        Ok(self.to_fit(t, last, &beta, info))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lambda(lambda: f64) -> Result<(), LassoError> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(LassoError::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")))
    }
}

/// Fits one penalty from a cold start.
pub fn lasso_fit(x: ArrayView2<f64>, y: &[f64], lambda: f64, opts: &LassoOptions) -> Result<LassoFit, LassoError> {
    check_lambda(lambda)?;
    let mut design = LassoDesign::new(x, opts.standardize)?;
    let t = design.target(y)?;
    design.fit_path(&t, &[lambda], opts)
}

/// `size` log-spaced penalties from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, size: usize, ratio: f64) -> Vec<f64> {
    match size {
        0 => vec![],
        1 => vec![lambda_max],
        _ => (0..size)
            .map(|i| lambda_max * ratio.powf(i as f64 / (size - 1) as f64))
            .collect(),
    }
}

/// Penalty grid for `y` against `x`, as used by the forecasters.
pub fn default_grid(x: ArrayView2<f64>, y: &[f64], size: usize, ratio: f64) -> Result<Vec<f64>, LassoError> {
    let design = LassoDesign::new(x, true)?;
    let t = design.target(y)?;
    Ok(lambda_grid(design.lambda_max(&t), size, ratio))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub lambda: f64,
    /// Position of `lambda` in the grid.
    pub index: usize,
    /// Mean out-of-fold squared error per grid value.
    pub mse: Vec<f64>,
}

fn fold_bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|f| (f * n / k, (f + 1) * n / k)).collect()
}

/// Indices of `grid` from the largest penalty down, ties keeping grid order.
fn descending_order(grid: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]).then(a.cmp(&b)));
    order
}

/// Chooses a penalty for each target by k-fold cross validation over
/// contiguous row blocks. All targets share the fold designs.
pub fn cross_validate_multi(
    x: ArrayView2<f64>,
    ys: &[&[f64]],
    k: usize,
    grids: &[Vec<f64>],
    opts: &LassoOptions,
) -> Result<Vec<CvOutcome>, LassoError> {
    let n = x.nrows();
    if k < 2 {
        return Err(LassoError::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if ys.len() != grids.len() {
        return Err(LassoError::DimensionMismatch(format!("{} targets, {} grids", ys.len(), grids.len())));
    }
    for (y, grid) in ys.iter().zip(grids) {
        if y.len() != n {
            return Err(LassoError::DimensionMismatch(format!("{n} rows, {} targets", y.len())));
        }
        if grid.is_empty() {
            return Err(LassoError::InvalidArgument("empty penalty grid".into()));
        }
        for &l in grid {
            check_lambda(l)?;
        }
    }
    if n < 2 * k {
        return Err(LassoError::TooFewRows { rows: n, required: 2 * k });
    }
    let mut sse: Vec<Vec<f64>> = grids.iter().map(|g| vec![0.0; g.len()]).collect();
    for (lo, hi) in fold_bounds(n, k) {
        let train: Vec<usize> = (0..lo).chain(hi..n).collect();
        let mut design = LassoDesign::new(x.select(Axis(0), &train).view(), opts.standardize)?;
        for ((y, grid), errs) in ys.iter().zip(grids).zip(sse.iter_mut()) {
            let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let t = design.target(&y_train)?;
            let mut beta = vec![0.0; design.p];
            for gi in descending_order(grid) {
                design.solve(&t, grid[gi], &mut beta, opts);
                let (coef, intercept) = design.original_scale(&t, &beta);
                let nz: Vec<usize> = (0..coef.len()).filter(|&j| coef[j] != 0.0).collect();
                for i in lo..hi {
                    let pred = intercept + nz.iter().map(|&j| coef[j] * x[[i, j]]).sum::<f64>();
                    errs[gi] += (y[i] - pred).powi(2);
                }
            }
        }
    }
    Ok(grids
        .iter()
        .zip(sse)
        .map(|(grid, errs)| {
            let mse: Vec<f64> = errs.iter().map(|e| e / n as f64).collect();
            let mut index = 0;
            for (i, &m) in mse.iter().enumerate() {
                if m < mse[index] {
                    index = i;
                }
            }
            CvOutcome {
                lambda: grid[index],
                index,
                mse,
            }
        })
        .collect())
}

pub fn cross_validate_lambda(
    x: ArrayView2<f64>,
    y: &[f64],
    k: usize,
    grid: &[f64],
    opts: &LassoOptions,
) -> Result<CvOutcome, LassoError> {
    Ok(cross_validate_multi(x, &[y], k, &[grid.to_vec()], opts)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearConfig {
    pub lags: LagSpec,
    pub folds: usize,
    pub grid_size: usize,
    pub grid_ratio: f64,
    pub lasso: LassoOptions,
}

impl Default for LearConfig {
    fn default() -> Self {
        LearConfig {
            lags: LagSpec::default(),
            folds: 5,
            grid_size: 20,
            grid_ratio: 1e-4,
            lasso: LassoOptions {
                tol: 1e-3,
                max_iter: 5_000,
                standardize: true,
                relative_tol: true,
            },
        }
    }
}

/// Calibration windows of the Ens-LEAR members, in days.
pub const DEFAULT_ENS_WINDOWS: [usize; 4] = [39, 52, 78, 104];

/// Cross-validates a penalty for every target, then refits each on all rows.
fn fit_targets(x: ArrayView2<f64>, ys: &[Vec<f64>], cfg: &LearConfig) -> Result<Vec<LassoFit>, LassoError> {
    let mut design = LassoDesign::new(x, cfg.lasso.standardize)?;
    let targets = ys.iter().map(|y| design.target(y)).collect::<Result<Vec<_>, _>>()?;
    let grids: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| lambda_grid(design.lambda_max(t), cfg.grid_size, cfg.grid_ratio))
        .collect();
    let y_refs: Vec<&[f64]> = ys.iter().map(|y| y.as_slice()).collect();
    let cv = cross_validate_multi(x, &y_refs, cfg.folds, &grids, &cfg.lasso)?;
    targets
        .iter()
        .zip(&grids)
        .zip(&cv)
        .map(|((t, grid), c)| {
            let order = descending_order(grid);
            let stop = order.iter().position(|&i| i == c.index).expect("index from grid");
            let path: Vec<f64> = order[..=stop].iter().map(|&i| grid[i]).collect();
            design.fit_path(t, &path, &cfg.lasso)
        })
        .collect()
}

fn training_days(panel: &HourlyPanel, day: usize, window_days: usize, burn_in: usize) -> Result<std::ops::Range<usize>, LinearError> {
    if window_days == 0 {
        return Err(LinearError::InsufficientHistory("calibration window is empty".into()));
    }
    if day > panel.n_days() {
        return Err(LinearError::InsufficientHistory(format!(
            "day index {day} is beyond the panel's {} days",
            panel.n_days()
        )));
    }
    if day < window_days + burn_in {
        return Err(LinearError::InsufficientHistory(format!(
            "a {window_days}-day window before day index {day} needs {burn_in} more days of lags"
        )));
    }
    Ok(day - window_days..day)
}

fn targets_by_hour(panel: &HourlyPanel, days: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    let p = panel.prices();
    (0..HOURS).map(|h| days.clone().map(|d| p[d * HOURS + h]).collect()).collect()
}

fn regressor_error(day: usize, e: PanelError) -> LinearError {
    LinearError::MissingRegressor(format!("day index {day}: {e}"))
}

fn check_row(day: usize, row: &[f64]) -> Result<(), LinearError> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(LinearError::MissingRegressor(format!("day index {day} has a non-finite regressor")));
    }
    Ok(())
}

/// 24 hourly LASSO regressions over one shared regressor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearModel {
    pub layout: FeatureLayout,
    pub window_days: usize,
    /// Day index of the first training day; training covers `window_days` days.
    pub first_day: usize,
    pub fits: Vec<LassoFit>,
}

pub fn fit_lear(
    panel: &HourlyPanel,
    day: usize,
    window_days: usize,
    exo: &[&str],
    cfg: &LearConfig,
) -> Result<LearModel, LinearError> {
    let layout = FeatureLayout::new(exo, cfg.lags.clone());
    layout.validate(panel)?;
    let days = training_days(panel, day, window_days, layout.burn_in())?;
    let x = layout.design(panel, days.clone())?;
    let fits = fit_targets(x.view(), &targets_by_hour(panel, days.clone()), cfg)?;
    Ok(LearModel {
        layout,
        window_days,
        first_day: days.start,
        fits,
    })
}

impl LearModel {
    pub fn predict_day(&self, panel: &HourlyPanel, day: usize) -> Result<[f64; HOURS], LinearError> {
        if day >= panel.n_days() {
            return Err(LinearError::MissingRegressor(format!("day index {day} is not in the panel")));
        }
        let row = self.layout.row(panel, day).map_err(|e| regressor_error(day, e))?;
        check_row(day, &row)?;
        let mut out = [0.0; HOURS];
        for (o, fit) in out.iter_mut().zip(&self.fits) {
            *o = fit.predict(&row);
        }
        Ok(out)
    }

    /// One block per hour: a header line `hour HH lambda L intercept B`, then
    /// one `column coefficient` line per regressor.
    pub fn coefficients_text(&self) -> String {
        let mut out = format!(
            "# lear window_days={} first_day={} exo={}\n",
            self.window_days,
            self.first_day,
            self.layout.exo.join(",")
        );
        write_fits(&mut out, &self.layout.column_names(), &self.fits);
        out
    }
}

fn write_fits(out: &mut String, names: &[String], fits: &[LassoFit]) {
    for (h, fit) in fits.iter().enumerate() {
        writeln!(out, "hour {h:02} lambda {} intercept {}", fit.lambda, fit.intercept).expect("string write");
        for (name, c) in names.iter().zip(&fit.coef) {
            writeln!(out, "{name} {c}").expect("string write");
        }
    }
}

pub fn forecast_lear(model: &LearModel, panel: &HourlyPanel, day: usize, id: &str) -> Result<DayAheadForecast, LinearError> {
    let prices = model.predict_day(panel, day)?;
    Ok(DayAheadForecast::new(id, panel.date(day), prices)?)
}

/// One LEAR per calibration window.
pub fn fit_ens_lear(
    panel: &HourlyPanel,
    day: usize,
    windows: &[usize],
    exo: &[&str],
    cfg: &LearConfig,
) -> Result<Vec<LearModel>, LinearError> {
    if windows.is_empty() {
        return Err(LinearError::InsufficientHistory("no calibration windows".into()));
    }
    let longest = windows.iter().copied().max().expect("non-empty");
    training_days(panel, day, longest, cfg.lags.max_lag())?;
    windows.iter().map(|&w| fit_lear(panel, day, w, exo, cfg)).collect()
}

/// Arithmetic mean of the member forecasts.
pub fn forecast_ens_lear(
    models: &[LearModel],
    panel: &HourlyPanel,
    day: usize,
    id: &str,
) -> Result<DayAheadForecast, LinearError> {
    let members = models
        .iter()
        .map(|m| forecast_lear(m, panel, day, id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ensemble_forecast(id, &members)?)
}

/// Hourly regressions on the exogenous series at the same hour of day d and
/// the 24 prices of day d-1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LarxModel {
    pub exo: Vec<String>,
    pub window_days: usize,
    pub first_day: usize,
    pub fits: Vec<LassoFit>,
}

pub fn larx_column_names(exo: &[String]) -> Vec<String> {
    exo.iter()
        .map(|s| format!("{s}_d"))
        .chain((0..HOURS).map(|h| format!("price_d-1_h{h:02}")))
        .collect()
}

fn larx_row(panel: &HourlyPanel, exo: &[String], day: usize, hour: usize, out: &mut Vec<f64>) -> Result<(), PanelError> {
    if day == 0 {
        return Err(PanelError::InsufficientHistory("LARX needs the previous day's prices".into()));
    }
    for s in exo {
        out.push(panel.day_values(s, day)?[hour]);
    }
    out.extend_from_slice(panel.day_values(PRICE, day - 1)?);
    Ok(())
}

pub fn fit_larx(
    panel: &HourlyPanel,
    day: usize,
    window_days: usize,
    exo: &[&str],
    cfg: &LearConfig,
) -> Result<LarxModel, LinearError> {
    let exo: Vec<String> = exo.iter().map(|s| s.to_string()).collect();
    for s in &exo {
        if !panel.has(s) {
            return Err(PanelError::UnknownSeries(s.clone()).into());
        }
    }
    let days = training_days(panel, day, window_days, 1)?;
    let p = exo.len() + HOURS;
    let ys = targets_by_hour(panel, days.clone());
    let mut fits = Vec::with_capacity(HOURS);
    for (h, y) in ys.iter().enumerate() {
        let mut data = Vec::with_capacity(days.len() * p);
        for d in days.clone() {
            larx_row(panel, &exo, d, h, &mut data)?;
        }
        let x = Array2::from_shape_vec((days.len(), p), data).expect("row width");
        fits.extend(fit_targets(x.view(), std::slice::from_ref(y), cfg)?);
    }
    Ok(LarxModel {
        exo,
        window_days,
        first_day: days.start,
        fits,
    })
}

impl LarxModel {
    pub fn predict_day(&self, panel: &HourlyPanel, day: usize) -> Result<[f64; HOURS], LinearError> {
        if day >= panel.n_days() {
            return Err(LinearError::MissingRegressor(format!("day index {day} is not in the panel")));
        }
        let mut out = [0.0; HOURS];
        let mut row = Vec::with_capacity(self.exo.len() + HOURS);
        for (h, o) in out.iter_mut().enumerate() {
            row.clear();
            larx_row(panel, &self.exo, day, h, &mut row).map_err(|e| regressor_error(day, e))?;
            check_row(day, &row)?;
            *o = self.fits[h].predict(&row);
        }
        Ok(out)
    }

    pub fn coefficients_text(&self) -> String {
        let mut out = format!(
            "# larx window_days={} first_day={} exo={}\n",
            self.window_days,
            self.first_day,
            self.exo.join(",")
        );
        write_fits(&mut out, &larx_column_names(&self.exo), &self.fits);
        out
    }
}

pub fn forecast_larx(model: &LarxModel, panel: &HourlyPanel, day: usize, id: &str) -> Result<DayAheadForecast, LinearError> {
    let prices = model.predict_day(panel, day)?;
    Ok(DayAheadForecast::new(id, panel.date(day), prices)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use crate::panel::{FUNDAMENTALS, MCP};
    use crate::synth::{synth_market, SynthConfig};

    fn opts() -> LassoOptions {
        LassoOptions {
            tol: 1e-10,
            ..Default::default()
        }
    }

    #[test]
    fn ols_through_origin() {
        let x = array![[1.0], [2.0], [3.0]];
        let raw = LassoOptions {
            standardize: false,
            ..opts()
        };
        let fit = lasso_fit(x.view(), &[2.0, 4.0, 6.0], 0.0, &raw).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-12);
        let fit = lasso_fit(x.view(), &[2.0, 4.0, 6.0], 0.0, &opts()).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!(fit.diagnostics.converged);
    }

    #[test]
    fn zero_at_lambda_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((30, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..30).map(|i| x[[i, 2]] * 3.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        let design = LassoDesign::new(x.view(), true).unwrap();
        let lmax = design.lambda_max(&design.target(&y).unwrap());
        let fit = lasso_fit(x.view(), &y, lmax, &opts()).unwrap();
        assert_eq!(fit.n_nonzero(), 0);
        let mean = y.iter().sum::<f64>() / 30.0;
        assert!((fit.intercept - mean).abs() < 1e-12);
        let fit = lasso_fit(x.view(), &y, lmax * 0.99, &opts()).unwrap();
        assert_eq!(fit.n_nonzero(), 1);
        assert!(fit.coef[2] > 0.0);
    }

    #[test]
    fn degenerate_column_is_zeroed() {
        let x = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [4.0, 5.0]];
        let fit = lasso_fit(x.view(), &[1.0, 3.0, 5.0, 7.0], 0.0, &opts()).unwrap();
        assert_eq!(fit.coef[1], 0.0);
        assert!((fit.coef[0] - 2.0).abs() < 1e-10);
        assert!((fit.intercept + 1.0).abs() < 1e-10);
        assert_eq!(fit.diagnostics.degenerate_columns, vec![1]);
    }

    #[test]
    fn not_converged_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<f64> = (0..40).map(|_| rng.sample(StandardNormal)).collect();
        let x = Array2::from_shape_fn((40, 2), |(i, j)| base[i] + 1e-3 * j as f64 * rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = base.iter().map(|b| 2.0 * b).collect();
        let o = LassoOptions {
            max_iter: 2,
            tol: 1e-14,
            ..Default::default()
        };
        let fit = lasso_fit(x.view(), &y, 0.0, &o).unwrap();
        assert!(!fit.diagnostics.converged);
        assert_eq!(fit.diagnostics.iterations, 2);
    }

    #[test]
    fn argument_checks() {
        let x = array![[1.0]];
        assert!(matches!(lasso_fit(x.view(), &[1.0], 0.0, &opts()), Err(LassoError::TooFewRows { .. })));
        let x = array![[1.0], [2.0]];
        assert!(lasso_fit(x.view(), &[1.0, 2.0], -1.0, &opts()).is_err());
        assert!(lasso_fit(x.view(), &[1.0], 0.0, &opts()).is_err());
        assert!(cross_validate_lambda(x.view(), &[1.0, 2.0], 5, &[1.0], &opts()).is_err());
        assert!(cross_validate_lambda(x.view(), &[1.0, 2.0], 2, &[], &opts()).is_err());
    }

    #[test]
    fn cv_grid_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((50, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..50).map(|i| 1.5 * x[[i, 0]] - 2.0 * x[[i, 3]]).collect();
        let grid = default_grid(x.view(), &y, 20, 1e-4).unwrap();
        let cv = cross_validate_lambda(x.view(), &y, 5, &grid, &opts()).unwrap();
        assert_eq!(cv.index, 19);
        let one = cross_validate_lambda(x.view(), &y, 5, &[0.3], &opts()).unwrap();
        assert_eq!(one.lambda, 0.3);
    }

    #[test]
    fn cv_ties_keep_first() {
        // every penalty above lambda_max gives the same error
        let x = array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0]];
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let cv = cross_validate_lambda(x.view(), &y, 2, &[100.0, 200.0, 50.0], &opts()).unwrap();
        assert_eq!(cv.index, 0);
    }

    fn small_market() -> HourlyPanel {
        let cfg = SynthConfig {
            days: 80,
            ..Default::default()
        };
        synth_market(&cfg, 1).unwrap().0
    }

    #[test]
    fn lear_shapes() {
        let panel = small_market();
        let cfg = LearConfig::default();
        let m = fit_lear(&panel, 70, 56, &[FUNDAMENTALS[0], FUNDAMENTALS[1]], &cfg).unwrap();
        assert_eq!(m.fits.len(), 24);
        assert!(m.fits.iter().all(|f| f.coef.len() == 247));
        let m = fit_lear(&panel, 70, 56, &[MCP], &cfg).unwrap();
        assert!(m.fits.iter().all(|f| f.coef.len() == 175));
        let f = forecast_lear(&m, &panel, 70, "lear").unwrap();
        assert_eq!(f.date, panel.date(70));
        let again = fit_lear(&panel, 70, 56, &[MCP], &cfg).unwrap();
        assert_eq!(forecast_lear(&again, &panel, 70, "lear").unwrap(), f);
        assert!(matches!(
            fit_lear(&panel, 60, 56, &[MCP], &cfg),
            Err(LinearError::InsufficientHistory(_))
        ));
        assert!(matches!(forecast_lear(&m, &panel, 80, "lear"), Err(LinearError::MissingRegressor(_))));
        let text = m.coefficients_text();
        assert!(text.contains("\nmcp_d_h05 "));
        assert_eq!(text.lines().count(), 1 + 24 * 176);
    }

    #[test]
    fn lear_uses_no_target_day_price() {
        let panel = small_market();
        let cfg = LearConfig::default();
        let m = fit_lear(&panel, 70, 40, &[MCP], &cfg).unwrap();
        let full = forecast_lear(&m, &panel, 70, "x").unwrap();
        let censored = panel.censored_for_bid(70);
        let m2 = fit_lear(&censored, 70, 40, &[MCP], &cfg).unwrap();
        assert_eq!(forecast_lear(&m2, &censored, 70, "x").unwrap(), full);
    }

    #[test]
    fn mcp_block_dominates_when_price_is_mcp() {
        let cfg = SynthConfig {
            days: 80,
            noise: 0.0,
            daily_amplitude: 0.0,
            weekly_amplitude: 0.0,
            ..Default::default()
        };
        let panel = synth_market(&cfg, 4).unwrap().0;
        let m = fit_lear(&panel, 75, 56, &[MCP], &LearConfig::default()).unwrap();
        let names = m.layout.column_names();
        for (h, fit) in m.fits.iter().enumerate() {
            let own = names.iter().position(|n| *n == format!("mcp_d_h{h:02}")).unwrap();
            let others: f64 = fit
                .coef
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != own)
                .map(|(j, c)| (c * fit.scales[j]).abs())
                .sum();
            assert!((fit.coef[own] - 1.0).abs() < 0.05, "hour {h}: {}", fit.coef[own]);
            assert!(others < 0.05 * fit.coef[own] * fit.scales[own], "hour {h}");
        }
        let f = m.predict_day(&panel, 75).unwrap();
        for (p, a) in f.iter().zip(panel.day_values(PRICE, 75).unwrap()) {
            assert!((p - a).abs() < 0.5);
        }
    }

    #[test]
    fn larx_and_ensemble() {
        let panel = small_market();
        let cfg = LearConfig::default();
        let exo: Vec<&str> = FUNDAMENTALS.iter().copied().chain([MCP]).collect();
        let m = fit_larx(&panel, 70, 40, &exo, &cfg).unwrap();
        assert!(m.fits.iter().all(|f| f.coef.len() == 31));
        assert_eq!(forecast_larx(&m, &panel, 70, "larx").unwrap().prices.len(), 24);
        assert!(m.coefficients_text().contains("\nmcp_d "));

        let same = fit_ens_lear(&panel, 70, &[40, 40, 40, 40], &[MCP], &cfg).unwrap();
        let single = forecast_lear(&same[0], &panel, 70, "e").unwrap();
        let ens = forecast_ens_lear(&same, &panel, 70, "e").unwrap();
        for (a, b) in ens.prices.iter().zip(single.prices) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(fit_ens_lear(&panel, 70, &[40, 70], &[MCP], &cfg).is_err());
    }
}
