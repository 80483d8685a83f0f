//! CART regression trees, bagged random forests, impurity importances and
//! recursive feature elimination driven by them.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{DayAheadForecast, EvalError};
use crate::panel::{HourlyPanel, PanelError, HOURS, PRICE};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("no training rows")]
    EmptyData,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features tried at each split; `None` tries all.
    pub max_features: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_leaf: 1,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
        samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Drop in the sum of squared deviations achieved by this split.
        gain: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
    pub params: TreeParams,
}

impl RegressionTree {
    /// Rows with `x[feature] <= threshold` go left.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    fn add_gains(&self, acc: &mut [f64]) {
        for n in &self.nodes {
            if let Node::Split { feature, gain, .. } = n {
                acc[*feature] += gain;
            }
        }
    }
}

struct Builder<'x, 'a, 'r, R> {
    x: ArrayView2<'x, f64>,
    y: &'a [f64],
    params: TreeParams,
    rng: Option<&'r mut R>,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl<R: Rng> Builder<'_, '_, '_, R> {
    fn features(&mut self) -> Vec<usize> {
        let p = self.x.ncols();
        match (self.params.max_features, self.rng.as_deref_mut()) {
            (Some(k), Some(rng)) if k < p => {
                let mut f = sample(rng, p, k).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        }
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<BestSplit> {
        let n = rows.len();
        let min_leaf = self.params.min_samples_leaf.max(1);
        if n < 2 * min_leaf {
            return None;
        }
        let total: f64 = rows.iter().map(|&i| self.y[i]).sum();
        let mut best: Option<BestSplit> = None;
        let mut order = rows.to_vec();
        for f in self.features() {
            let col = self.x.column(f);
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.y[order[k]];
                let nl = k + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (lo, hi) = (col[order[k]], col[order[k + 1]]);
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64
                    - total * total / n as f64;
                if best.as_ref().map_or(true, |b| gain > b.gain) {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: lo + (hi - lo) / 2.0,
                        gain,
                    });
                }
            }
        }
        let scale: f64 = rows.iter().map(|&i| self.y[i].powi(2)).sum();
        best.filter(|b| b.gain > 1e-12 * scale.max(f64::MIN_POSITIVE))
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let mean = rows.iter().map(|&i| self.y[i]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf {
            value: mean,
            samples: rows.len(),
        });
        if self.params.max_depth.map_or(false, |d| depth >= d) {
            return id;
        }
        let Some(split) = self.best_split(&rows) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.x[[i, split.feature]] <= split.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            gain: split.gain,
        };
        id
    }
}

fn check_xy(x: ArrayView2<f64>, y: &[f64]) -> Result<(), ForestError> {
    if x.nrows() == 0 || y.is_empty() {
        return Err(ForestError::EmptyData);
    }
    if x.nrows() != y.len() {
        return Err(ForestError::DimensionMismatch(format!("{} rows, {} targets", x.nrows(), y.len())));
    }
    Ok(())
}

fn build<R: Rng>(x: ArrayView2<f64>, y: &[f64], rows: Vec<usize>, params: TreeParams, rng: Option<&mut R>) -> RegressionTree {
    let mut b = Builder {
        x,
        y,
        params,
        rng,
        nodes: Vec::new(),
    };
    b.grow(rows, 0);
    RegressionTree {
        nodes: b.nodes,
        n_features: x.ncols(),
        params,
    }
}

/// Greedy variance-reduction tree over all rows and all features.
pub fn fit_tree(x: ArrayView2<f64>, y: &[f64], params: &TreeParams) -> Result<RegressionTree, ForestError> {
    check_xy(x, y)?;
    let all = TreeParams {
        max_features: None,
        ..*params
    };
    Ok(build::<ChaCha8Rng>(x, y, (0..y.len()).collect(), all, None))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub trees: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means ceil(p / 3).
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 100,
            bootstrap: true,
            max_features: None,
            max_depth: None,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<RegressionTree>,
    pub seed: u64,
    pub max_features: usize,
    /// Out-of-bag mean squared error; `None` without bootstrap or when no row
    /// was ever left out.
    pub oob_mse: Option<f64>,
}

impl Forest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn n_features(&self) -> usize {
        self.trees[0].n_features
    }
}

/// Tree `b` draws from its own stream of the seeded generator.
pub fn fit_forest(x: ArrayView2<f64>, y: &[f64], params: &ForestParams, seed: u64) -> Result<Forest, ForestError> {
    check_xy(x, y)?;
    if params.trees == 0 {
        return Err(ForestError::InvalidParams("need at least one tree".into()));
    }
    let (n, p) = x.dim();
    let k = params.max_features.unwrap_or(p.div_ceil(3)).clamp(1, p.max(1));
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_samples_leaf: params.min_samples_leaf,
        max_features: Some(k),
    };
    let mut trees = Vec::with_capacity(params.trees);
    let mut oob_sum = vec![0.0; n];
    let mut oob_count = vec![0usize; n];
    for b in 0..params.trees {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let rows: Vec<usize> = if params.bootstrap {
            (0..n).map(|_| rng.gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let tree = build(x, y, rows.clone(), tree_params, Some(&mut rng));
        if params.bootstrap {
            let mut in_bag = vec![false; n];
            rows.iter().for_each(|&i| in_bag[i] = true);
            for i in (0..n).filter(|&i| !in_bag[i]) {
                oob_sum[i] += tree.predict(&x.row(i).to_vec());
                oob_count[i] += 1;
            }
        }
        trees.push(tree);
    }
    let covered: Vec<usize> = (0..n).filter(|&i| oob_count[i] > 0).collect();
    let oob_mse = (!covered.is_empty()).then(|| {
        covered
            .iter()
            .map(|&i| (oob_sum[i] / oob_count[i] as f64 - y[i]).powi(2))
            .sum::<f64>()
            / covered.len() as f64
    });
    Ok(Forest {
        trees,
        seed,
        max_features: k,
        oob_mse,
    })
}

/// `(feature index, importance)` sorted by importance, descending, ties by
/// index. Importances sum to 1 unless no tree split at all.
pub fn feature_importance(forest: &Forest) -> Vec<(usize, f64)> {
    let mut acc = vec![0.0; forest.n_features()];
    for t in &forest.trees {
        t.add_gains(&mut acc);
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        acc.iter_mut().for_each(|v| *v /= total);
    }
    let mut ranked: Vec<(usize, f64)> = acc.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeStep {
    pub step: usize,
    pub dropped: String,
    /// Features the forest was trained on before the drop.
    pub n_features: usize,
    /// Hold-out MAE of that forest.
    pub validation_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeTrace {
    pub steps: Vec<RfeStep>,
    /// Most important first: the survivor, then the reverse elimination order.
    pub ranking: Vec<String>,
}

impl RfeTrace {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["step", "dropped", "n_features", "validation_mae"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.dropped.clone(),
                s.n_features.to_string(),
                format!("{:.6}", s.validation_mae),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fraction of rows, taken from the end, used to score each elimination step.
pub const RFE_HOLDOUT: f64 = 0.2;

/// Trains on the leading rows, scores on the trailing 20%, drops the least
/// important feature (the later one on ties) and repeats down to one feature.
pub fn rfe_rf(
    x: ArrayView2<f64>,
    y: &[f64],
    names: &[String],
    params: &ForestParams,
    seed: u64,
) -> Result<RfeTrace, ForestError> {
    check_xy(x, y)?;
    if names.len() != x.ncols() {
        return Err(ForestError::DimensionMismatch(format!("{} names, {} columns", names.len(), x.ncols())));
    }
    if names.len() < 2 {
        return Err(ForestError::InvalidParams("elimination needs at least two features".into()));
    }
    let n = y.len();
    let n_hold = ((n as f64 * RFE_HOLDOUT).round() as usize).max(1);
    if n_hold >= n {
        return Err(ForestError::EmptyData);
    }
    let n_train = n - n_hold;
    let mut kept: Vec<usize> = (0..names.len()).collect();
    let mut steps = Vec::new();
    let mut eliminated = Vec::new();
    while kept.len() > 1 {
        let sub = x.select(Axis(1), &kept);
        let forest = fit_forest(sub.slice(s![..n_train, ..]), &y[..n_train], params, seed)?;
        let mae = (n_train..n)
            .map(|i| (forest.predict(&sub.row(i).to_vec()) - y[i]).abs())
            .sum::<f64>()
            / n_hold as f64;
        let ranked = feature_importance(&forest);
        let min = ranked.last().expect("features").1;
        let worst = ranked.iter().filter(|r| r.1 == min).map(|r| r.0).max().expect("non-empty");
        let dropped = kept.remove(worst);
        steps.push(RfeStep {
            step: steps.len() + 1,
            dropped: names[dropped].clone(),
            n_features: kept.len() + 1,
            validation_mae: mae,
        });
        eliminated.push(dropped);
    }
    let ranking = std::iter::once(kept[0])
        .chain(eliminated.into_iter().rev())
        .map(|i| names[i].clone())
        .collect();
    Ok(RfeTrace { steps, ranking })
}

fn rf_row(panel: &HourlyPanel, exo: &[String], day: usize, hour: usize, out: &mut Vec<f64>) -> Result<(), PanelError> {
    if day < 7 {
        return Err(PanelError::InsufficientHistory("needs a week of price history".into()));
    }
    for s in exo {
        out.push(panel.day_values(s, day)?[hour]);
    }
    let p = panel.series(PRICE)?;
    out.push(p[(day - 1) * HOURS + hour]);
    out.push(p[(day - 7) * HOURS + hour]);
    out.push(hour as f64);
    out.push(panel.weekday(day) as f64);
    Ok(())
}

/// One forest over all delivery hours: exogenous values at the hour, the
/// same-hour prices of d-1 and d-7, the hour and the weekday.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfModel {
    pub exo: Vec<String>,
    pub window_days: usize,
    pub first_day: usize,
    pub forest: Forest,
}

pub fn fit_rf_model(
    panel: &HourlyPanel,
    day: usize,
    window_days: usize,
    exo: &[&str],
    params: &ForestParams,
    seed: u64,
) -> Result<RfModel, ForestError> {
    if day > panel.n_days() || window_days == 0 || day < window_days + 7 {
        return Err(ForestError::InsufficientHistory(format!(
            "a {window_days}-day window before day index {day} plus a week of lags"
        )));
    }
    let exo: Vec<String> = exo.iter().map(|s| s.to_string()).collect();
    let p = exo.len() + 4;
    let days = day - window_days..day;
    let mut data = Vec::with_capacity(days.len() * HOURS * p);
    let mut y = Vec::with_capacity(days.len() * HOURS);
    let prices = panel.series(PRICE)?;
    for d in days.clone() {
        for h in 0..HOURS {
            rf_row(panel, &exo, d, h, &mut data)?;
            y.push(prices[d * HOURS + h]);
        }
    }
    let x = Array2::from_shape_vec((y.len(), p), data).expect("row width");
    Ok(RfModel {
        exo,
        window_days,
        first_day: days.start,
        forest: fit_forest(x.view(), &y, params, seed)?,
    })
}

impl RfModel {
    pub fn forecast(&self, panel: &HourlyPanel, day: usize, id: &str) -> Result<DayAheadForecast, ForestError> {
        if day >= panel.n_days() {
            return Err(PanelError::InsufficientHistory(format!("day index {day} is not in the panel")).into());
        }
        let mut prices = [0.0; HOURS];
        let mut row = Vec::new();
        for (h, out) in prices.iter_mut().enumerate() {
            row.clear();
            rf_row(panel, &self.exo, day, h, &mut row)?;
            *out = self.forest.predict(&row);
        }
        Ok(DayAheadForecast::new(id, panel.date(day), prices)?)
    }
}
