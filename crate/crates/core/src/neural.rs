//! Feedforward and LSTM price forecasters trained by backpropagation with
//! Adam and early stopping, plus a seeded random hyperparameter search.
//!
//! Both networks map one delivery day to 24 outputs. The training loss is the
//! mean over samples of the summed squared output errors plus `l1` times the
//! absolute sum of the weight matrices (biases are not penalised).

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{DayAheadForecast, EvalError};
use crate::features::{FeatureLayout, LagSpec};
use crate::panel::{HourlyPanel, PanelError, HOURS, PRICE};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty search space: {0}")]
    EmptySpace(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("weight file line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Linear => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" => Ok(Activation::Linear),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocessing {
    Zscore,
    Minmax,
    None,
}

impl Preprocessing {
    pub fn name(self) -> &'static str {
        match self {
            Preprocessing::Zscore => "zscore",
            Preprocessing::Minmax => "minmax",
            Preprocessing::None => "none",
        }
    }
}

impl FromStr for Preprocessing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zscore" => Ok(Preprocessing::Zscore),
            "minmax" => Ok(Preprocessing::Minmax),
            "none" => Ok(Preprocessing::None),
            _ => Err(format!("unknown preprocessing `{s}`")),
        }
    }
}

/// Per-column affine map `(x - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: ArrayView2<f64>, kind: Preprocessing) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut offset = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.axis_iter(Axis(1)) {
            let (o, s) = match kind {
                Preprocessing::None => (0.0, 1.0),
                Preprocessing::Zscore => {
                    let m = col.sum() / n;
                    (m, (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
                }
                Preprocessing::Minmax => {
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi - lo)
                }
            };
            offset.push(o);
            scale.push(if s > 1e-12 { s } else { 1.0 });
        }
        Scaler { offset, scale }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.offset[j]) / self.scale[j];
            }
        }
        out
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| v * self.scale[j] + self.offset[j])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    /// One per hidden layer; the output layer is linear.
    pub activations: Vec<Activation>,
    pub outputs: usize,
    pub l1: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    /// Applied to the inputs by the forecaster; targets are always z-scored.
    pub preprocessing: Preprocessing,
    /// Accepted for configuration compatibility; not implemented.
    pub batch_norm: bool,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(input: usize, hidden: &[usize], activation: Activation, outputs: usize) -> Self {
        NetworkSpec {
            input,
            hidden: hidden.to_vec(),
            activations: vec![activation; hidden.len()],
            outputs,
            l1: 0.0,
            dropout: 0.0,
            learning_rate: 1e-3,
            preprocessing: Preprocessing::Zscore,
            batch_norm: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.input == 0 || self.outputs == 0 || self.hidden.contains(&0) {
            return Err(NeuralError::InvalidSpec("layer sizes must be at least 1".into()));
        }
        if self.activations.len() != self.hidden.len() {
            return Err(NeuralError::InvalidSpec(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                self.hidden.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NeuralError::InvalidSpec(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NeuralError::InvalidSpec(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.l1 >= 0.0 && self.l1.is_finite()) {
            return Err(NeuralError::InvalidSpec(format!("l1 penalty {}", self.l1)));
        }
        Ok(())
    }

    fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.outputs))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

fn l1_sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Samples for the feedforward network: one row per day.
#[derive(Debug, Clone)]
pub struct Samples {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// Penalised loss at the evaluation point.
    pub loss: f64,
    /// Per layer `(dW, db)`.
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradient {
    /// Same order as [`Network::params`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }
}

impl Network {
    /// Glorot-uniform weights from the spec's seed, zero biases.
    pub fn new(spec: NetworkSpec) -> Result<Self, NeuralError> {
        spec.validate()?;
        if spec.batch_norm {
            log::warn!("batch normalisation is not implemented; the flag is ignored");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sizes = spec.sizes();
        let layers = sizes
            .windows(2)
            .map(|s| Layer {
                w: glorot(&mut rng, s[1], s[0]),
                b: Array1::zeros(s[1]),
            })
            .collect();
        Ok(Network { spec, layers })
    }

    pub fn from_layers(spec: NetworkSpec, layers: Vec<Layer>) -> Result<Self, NeuralError> {
        spec.validate()?;
        let sizes = spec.sizes();
        if layers.len() != sizes.len() - 1 {
            return Err(NeuralError::DimensionMismatch(format!(
                "{} layers, spec needs {}",
                layers.len(),
                sizes.len() - 1
            )));
        }
        for (l, (layer, s)) in layers.iter().zip(sizes.windows(2)).enumerate() {
            if layer.w.dim() != (s[1], s[0]) || layer.b.len() != s[1] {
                return Err(NeuralError::DimensionMismatch(format!("layer {l} shape")));
            }
        }
        Ok(Network { spec, layers })
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Layer by layer: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter count");
        let mut it = p.iter();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v = *it.next().expect("length checked"));
        }
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        if x.ncols() != self.spec.input {
            return Err(NeuralError::DimensionMismatch(format!(
                "{} inputs, network takes {}",
                x.ncols(),
                self.spec.input
            )));
        }
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w.t()) + &layer.b;
            a = if l < last {
                let act = self.spec.activations[l];
                z.mapv(|v| act.apply(v))
            } else {
                z
            };
        }
        Ok(a)
    }

    /// Inference pass; dropout is inactive.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("one row");
        Ok(self.forward_batch(row)?.into_raw_vec())
    }

    fn penalty(&self) -> f64 {
        self.spec.l1 * self.layers.iter().map(|l| l.w.iter().map(|w| w.abs()).sum::<f64>()).sum::<f64>()
    }

    /// Mean summed squared error without the penalty.
    pub fn data_loss(&self, s: &Samples) -> Result<f64, NeuralError> {
        check_samples(s.x.nrows(), s.y.view(), self.spec.outputs)?;
        let out = self.forward_batch(s.x.view())?;
        Ok((&out - &s.y).mapv(|v| v * v).sum() / s.x.nrows() as f64)
    }

    pub fn loss(&self, s: &Samples) -> Result<f64, NeuralError> {
        Ok(self.data_loss(s)? + self.penalty())
    }

    fn gradient_impl(&self, x: ArrayView2<f64>, y: ArrayView2<f64>, rng: Option<&mut ChaCha8Rng>) -> Result<Gradient, NeuralError> {
        check_samples(x.nrows(), y, self.spec.outputs)?;
        if x.ncols() != self.spec.input {
            return Err(NeuralError::DimensionMismatch(format!("{} inputs, network takes {}", x.ncols(), self.spec.input)));
        }
        let n = x.nrows() as f64;
        let last = self.layers.len() - 1;
        let rate = self.spec.dropout;
        let mut rng = rng.filter(|_| rate > 0.0);
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut out = Array2::zeros((0, 0));
        for (l, layer) in self.layers.iter().enumerate() {
            let z = inputs[l].dot(&layer.w.t()) + &layer.b;
            if l < last {
                let act = self.spec.activations[l];
                let mut a = z.mapv(|v| act.apply(v));
                let mask = rng.as_deref_mut().map(|r| {
                    Array2::from_shape_fn(a.dim(), |_| if r.gen::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
                });
                if let Some(m) = &mask {
                    a *= m;
                }
                pre.push(z);
                masks.push(mask);
                inputs.push(a);
            } else {
                out = z;
            }
        }
        let diff = &out - &y;
        let loss = diff.mapv(|v| v * v).sum() / n + self.penalty();
        let mut dz = diff * (2.0 / n);
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let mut dw = dz.t().dot(&inputs[l]);
            if self.spec.l1 > 0.0 {
                dw.zip_mut_with(&layer.w, |g, w| *g += self.spec.l1 * l1_sign(*w));
            }
            let db = dz.sum_axis(Axis(0));
            if l > 0 {
                let mut da = dz.dot(&layer.w);
                if let Some(m) = &masks[l - 1] {
                    da *= m;
                }
                let act = self.spec.activations[l - 1];
                da.zip_mut_with(&pre[l - 1], |g, z| *g *= act.derivative(*z));
                dz = da;
            }
            grads.push((dw, db));
        }
        grads.reverse();
        Ok(Gradient { loss, layers: grads })
    }

    /// Text weight file: a header of `key value` lines describing the spec,
    /// `params N`, then the N parameters one per line in [`Network::params`] order.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::from("esmcast-network dnn\n");
        let join = |v: Vec<String>| v.join(" ");
        writeln!(out, "input {}", s.input).unwrap();
        writeln!(out, "hidden {}", join(s.hidden.iter().map(|h| h.to_string()).collect())).unwrap();
        writeln!(out, "activations {}", join(s.activations.iter().map(|a| a.name().to_string()).collect())).unwrap();
        writeln!(out, "outputs {}", s.outputs).unwrap();
        writeln!(out, "l1 {}", s.l1).unwrap();
        writeln!(out, "dropout {}", s.dropout).unwrap();
        writeln!(out, "learning_rate {}", s.learning_rate).unwrap();
        writeln!(out, "preprocessing {}", s.preprocessing.name()).unwrap();
        writeln!(out, "batch_norm {}", s.batch_norm).unwrap();
        writeln!(out, "seed {}", s.seed).unwrap();
        write_params(&mut out, &self.params());
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NeuralError> {
        let h = Header::parse(text, "dnn")?;
        let spec = NetworkSpec {
            input: h.num("input")?,
            hidden: h.list("hidden")?,
            activations: h.list("activations")?,
            outputs: h.num("outputs")?,
            l1: h.num("l1")?,
            dropout: h.num("dropout")?,
            learning_rate: h.num("learning_rate")?,
            preprocessing: h.num("preprocessing")?,
            batch_norm: h.num("batch_norm")?,
            seed: h.num("seed")?,
        };
        let mut net = Network::new(spec)?;
        let p = h.params(net.n_params())?;
        net.set_params(&p);
        Ok(net)
    }
}

fn check_samples(rows: usize, y: ArrayView2<f64>, outputs: usize) -> Result<(), NeuralError> {
    if rows == 0 {
        return Err(NeuralError::EmptyBatch);
    }
    if y.nrows() != rows || y.ncols() != outputs {
        return Err(NeuralError::DimensionMismatch(format!(
            "targets are {}x{}, expected {rows}x{outputs}",
            y.nrows(),
            y.ncols()
        )));
    }
    Ok(())
}

/// Gradient of the penalised loss over `batch`; the L1 subgradient is 0 at zero weights.
pub fn backprop_grad(net: &Network, batch: &Samples) -> Result<Gradient, NeuralError> {
    net.gradient_impl(batch.x.view(), batch.y.view(), None)
}

fn write_params(out: &mut String, p: &[f64]) {
    writeln!(out, "params {}", p.len()).unwrap();
    for v in p {
        writeln!(out, "{v}").unwrap();
    }
}

struct Header<'a> {
    fields: Vec<(usize, &'a str, &'a str)>,
    rest: Vec<(usize, &'a str)>,
}

impl<'a> Header<'a> {
    fn parse(text: &'a str, kind: &str) -> Result<Self, NeuralError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, l)) if l == format!("esmcast-network {kind}") => {}
            _ => {
                return Err(NeuralError::Parse {
                    line: 1,
                    detail: format!("expected `esmcast-network {kind}`"),
                })
            }
        }
        let mut fields = Vec::new();
        let mut rest = Vec::new();
        let mut in_params = false;
        for (i, l) in lines {
            if in_params {
                rest.push((i, l));
                continue;
            }
            let (k, v) = l.split_once(' ').unwrap_or((l, ""));
            fields.push((i, k, v));
            in_params = k == "params";
        }
        Ok(Header { fields, rest })
    }

    fn get(&self, key: &str) -> Result<(usize, &'a str), NeuralError> {
        self.fields
            .iter()
            .find(|f| f.1 == key)
            .map(|f| (f.0, f.2))
            .ok_or(NeuralError::Parse {
                line: 0,
                detail: format!("missing `{key}`"),
            })
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T, NeuralError> {
        let (line, v) = self.get(key)?;
        v.trim().parse().map_err(|_| NeuralError::Parse {
            line,
            detail: format!("bad value for `{key}`: {v}"),
        })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, NeuralError> {
        let (line, v) = self.get(key)?;
        v.split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| NeuralError::Parse {
                    line,
                    detail: format!("bad entry `{t}` in `{key}`"),
                })
            })
            .collect()
    }

    fn params(&self, expected: usize) -> Result<Vec<f64>, NeuralError> {
        let (line, _) = self.get("params")?;
        let n: usize = self.num("params")?;
        if n != expected || self.rest.len() != n {
            return Err(NeuralError::Parse {
                line,
                detail: format!("{n} declared, {} present, spec needs {expected}", self.rest.len()),
            });
        }
        self.rest
            .iter()
            .map(|(i, l)| {
                l.parse().map_err(|_| NeuralError::Parse {
                    line: *i,
                    detail: format!("bad parameter `{l}`"),
                })
            })
            .collect()
    }
}

/// Gate order used throughout: input, candidate, forget, output.
pub const GATE_I: usize = 0;
pub const GATE_C: usize = 1;
pub const GATE_F: usize = 2;
pub const GATE_O: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    /// `hidden x input` per gate.
    pub wx: [Array2<f64>; 4],
    /// `hidden x hidden` per gate.
    pub wh: [Array2<f64>; 4],
    pub b: [Array1<f64>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

struct StepCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    gates: [Array1<f64>; 4],
    tanh_c: Array1<f64>,
}

impl LstmCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCell {
            input,
            hidden,
            wx: std::array::from_fn(|_| Array2::zeros((hidden, input))),
            wh: std::array::from_fn(|_| Array2::zeros((hidden, hidden))),
            b: std::array::from_fn(|_| Array1::zeros(hidden)),
        }
    }

    fn random(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut cell = LstmCell {
            input,
            hidden,
            wx: std::array::from_fn(|_| glorot(rng, hidden, input)),
            wh: std::array::from_fn(|_| glorot(rng, hidden, hidden)),
            b: std::array::from_fn(|_| Array1::zeros(hidden)),
        };
        // start by remembering
        cell.b[GATE_F].fill(1.0);
        cell
    }

    fn step_cached(&self, state: &LstmState, x: Array1<f64>) -> (LstmState, StepCache) {
        let gates: [Array1<f64>; 4] = std::array::from_fn(|g| {
            let z = self.wx[g].dot(&x) + self.wh[g].dot(&state.h) + &self.b[g];
            if g == GATE_C {
                z.mapv(f64::tanh)
            } else {
                z.mapv(sigmoid)
            }
        });
        let c = &gates[GATE_F] * &state.c + &gates[GATE_I] * &gates[GATE_C];
        let tanh_c = c.mapv(f64::tanh);
        let h = &gates[GATE_O] * &tanh_c;
        let cache = StepCache {
            x,
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            gates,
            tanh_c,
        };
        (LstmState { h, c }, cache)
    }
}

/// One LSTM time step.
pub fn lstm_step(cell: &LstmCell, state: &LstmState, x: &[f64]) -> Result<LstmState, NeuralError> {
    if x.len() != cell.input || state.h.len() != cell.hidden || state.c.len() != cell.hidden {
        return Err(NeuralError::DimensionMismatch(format!(
            "input {} / state {} for a {}x{} cell",
            x.len(),
            state.h.len(),
            cell.input,
            cell.hidden
        )));
    }
    Ok(cell.step_cached(state, Array1::from(x.to_vec())).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmSpec {
    /// Features per time step.
    pub input: usize,
    pub hidden: usize,
    pub seq_len: usize,
    /// Non-sequential inputs joined to the last hidden state before the head.
    pub extra: usize,
    pub outputs: usize,
    pub l1: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl LstmSpec {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.input == 0 || self.hidden == 0 || self.seq_len == 0 || self.outputs == 0 {
            return Err(NeuralError::InvalidSpec("LSTM sizes must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.l1 >= 0.0) {
            return Err(NeuralError::InvalidSpec("learning rate must be positive and l1 non-negative".into()));
        }
        Ok(())
    }
}

/// LSTM over a sequence followed by a linear head on `[h_T, extra]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmNet {
    pub spec: LstmSpec,
    pub cell: LstmCell,
    /// `outputs x (hidden + extra)`.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

/// Samples for the LSTM: a `seq_len x input` sequence and extra inputs per day.
#[derive(Debug, Clone)]
pub struct SeqSamples {
    pub seqs: Vec<Array2<f64>>,
    pub extra: Array2<f64>,
    pub y: Array2<f64>,
}

impl LstmNet {
    pub fn new(spec: LstmSpec) -> Result<Self, NeuralError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let cell = LstmCell::random(spec.input, spec.hidden, &mut rng);
        let head_w = glorot(&mut rng, spec.outputs, spec.hidden + spec.extra);
        Ok(LstmNet {
            head_b: Array1::zeros(spec.outputs),
            spec,
            cell,
            head_w,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params().len()
    }

    /// `wx` by gate, `wh` by gate, biases by gate, head weights, head bias.
    pub fn params(&self) -> Vec<f64> {
        let c = &self.cell;
        c.wx.iter()
            .flat_map(|m| m.iter())
            .chain(c.wh.iter().flat_map(|m| m.iter()))
            .chain(c.b.iter().flat_map(|b| b.iter()))
            .chain(self.head_w.iter())
            .chain(self.head_b.iter())
            .copied()
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter count");
        let mut it = p.iter();
        let c = &mut self.cell;
        c.wx.iter_mut()
            .flat_map(|m| m.iter_mut())
            .chain(c.wh.iter_mut().flat_map(|m| m.iter_mut()))
            .chain(c.b.iter_mut().flat_map(|b| b.iter_mut()))
            .chain(self.head_w.iter_mut())
            .chain(self.head_b.iter_mut())
            .for_each(|v| *v = *it.next().expect("length checked"));
    }

    fn check(&self, seq: ArrayView2<f64>, extra: &[f64]) -> Result<(), NeuralError> {
        if seq.ncols() != self.spec.input || seq.nrows() == 0 || extra.len() != self.spec.extra {
            return Err(NeuralError::DimensionMismatch(format!(
                "sequence {}x{} with {} extras for input {} / extra {}",
                seq.nrows(),
                seq.ncols(),
                extra.len(),
                self.spec.input,
                self.spec.extra
            )));
        }
        Ok(())
    }

    fn run(&self, seq: ArrayView2<f64>) -> (LstmState, Vec<StepCache>) {
        let mut state = LstmState::zeros(self.spec.hidden);
        let mut caches = Vec::with_capacity(seq.nrows());
        for row in seq.rows() {
            let (next, cache) = self.cell.step_cached(&state, row.to_owned());
            caches.push(cache);
            state = next;
        }
        (state, caches)
    }

    fn head_input(&self, h: &Array1<f64>, extra: &[f64]) -> Array1<f64> {
        h.iter().chain(extra).copied().collect()
    }

    pub fn predict(&self, seq: ArrayView2<f64>, extra: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check(seq, extra)?;
        let (state, _) = self.run(seq);
        Ok((self.head_w.dot(&self.head_input(&state.h, extra)) + &self.head_b).to_vec())
    }

    fn penalty(&self) -> f64 {
        let c = &self.cell;
        self.spec.l1
            * c.wx
                .iter()
                .chain(&c.wh)
                .chain(std::iter::once(&self.head_w))
                .map(|m| m.iter().map(|v| v.abs()).sum::<f64>())
                .sum::<f64>()
    }

    pub fn data_loss(&self, s: &SeqSamples) -> Result<f64, NeuralError> {
        check_samples(s.seqs.len(), s.y.view(), self.spec.outputs)?;
        let mut total = 0.0;
        for (i, seq) in s.seqs.iter().enumerate() {
            let extra = s.extra.row(i).to_vec();
            let out = self.predict(seq.view(), &extra)?;
            total += out.iter().zip(s.y.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / s.seqs.len() as f64)
    }

    pub fn loss(&self, s: &SeqSamples) -> Result<f64, NeuralError> {
        Ok(self.data_loss(s)? + self.penalty())
    }

    /// Penalised loss and its gradient by backpropagation through time, in
    /// [`LstmNet::params`] order.
    pub fn gradient(&self, s: &SeqSamples, rows: &[usize]) -> Result<(f64, Vec<f64>), NeuralError> {
        if rows.is_empty() {
            return Err(NeuralError::EmptyBatch);
        }
        check_samples(s.seqs.len(), s.y.view(), self.spec.outputs)?;
        let hid = self.spec.hidden;
        let n = rows.len() as f64;
        let mut gwx: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((hid, self.spec.input)));
        let mut gwh: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((hid, hid)));
        let mut gb: [Array1<f64>; 4] = std::array::from_fn(|_| Array1::zeros(hid));
        let mut ghw = Array2::zeros(self.head_w.dim());
        let mut ghb = Array1::zeros(self.spec.outputs);
        let mut loss = 0.0;
        for &r in rows {
            let seq = s.seqs[r].view();
            let extra = s.extra.row(r).to_vec();
            self.check(seq, &extra)?;
            let (state, caches) = self.run(seq);
            let z = self.head_input(&state.h, &extra);
            let out = self.head_w.dot(&z) + &self.head_b;
            let diff = &out - &s.y.row(r);
            loss += diff.mapv(|v| v * v).sum();
            let dout = diff * (2.0 / n);
            for (o, d) in dout.iter().enumerate() {
                for (k, zk) in z.iter().enumerate() {
                    ghw[[o, k]] += d * zk;
                }
            }
            ghb += &dout;
            let dz = self.head_w.t().dot(&dout);
            let mut dh = dz.slice(ndarray::s![..hid]).to_owned();
            let mut dc = Array1::zeros(hid);
            for cache in caches.iter().rev() {
                let [i, cand, f, o] = &cache.gates;
                let d_o = &dh * &cache.tanh_c;
                dc = dc + &dh * o * &cache.tanh_c.mapv(|t| 1.0 - t * t);
                let d_i = &dc * cand;
                let d_cand = &dc * i;
                let d_f = &dc * &cache.c_prev;
                let dz_g: [Array1<f64>; 4] = [
                    d_i * &i.mapv(|v| v * (1.0 - v)),
                    d_cand * &cand.mapv(|v| 1.0 - v * v),
                    d_f * &f.mapv(|v| v * (1.0 - v)),
                    d_o * &o.mapv(|v| v * (1.0 - v)),
                ];
                let mut dh_prev = Array1::zeros(hid);
                for g in 0..4 {
                    for a in 0..hid {
                        let d = dz_g[g][a];
                        if d == 0.0 {
                            continue;
                        }
                        for (k, xk) in cache.x.iter().enumerate() {
                            gwx[g][[a, k]] += d * xk;
                        }
                        for (k, hk) in cache.h_prev.iter().enumerate() {
                            gwh[g][[a, k]] += d * hk;
                        }
                    }
                    gb[g] += &dz_g[g];
                    dh_prev += &self.cell.wh[g].t().dot(&dz_g[g]);
                }
                dc = &dc * f;
                dh = dh_prev;
            }
        }
        let l1 = self.spec.l1;
        if l1 > 0.0 {
            for g in 0..4 {
                gwx[g].zip_mut_with(&self.cell.wx[g], |d, w| *d += l1 * l1_sign(*w));
                gwh[g].zip_mut_with(&self.cell.wh[g], |d, w| *d += l1 * l1_sign(*w));
            }
            ghw.zip_mut_with(&self.head_w, |d, w| *d += l1 * l1_sign(*w));
        }
        let flat = gwx
            .iter()
            .flat_map(|m| m.iter())
            .chain(gwh.iter().flat_map(|m| m.iter()))
            .chain(gb.iter().flat_map(|b| b.iter()))
            .chain(ghw.iter())
            .chain(ghb.iter())
            .copied()
            .collect();
        Ok((loss / n + self.penalty(), flat))
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::from("esmcast-network lstm\n");
        writeln!(out, "input {}", s.input).unwrap();
        writeln!(out, "hidden {}", s.hidden).unwrap();
        writeln!(out, "seq_len {}", s.seq_len).unwrap();
        writeln!(out, "extra {}", s.extra).unwrap();
        writeln!(out, "outputs {}", s.outputs).unwrap();
        writeln!(out, "l1 {}", s.l1).unwrap();
        writeln!(out, "learning_rate {}", s.learning_rate).unwrap();
        writeln!(out, "seed {}", s.seed).unwrap();
        write_params(&mut out, &self.params());
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NeuralError> {
        let h = Header::parse(text, "lstm")?;
        let spec = LstmSpec {
            input: h.num("input")?,
            hidden: h.num("hidden")?,
            seq_len: h.num("seq_len")?,
            extra: h.num("extra")?,
            outputs: h.num("outputs")?,
            l1: h.num("l1")?,
            learning_rate: h.num("learning_rate")?,
            seed: h.num("seed")?,
        };
        let mut net = LstmNet::new(spec)?;
        let p = h.params(net.n_params())?;
        net.set_params(&p);
        Ok(net)
    }
}

/// What [`train`] needs from a model.
pub trait Trainable: Clone {
    type Data;
    fn n_samples(data: &Self::Data) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);
    fn learning_rate(&self) -> f64;
    /// Penalised loss and gradient on `rows`, with training-time noise from `rng`.
    fn batch_gradient(&self, data: &Self::Data, rows: &[usize], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>), NeuralError>;
    fn data_loss(&self, data: &Self::Data) -> Result<f64, NeuralError>;
}

impl Trainable for Network {
    type Data = Samples;
    fn n_samples(data: &Samples) -> usize {
        data.x.nrows()
    }
    fn params(&self) -> Vec<f64> {
        Network::params(self)
    }
    fn set_params(&mut self, p: &[f64]) {
        Network::set_params(self, p)
    }
    fn learning_rate(&self) -> f64 {
        self.spec.learning_rate
    }
    fn batch_gradient(&self, data: &Samples, rows: &[usize], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>), NeuralError> {
        let x = data.x.select(Axis(0), rows);
        let y = data.y.select(Axis(0), rows);
        let g = self.gradient_impl(x.view(), y.view(), Some(rng))?;
        Ok((g.loss, g.flat()))
    }
    fn data_loss(&self, data: &Samples) -> Result<f64, NeuralError> {
        Network::data_loss(self, data)
    }
}

impl Trainable for LstmNet {
    type Data = SeqSamples;
    fn n_samples(data: &SeqSamples) -> usize {
        data.seqs.len()
    }
    fn params(&self) -> Vec<f64> {
        LstmNet::params(self)
    }
    fn set_params(&mut self, p: &[f64]) {
        LstmNet::set_params(self, p)
    }
    fn learning_rate(&self) -> f64 {
        self.spec.learning_rate
    }
    fn batch_gradient(&self, data: &SeqSamples, rows: &[usize], _rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>), NeuralError> {
        self.gradient(data, rows)
    }
    fn data_loss(&self, data: &SeqSamples) -> Result<f64, NeuralError> {
        LstmNet::data_loss(self, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 returns
    /// the initial weights untrained.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 200,
            patience: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Entry 0 is the initial weights, entry k the weights after epoch k.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..p.len() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g[k] * g[k];
            p[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mini-batch Adam with early stopping on the validation data loss. Returns
/// the weights with the lowest validation loss seen, initial weights included.
pub fn train<M: Trainable>(
    model: &M,
    train_data: &M::Data,
    val_data: &M::Data,
    opts: &TrainOptions,
) -> Result<(M, TrainHistory), NeuralError> {
    let n = M::n_samples(train_data);
    if n == 0 || M::n_samples(val_data) == 0 {
        return Err(NeuralError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut current = model.clone();
    let mut params = current.params();
    let mut adam = Adam::new(params.len(), current.learning_rate());
    let mut best = current.clone();
    let mut best_val = current.data_loss(val_data)?;
    let mut history = TrainHistory {
        train_loss: vec![current.data_loss(train_data)?],
        val_loss: vec![best_val],
        best_epoch: 0,
    };
    if !best_val.is_finite() {
        return Err(NeuralError::NonFiniteLoss { epoch: 0 });
    }
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let batch = opts.batch_size.max(1);
    for epoch in 1..=opts.epochs {
        if stale >= opts.patience {
            break;
        }
        order.shuffle(&mut rng);
        for rows in order.chunks(batch) {
            let (loss, grad) = current.batch_gradient(train_data, rows, &mut rng)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(NeuralError::NonFiniteLoss { epoch });
            }
            adam.step(&mut params, &grad);
            current.set_params(&params);
        }
        let tl = current.data_loss(train_data)?;
        let vl = current.data_loss(val_data)?;
        if !tl.is_finite() || !vl.is_finite() {
            return Err(NeuralError::NonFiniteLoss { epoch });
        }
        history.train_loss.push(tl);
        history.val_loss.push(vl);
        if vl < best_val {
            best_val = vl;
            best = current.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    Ok((best, history))
}

/// Ranges the random search samples from. Integer ranges are inclusive.
/// Learning rate and L1 are drawn log-uniformly when the lower end is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub depth: (usize, usize),
    pub neurons: (usize, usize),
    pub activations: Vec<Activation>,
    pub learning_rate: (f64, f64),
    pub dropout: (f64, f64),
    pub l1: (f64, f64),
    pub preprocessing: Vec<Preprocessing>,
    /// Draw the block on/off flags too; otherwise every block is on.
    pub search_features: bool,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            depth: (2, 2),
            neurons: (16, 96),
            activations: vec![Activation::Relu, Activation::Tanh, Activation::Sigmoid],
            learning_rate: (1e-3, 1e-2),
            dropout: (0.0, 0.3),
            l1: (1e-6, 1e-3),
            preprocessing: vec![Preprocessing::Zscore, Preprocessing::Minmax, Preprocessing::None],
            search_features: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub hidden: Vec<usize>,
    pub activations: Vec<Activation>,
    pub learning_rate: f64,
    pub dropout: f64,
    pub l1: f64,
    pub preprocessing: Preprocessing,
    /// One flag per feature block.
    pub mask: Vec<bool>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |what: &str| Err(NeuralError::EmptySpace(what.to_string()));
        if self.activations.is_empty() {
            return bad("no activations");
        }
        if self.preprocessing.is_empty() {
            return bad("no preprocessing choices");
        }
        if self.depth.0 > self.depth.1 || self.depth.1 == 0 {
            return bad("depth range");
        }
        if self.neurons.0 > self.neurons.1 || self.neurons.0 == 0 {
            return bad("neuron range");
        }
        for (name, (lo, hi)) in [("learning rate", self.learning_rate), ("dropout", self.dropout), ("l1", self.l1)] {
            if !(lo <= hi) || lo < 0.0 {
                return bad(name);
            }
        }
        if self.learning_rate.0 <= 0.0 {
            return bad("learning rate must be positive");
        }
        if self.dropout.1 >= 1.0 {
            return bad("dropout must stay below 1");
        }
        Ok(())
    }

    pub fn sample(&self, n_flags: usize, rng: &mut ChaCha8Rng) -> Candidate {
        fn real(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64), log: bool) -> f64 {
            if lo == hi {
                lo
            } else if log && lo > 0.0 {
                (rng.gen_range(lo.ln()..hi.ln())).exp()
            } else {
                rng.gen_range(lo..hi)
            }
        }
        let depth = rng.gen_range(self.depth.0..=self.depth.1);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(self.neurons.0..=self.neurons.1)).collect();
        let activations = (0..depth)
            .map(|_| *self.activations.choose(rng).expect("validated"))
            .collect();
        let learning_rate = real(rng, self.learning_rate, true);
        let dropout = real(rng, self.dropout, false);
        let l1 = real(rng, self.l1, true);
        let preprocessing = *self.preprocessing.choose(rng).expect("validated");
        let mut mask: Vec<bool> = if self.search_features {
            (0..n_flags).map(|_| rng.gen()).collect()
        } else {
            vec![true; n_flags]
        };
        if !mask.is_empty() && !mask.contains(&true) {
            mask[0] = true;
        }
        Candidate {
            hidden,
            activations,
            learning_rate,
            dropout,
            l1,
            preprocessing,
            mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub best_index: usize,
    /// Objective per sample; failures count as infinite.
    pub losses: Vec<f64>,
}

/// Draws `budget` candidates and keeps the one with the lowest objective,
/// the earliest on ties. `objective` receives the sample index and candidate.
pub fn random_search<F>(space: &SearchSpace, n_flags: usize, budget: usize, seed: u64, mut objective: F) -> Result<SearchOutcome, NeuralError>
where
    F: FnMut(usize, &Candidate) -> Result<f64, NeuralError>,
{
    space.validate()?;
    if budget == 0 {
        return Err(NeuralError::EmptySpace("budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<Candidate> = (0..budget).map(|_| space.sample(n_flags, &mut rng)).collect();
    let mut losses = Vec::with_capacity(budget);
    let mut best_index = 0;
    for (i, c) in candidates.iter().enumerate() {
        let loss = match objective(i, c) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                log::debug!("candidate {i} failed: {e}");
                f64::INFINITY
            }
        };
        losses.push(loss);
        if loss < losses[best_index] {
            best_index = i;
        }
    }
    Ok(SearchOutcome {
        best: candidates[best_index].clone(),
        best_index,
        losses,
    })
}

fn derived_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng.gen()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DnnConfig {
    pub lags: LagSpec,
    /// Trailing days of the calibration window held out for early stopping.
    pub validation_days: usize,
    pub budget: usize,
    pub space: SearchSpace,
    pub train: TrainOptions,
}

impl Default for DnnConfig {
    fn default() -> Self {
        DnnConfig {
            lags: LagSpec::default(),
            validation_days: 14,
            budget: 6,
            space: SearchSpace::default(),
            train: TrainOptions {
                epochs: 150,
                patience: 15,
                batch_size: 16,
                seed: 0,
            },
        }
    }
}

/// A trained feedforward forecaster with its scalers and regressor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnModel {
    pub layout: FeatureLayout,
    pub candidate: Candidate,
    pub input_scaler: Scaler,
    pub target_scaler: Scaler,
    pub net: Network,
    pub history: TrainHistory,
}

fn calibration_split(
    panel: &HourlyPanel,
    day: usize,
    window_days: usize,
    validation_days: usize,
    burn_in: usize,
) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>), NeuralError> {
    if day > panel.n_days() || day < window_days + burn_in || validation_days == 0 || validation_days >= window_days {
        return Err(NeuralError::InsufficientHistory(format!(
            "window {window_days} with {validation_days} validation days before day index {day}"
        )));
    }
    let start = day - window_days;
    let cut = day - validation_days;
    Ok((start..cut, cut..day))
}

fn day_targets(panel: &HourlyPanel, days: std::ops::Range<usize>) -> Array2<f64> {
    let p = panel.prices();
    Array2::from_shape_fn((days.len(), HOURS), |(i, h)| p[(days.start + i) * HOURS + h])
}

/// Trains one feedforward network with fixed hyperparameters.
pub fn fit_dnn(
    panel: &HourlyPanel,
    day: usize,
    window_days: usize,
    exo: &[&str],
    candidate: &Candidate,
    cfg: &DnnConfig,
    seed: u64,
) -> Result<DnnModel, NeuralError> {
    let layout = FeatureLayout::new(exo, cfg.lags.clone()).with_mask(candidate.mask.clone());
    layout.validate(panel)?;
    let (train_days, val_days) = calibration_split(panel, day, window_days, cfg.validation_days, layout.burn_in())?;
    let x_train = layout.design(panel, train_days.clone())?;
    let x_val = layout.design(panel, val_days.clone())?;
    let y_train = day_targets(panel, train_days);
    let y_val = day_targets(panel, val_days);
    let input_scaler = Scaler::fit(x_train.view(), candidate.preprocessing);
    let target_scaler = Scaler::fit(y_train.view(), Preprocessing::Zscore);
    let train_s = Samples {
        x: input_scaler.transform(x_train.view()),
        y: target_scaler.transform(y_train.view()),
    };
    let val_s = Samples {
        x: input_scaler.transform(x_val.view()),
        y: target_scaler.transform(y_val.view()),
    };
    let spec = NetworkSpec {
        input: layout.n_columns(),
        hidden: candidate.hidden.clone(),
        activations: candidate.activations.clone(),
        outputs: HOURS,
        l1: candidate.l1,
        dropout: candidate.dropout,
        learning_rate: candidate.learning_rate,
        preprocessing: candidate.preprocessing,
        batch_norm: false,
        seed,
    };
    let net = Network::new(spec)?;
    let opts = TrainOptions {
        seed: derived_seed(seed, 0),
        ..cfg.train
    };
    let (net, history) = train(&net, &train_s, &val_s, &opts)?;
    Ok(DnnModel {
        layout,
        candidate: candidate.clone(),
        input_scaler,
        target_scaler,
        net,
        history,
    })
}

impl DnnModel {
    pub fn best_val_loss(&self) -> f64 {
        self.history.val_loss[self.history.best_epoch]
    }

    pub fn forecast(&self, panel: &HourlyPanel, day: usize, id: &str) -> Result<DayAheadForecast, NeuralError> {
        if day >= panel.n_days() {
            return Err(PanelError::InsufficientHistory(format!("day index {day} is not in the panel")).into());
        }
        let row = self.layout.row(panel, day)?;
        let x = Array2::from_shape_vec((1, row.len()), row).expect("one row");
        let out = self.net.forward_batch(self.input_scaler.transform(x.view()).view())?;
        let prices = self.target_scaler.inverse_row(out.as_slice().expect("contiguous"));
        Ok(DayAheadForecast::from_slice(id, panel.date(day), &prices)?)
    }
}

/// Hyperparameter search for one seed followed by a final fit of the winner.
pub fn search_dnn(
    panel: &HourlyPanel,
    day: usize,
    window_days: usize,
    exo: &[&str],
    cfg: &DnnConfig,
    seed: u64,
) -> Result<DnnModel, NeuralError> {
    let n_flags = FeatureLayout::new(exo, cfg.lags.clone()).n_flags();
    let outcome = random_search(&cfg.space, n_flags, cfg.budget, seed, |i, c| {
        Ok(fit_dnn(panel, day, window_days, exo, c, cfg, derived_seed(seed, i as u64 + 1))?.best_val_loss())
    })?;
    fit_dnn(
        panel,
        day,
        window_days,
        exo,
        &outcome.best,
        cfg,
        derived_seed(seed, outcome.best_index as u64 + 1),
    )
}

/// One searched and trained network per seed.
pub fn fit_ens_dnn(
    panel: &HourlyPanel,
    day: usize,
    window_days: usize,
    exo: &[&str],
    cfg: &DnnConfig,
    seeds: &[u64],
) -> Result<Vec<DnnModel>, NeuralError> {
    if seeds.is_empty() {
        return Err(NeuralError::EmptySpace("no ensemble seeds".into()));
    }
    seeds.iter().map(|&s| search_dnn(panel, day, window_days, exo, cfg, s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub hidden: usize,
    /// Hours of price history fed to the cell.
    pub seq_len: usize,
    pub learning_rate: f64,
    pub l1: f64,
    pub validation_days: usize,
    pub train: TrainOptions,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            hidden: 12,
            seq_len: 168,
            learning_rate: 5e-3,
            l1: 0.0,
            validation_days: 14,
            train: TrainOptions {
                epochs: 60,
                patience: 8,
                batch_size: 16,
                seed: 0,
            },
        }
    }
}

/// LSTM over the hourly price history with day-d exogenous values in the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub exo: Vec<String>,
    pub price_scaler: Scaler,
    pub exo_scaler: Scaler,
    pub target_scaler: Scaler,
    pub net: LstmNet,
    pub history: TrainHistory,
}

fn lstm_inputs(
    panel: &HourlyPanel,
    exo: &[String],
    days: std::ops::Range<usize>,
    seq_len: usize,
) -> Result<(Vec<Array2<f64>>, Array2<f64>), NeuralError> {
    let prices = panel.series(PRICE)?;
    let mut seqs = Vec::with_capacity(days.len());
    let mut extra = Vec::with_capacity(days.len() * exo.len() * HOURS);
    for d in days.clone() {
        let end = d * HOURS;
        if end < seq_len {
            return Err(NeuralError::InsufficientHistory(format!("{seq_len} hours before day index {d}")));
        }
        seqs.push(Array2::from_shape_vec((seq_len, 1), prices[end - seq_len..end].to_vec()).expect("column"));
        for s in exo {
            extra.extend_from_slice(panel.day_values(s, d)?);
        }
    }
    let extra = Array2::from_shape_vec((days.len(), exo.len() * HOURS), extra).expect("row width");
    Ok((seqs, extra))
}

fn scale_seqs(seqs: Vec<Array2<f64>>, s: &Scaler) -> Vec<Array2<f64>> {
    seqs.into_iter().map(|q| q.mapv(|v| (v - s.offset[0]) / s.scale[0])).collect()
}

pub fn fit_lstm(
    panel: &HourlyPanel,
    day: usize,
    window_days: usize,
    exo: &[&str],
    cfg: &LstmConfig,
    seed: u64,
) -> Result<LstmModel, NeuralError> {
    let exo: Vec<String> = exo.iter().map(|s| s.to_string()).collect();
    let burn = cfg.seq_len.div_ceil(HOURS);
    let (train_days, val_days) = calibration_split(panel, day, window_days, cfg.validation_days, burn)?;
    let (seq_t, ex_t) = lstm_inputs(panel, &exo, train_days.clone(), cfg.seq_len)?;
    let (seq_v, ex_v) = lstm_inputs(panel, &exo, val_days.clone(), cfg.seq_len)?;
    let y_t = day_targets(panel, train_days.clone());
    let y_v = day_targets(panel, val_days);
    let flat_prices = Array2::from_shape_vec((y_t.len(), 1), y_t.iter().copied().collect()).expect("column");
    let price_scaler = Scaler::fit(flat_prices.view(), Preprocessing::Zscore);
    let exo_scaler = Scaler::fit(ex_t.view(), Preprocessing::Zscore);
    let target_scaler = Scaler::fit(y_t.view(), Preprocessing::Zscore);
    let train_s = SeqSamples {
        seqs: scale_seqs(seq_t, &price_scaler),
        extra: exo_scaler.transform(ex_t.view()),
        y: target_scaler.transform(y_t.view()),
    };
    let val_s = SeqSamples {
        seqs: scale_seqs(seq_v, &price_scaler),
        extra: exo_scaler.transform(ex_v.view()),
        y: target_scaler.transform(y_v.view()),
    };
    let net = LstmNet::new(LstmSpec {
        input: 1,
        hidden: cfg.hidden,
        seq_len: cfg.seq_len,
        extra: exo.len() * HOURS,
        outputs: HOURS,
        l1: cfg.l1,
        learning_rate: cfg.learning_rate,
        seed,
    })?;
    let opts = TrainOptions {
        seed: derived_seed(seed, 0),
        ..cfg.train
    };
    let (net, history) = train(&net, &train_s, &val_s, &opts)?;
    Ok(LstmModel {
        exo,
        price_scaler,
        exo_scaler,
        target_scaler,
        net,
        history,
    })
}

impl LstmModel {
    pub fn forecast(&self, panel: &HourlyPanel, day: usize, id: &str) -> Result<DayAheadForecast, NeuralError> {
        if day >= panel.n_days() {
            return Err(PanelError::InsufficientHistory(format!("day index {day} is not in the panel")).into());
        }
        let (seqs, extra) = lstm_inputs(panel, &self.exo, day..day + 1, self.net.spec.seq_len)?;
        let seq = scale_seqs(seqs, &self.price_scaler).remove(0);
        let extra = self.exo_scaler.transform(extra.view());
        let out = self.net.predict(seq.view(), extra.as_slice().expect("contiguous"))?;
        let prices = self.target_scaler.inverse_row(&out);
        Ok(DayAheadForecast::from_slice(id, panel.date(day), &prices)?)
    }
}
