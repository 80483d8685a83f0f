//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use esmcast_core::dispatch::{FleetSpec, Unit};
use esmcast_core::lp::{LpProblem, RowSense, Sense};
use esmcast_core::panel::HOURS;
use esmcast_core::storage::StorageSpec;
use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{Signed, ToPrimitive, Zero};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

// ---------------------------------------------------------------------------
// exact LP oracle

type Q = Ratio<i128>;

/// Bounded LP with small integer data.
#[derive(Debug, Clone)]
pub struct SmallLp {
    pub sense: Sense,
    pub cost: Vec<i64>,
    pub lower: Vec<i64>,
    pub upper: Vec<i64>,
    pub rows: Vec<Vec<i64>>,
    pub senses: Vec<RowSense>,
    pub rhs: Vec<i64>,
}

impl SmallLp {
    /// Random feasible instance: the rows are built around an integer point
    /// inside the box.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..=5);
        let m = rng.gen_range(1..=4);
        let sense = if rng.gen_bool(0.5) { Sense::Minimize } else { Sense::Maximize };
        let cost = (0..n).map(|_| rng.gen_range(-9..=9)).collect();
        let lower: Vec<i64> = (0..n).map(|_| rng.gen_range(-5..=0)).collect();
        let upper: Vec<i64> = lower.iter().map(|l| l + rng.gen_range(1..=6)).collect();
        let x0: Vec<i64> = lower.iter().zip(&upper).map(|(l, u)| rng.gen_range(*l..=*u)).collect();
        let mut rows = Vec::new();
        let mut senses = Vec::new();
        let mut rhs = Vec::new();
        let mut n_eq = 0;
        for _ in 0..m {
            let a: Vec<i64> = (0..n).map(|_| rng.gen_range(-5..=5)).collect();
            let ax: i64 = a.iter().zip(&x0).map(|(a, x)| a * x).sum();
            let slack = rng.gen_range(0..=3);
            let s = match rng.gen_range(0..3) {
                0 if n_eq + 1 < n => {
                    n_eq += 1;
                    RowSense::Eq
                }
                1 => RowSense::Ge,
                _ => RowSense::Le,
            };
            rhs.push(match s {
                RowSense::Le => ax + slack,
                RowSense::Ge => ax - slack,
                RowSense::Eq => ax,
            });
            rows.push(a);
            senses.push(s);
        }
        SmallLp {
            sense,
            cost,
            lower,
            upper,
            rows,
            senses,
            rhs,
        }
    }

    pub fn problem(&self) -> LpProblem {
        let mut p = LpProblem::new(self.sense);
        for j in 0..self.cost.len() {
            p.add_var(format!("x{j}"), self.cost[j] as f64, self.lower[j] as f64, self.upper[j] as f64);
        }
        for ((a, s), b) in self.rows.iter().zip(&self.senses).zip(&self.rhs) {
            p.add_row(a.iter().enumerate().map(|(j, v)| (j, *v as f64)).collect(), *s, *b as f64);
        }
        p
    }

    /// Optimal objective by enumerating every basic solution in exact
    /// arithmetic; `None` when nothing is feasible.
    pub fn exact_optimum(&self) -> Option<f64> {
        let n = self.cost.len();
        // (coefficients, rhs, mandatory)
        let mut cons: Vec<(Vec<Q>, Q, bool)> = Vec::new();
        for ((a, s), b) in self.rows.iter().zip(&self.senses).zip(&self.rhs) {
            cons.push((a.iter().map(|v| Q::from(*v as i128)).collect(), Q::from(*b as i128), *s == RowSense::Eq));
        }
        for j in 0..n {
            for bound in [self.lower[j], self.upper[j]] {
                let mut e = vec![Q::zero(); n];
                e[j] = Q::from(1);
                cons.push((e, Q::from(bound as i128), false));
            }
        }
        let mandatory: Vec<usize> = (0..cons.len()).filter(|&i| cons[i].2).collect();
        let optional: Vec<usize> = (0..cons.len()).filter(|&i| !cons[i].2).collect();
        let mut best: Option<Q> = None;
        for pick in combinations(optional.len(), n - mandatory.len()) {
            let chosen: Vec<usize> = mandatory.iter().copied().chain(pick.iter().map(|&k| optional[k])).collect();
            let a = chosen.iter().map(|&i| cons[i].0.clone()).collect();
            let b = chosen.iter().map(|&i| cons[i].1).collect();
            let Some(x) = solve_square(a, b) else { continue };
            if !self.feasible(&x) {
                continue;
            }
            let obj: Q = self.cost.iter().zip(&x).map(|(c, v)| Q::from(*c as i128) * v).sum();
            let better = match &best {
                None => true,
                Some(b) => match self.sense {
                    Sense::Minimize => obj < *b,
                    Sense::Maximize => obj > *b,
                },
            };
            if better {
                best = Some(obj);
            }
        }
        best.map(|q| *q.numer() as f64 / *q.denom() as f64)
    }

    fn feasible(&self, x: &[Q]) -> bool {
        for j in 0..x.len() {
            if x[j] < Q::from(self.lower[j] as i128) || x[j] > Q::from(self.upper[j] as i128) {
                return false;
            }
        }
        for ((a, s), b) in self.rows.iter().zip(&self.senses).zip(&self.rhs) {
            let ax: Q = a.iter().zip(x).map(|(a, v)| Q::from(*a as i128) * v).sum();
            let b = Q::from(*b as i128);
            let ok = match s {
                RowSense::Le => ax <= b,
                RowSense::Ge => ax >= b,
                RowSense::Eq => ax == b,
            };
            if !ok {
                return false;
            }
        }
        true
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

fn solve_square(mut a: Vec<Vec<Q>>, mut b: Vec<Q>) -> Option<Vec<Q>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, piv);
        b.swap(col, piv);
        let prow = a[col].clone();
        let pb = b[col];
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col] / prow[col];
                for k in col..n {
                    a[r][k] -= f * prow[k];
                }
                b[r] -= f * pb;
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

// ---------------------------------------------------------------------------
// exact least squares

fn big(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite value")
}

/// Ordinary least squares with an intercept, solved exactly from the normal
/// equations. Returns `(intercept, coefficients)`.
pub fn ols_exact(x: &ndarray::Array2<f64>, y: &[f64]) -> (f64, Vec<f64>) {
    let (n, p) = x.dim();
    let z = |i: usize, j: usize| if j == 0 { BigRational::from_integer(BigInt::from(1)) } else { big(x[[i, j - 1]]) };
    let zs: Vec<Vec<BigRational>> = (0..n).map(|i| (0..=p).map(|j| z(i, j)).collect()).collect();
    let ys: Vec<BigRational> = y.iter().map(|v| big(*v)).collect();
    let mut a = vec![vec![BigRational::zero(); p + 1]; p + 1];
    let mut b = vec![BigRational::zero(); p + 1];
    for i in 0..n {
        for j in 0..=p {
            for k in j..=p {
                a[j][k] += &zs[i][j] * &zs[i][k];
            }
            b[j] += &zs[i][j] * &ys[i];
        }
    }
    for j in 0..=p {
        for k in 0..j {
            a[j][k] = a[k][j].clone();
        }
    }
    for col in 0..=p {
        let piv = (col..=p).max_by_key(|&r| a[r][col].abs()).expect("rows");
        a.swap(col, piv);
        b.swap(col, piv);
        assert!(!a[col][col].is_zero(), "singular normal equations");
        let prow = a[col].clone();
        let pb = b[col].clone();
        for r in 0..=p {
            if r != col && !a[r][col].is_zero() {
                let f = &a[r][col] / &prow[col];
                for k in col..=p {
                    let t = &f * &prow[k];
                    a[r][k] -= t;
                }
                let t = &f * &pb;
                b[r] -= t;
            }
        }
    }
    let sol: Vec<f64> = (0..=p).map(|i| (&b[i] / &a[i][i]).to_f64().expect("representable")).collect();
    (sol[0], sol[1..].to_vec())
}

// ---------------------------------------------------------------------------
// merit order

/// Walks the cost-sorted stack; the marginal unit sets the price.
pub fn stack_price(units: &[(f64, f64)], net_load: f64, curtailment: f64, shedding: f64) -> f64 {
    if net_load < 0.0 {
        return -curtailment;
    }
    let mut stack: Vec<(f64, f64)> = units.iter().copied().filter(|u| u.1 > 0.0).collect();
    stack.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    for (cost, cap) in stack {
        total += cap;
        if total >= net_load {
            return cost;
        }
    }
    shedding
}

/// Storage-free fleet with distinct costs and random renewables over `hours`.
pub fn random_fleet(rng: &mut ChaCha8Rng, hours: usize) -> (FleetSpec, Vec<f64>) {
    let n_units = rng.gen_range(1..=6);
    let mut costs: Vec<f64> = Vec::new();
    while costs.len() < n_units {
        let c = (rng.gen_range(50..=1500) as f64) / 10.0;
        if !costs.contains(&c) {
            costs.push(c);
        }
    }
    let units: Vec<Unit> = costs
        .iter()
        .enumerate()
        .map(|(i, c)| Unit::new(format!("u{i}"), *c, rng.gen_range(20.0..200.0)))
        .collect();
    let total: f64 = units.iter().map(|u| u.capacity).sum();
    let mut fleet = FleetSpec::new(units);
    fleet.wind = (0..hours).map(|_| rng.gen_range(0.0..0.4 * total)).collect();
    let demand = (0..hours).map(|_| rng.gen_range(0.1 * total..1.2 * total)).collect();
    (fleet, demand)
}

// ---------------------------------------------------------------------------
// storage dynamic programme

/// Smallest grid of at least `min` steps on which full-power charging and
/// generation move the level by whole steps.
pub fn aligned_steps(spec: &StorageSpec, min: usize) -> usize {
    let whole = |v: f64| (v - v.round()).abs() < 1e-9;
    (min..min * 20)
        .find(|&n| {
            let step = spec.max_level() / n as f64;
            whole(spec.eta * spec.cap / step) && whole(spec.cap / step)
        })
        .unwrap_or(min)
}

/// Best daily profit with storage levels restricted to a grid of
/// `steps + 1` points. Every path is a feasible plan, so this is a lower
/// bound on the continuous optimum, and exact on an aligned grid.
pub fn storage_dp(prices: &[f64; HOURS], spec: &StorageSpec, steps: usize) -> f64 {
    let step = spec.max_level() / steps as f64;
    let eps = 1e-9;
    let mut value = vec![f64::NEG_INFINITY; steps + 1];
    value[0] = 0.0;
    for (h, &p) in prices.iter().enumerate() {
        let mut next = vec![f64::NEG_INFINITY; steps + 1];
        for i in 0..=steps {
            let v = value[i];
            if v == f64::NEG_INFINITY {
                continue;
            }
            next[i] = next[i].max(v);
            for j in i + 1..=steps {
                let c = (j - i) as f64 * step / spec.eta;
                if c > spec.cap + eps {
                    break;
                }
                next[j] = next[j].max(v - p * c);
            }
            if h > 0 {
                for j in (0..i).rev() {
                    let g = (i - j) as f64 * step;
                    if g > spec.cap + eps {
                        break;
                    }
                    next[j] = next[j].max(v + p * g);
                }
            }
        }
        value = next;
    }
    value[0]
}

pub fn random_day(rng: &mut ChaCha8Rng) -> [f64; HOURS] {
    let base = rng.gen_range(20.0..60.0);
    let amp = rng.gen_range(5.0..40.0);
    let phase = rng.gen_range(0.0..24.0);
    let mut d = [0.0; HOURS];
    for (h, v) in d.iter_mut().enumerate() {
        let shape = (2.0 * std::f64::consts::PI * (h as f64 - phase) / 24.0).sin();
        *v = (base + amp * shape + 5.0 * normal(rng)).max(1.0);
    }
    d
}

pub fn errors(rng: &mut ChaCha8Rng, days: usize, scale: f64) -> Vec<[f64; HOURS]> {
    (0..days)
        .map(|_| {
            let mut e = [0.0; HOURS];
            e.iter_mut().for_each(|v| *v = scale * normal(rng));
            e
        })
        .collect()
}

/// Largest |x| in a slice, used to scale relative errors.
pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

