//! Dense linear programming with dual values.
//!
//! Bounded-variable primal simplex on a full tableau, two phases. Pricing is
//! Dantzig's largest reduced cost until a run of degenerate pivots is seen,
//! after which Bland's lowest-index rule takes over for the rest of the solve.
//!
//! Dual values follow the sensitivity convention: the dual of row `i` is the
//! change of the optimal objective per unit increase of `rhs[i]`, for both
//! minimisation and maximisation. For a binding demand balance in a cost
//! minimisation this is the marginal cost of one more unit of demand.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("iteration limit of {0} reached")]
    IterationLimit(usize),
    #[error("malformed problem: {0}")]
    Malformed(String),
}

/// A linear program over bounded variables. Rows are stored sparsely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub sense: Sense,
    pub cost: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub names: Vec<String>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub row_sense: Vec<RowSense>,
    pub rhs: Vec<f64>,
}

impl LpProblem {
    pub fn new(sense: Sense) -> Self {
        LpProblem {
            sense,
            cost: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            names: Vec::new(),
            rows: Vec::new(),
            row_sense: Vec::new(),
            rhs: Vec::new(),
        }
    }

    /// Builds a problem from a dense constraint matrix.
    pub fn from_dense(
        sense: Sense,
        cost: Vec<f64>,
        matrix: &[Vec<f64>],
        row_sense: Vec<RowSense>,
        rhs: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Self {
        let n = cost.len();
        LpProblem {
            sense,
            names: (0..n).map(|j| format!("x{j}")).collect(),
            cost,
            lower,
            upper,
            rows: matrix
                .iter()
                .map(|r| r.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect())
                .collect(),
            row_sense,
            rhs,
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, cost: f64, lower: f64, upper: f64) -> usize {
        self.cost.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.names.push(name.into());
        self.cost.len() - 1
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, sense: RowSense, rhs: f64) -> usize {
        self.rows.push(coeffs);
        self.row_sense.push(sense);
        self.rhs.push(rhs);
        self.rows.len() - 1
    }

    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn dense_matrix(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let mut d = vec![0.0; self.n_vars()];
                for &(j, v) in r {
                    d[j] += v;
                }
                d
            })
            .collect()
    }

    pub fn row_activity(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.n_vars();
        let bad = |m: String| Err(LpError::Malformed(m));
        if self.lower.len() != n || self.upper.len() != n || self.names.len() != n {
            return bad("bound or name vectors do not match the variable count".into());
        }
        if self.row_sense.len() != self.rows.len() || self.rhs.len() != self.rows.len() {
            return bad("row sense / rhs vectors do not match the row count".into());
        }
        for j in 0..n {
            if !self.cost[j].is_finite() {
                return bad(format!("cost of {} is not finite", self.names[j]));
            }
            let (l, u) = (self.lower[j], self.upper[j]);
            if l.is_nan() || u.is_nan() || l > u || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return bad(format!("bounds [{l}, {u}] of {} are invalid", self.names[j]));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if !self.rhs[i].is_finite() {
                return bad(format!("rhs of row {i} is not finite"));
            }
            for &(j, v) in row {
                if j >= n || !v.is_finite() {
                    return bad(format!("row {i} has an invalid entry ({j}, {v})"));
                }
            }
        }
        Ok(())
    }

    /// CPLEX LP text, for cross-checking with external solvers.
    pub fn to_lp_format(&self) -> String {
        let mut s = String::new();
        let term = |s: &mut String, first: bool, v: f64, name: &str| {
            if first {
                let _ = write!(s, " {} {}", fmt_num(v), name);
            } else if v < 0.0 {
                let _ = write!(s, " - {} {}", fmt_num(-v), name);
            } else {
                let _ = write!(s, " + {} {}", fmt_num(v), name);
            }
        };
        s.push_str(match self.sense {
            Sense::Minimize => "Minimize\n obj:",
            Sense::Maximize => "Maximize\n obj:",
        });
        let mut first = true;
        for (j, &c) in self.cost.iter().enumerate() {
            if c != 0.0 {
                term(&mut s, first, c, &self.names[j]);
                first = false;
            }
        }
        if first {
            s.push_str(" 0");
        }
        s.push_str("\nSubject To\n");
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(s, " r{i}:");
            let mut first = true;
            for &(j, v) in row {
                term(&mut s, first, v, &self.names[j]);
                first = false;
            }
            if first {
                s.push_str(" 0 x_dummy");
            }
            let op = match self.row_sense[i] {
                RowSense::Le => "<=",
                RowSense::Eq => "=",
                RowSense::Ge => ">=",
            };
            let _ = writeln!(s, " {op} {}", fmt_num(self.rhs[i]));
        }
        s.push_str("Bounds\n");
        for j in 0..self.n_vars() {
            let (l, u) = (self.lower[j], self.upper[j]);
            let name = &self.names[j];
            let _ = match (l.is_finite(), u.is_finite()) {
                (true, true) if l == u => writeln!(s, " {name} = {}", fmt_num(l)),
                (true, true) => writeln!(s, " {} <= {name} <= {}", fmt_num(l), fmt_num(u)),
                (true, false) => writeln!(s, " {name} >= {}", fmt_num(l)),
                (false, true) => writeln!(s, " -inf <= {name} <= {}", fmt_num(u)),
                (false, false) => writeln!(s, " {name} free"),
            };
        }
        s.push_str("End\n");
        s
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// One dual value per row, d(objective)/d(rhs).
    pub duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// `None` means 50 * (rows + columns) of the standard form.
    pub max_iterations: Option<usize>,
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub stall_limit: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: None,
            feasibility_tol: 1e-9,
            optimality_tol: 1e-9,
            stall_limit: 30,
        }
    }
}

pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution, LpError> {
    solve_lp_with(problem, &SolverOptions::default())
}

pub fn solve_lp_with(problem: &LpProblem, opts: &SolverOptions) -> Result<LpSolution, LpError> {
    problem.validate()?;
    let sf = StandardForm::build(problem);
    let limit = opts
        .max_iterations
        .unwrap_or(50 * (sf.m + sf.n_cols));
    let mut tab = Tableau::new(&sf, opts);

    let b_scale = 1.0 + sf.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if sf.n_artificial > 0 {
        let cost1: Vec<f64> = (0..sf.n_cols)
            .map(|j| if j >= sf.first_artificial { 1.0 } else { 0.0 })
            .collect();
        tab.set_costs(&cost1);
        tab.run(limit)?;
        let infeas: f64 = (sf.first_artificial..sf.n_cols).map(|j| tab.value(j)).sum();
        if infeas > 1e-7 * b_scale {
            return Err(LpError::Infeasible);
        }
        for j in sf.first_artificial..sf.n_cols {
            tab.upper[j] = 0.0;
            tab.at_upper[j] = false;
            tab.blocked[j] = true;
        }
    }
    tab.set_costs(&sf.cost);
    tab.run(limit)?;

    let xs: Vec<f64> = (0..sf.n_cols).map(|j| tab.value(j)).collect();
    let x = sf.recover(&xs);
    let sign = match problem.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let duals = (0..sf.m)
        .map(|i| {
            let y = -tab.d[sf.unit_col[i]];
            let v = sign * sf.flip[i] * y;
            if v == 0.0 {
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok(LpSolution {
        objective: problem.objective(&x),
        x,
        duals,
        iterations: tab.iterations,
    })
}

#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = offset + x'
    Shift { col: usize, offset: f64 },
    /// x = offset - x'
    Mirror { col: usize, offset: f64 },
    /// x = x'+ - x'-
    Split { plus: usize, minus: usize },
}

/// min c'x, A x = b, 0 <= x <= u, b >= 0.
struct StandardForm {
    m: usize,
    n_cols: usize,
    a: Vec<f64>, // row-major m x n_cols
    b: Vec<f64>,
    cost: Vec<f64>,
    upper: Vec<f64>,
    flip: Vec<f64>,
    unit_col: Vec<usize>,
    first_artificial: usize,
    n_artificial: usize,
    map: Vec<VarMap>,
}

impl StandardForm {
    fn build(p: &LpProblem) -> Self {
        let m = p.n_rows();
        let csign = match p.sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut cost = Vec::new();
        let mut upper = Vec::new();
        let mut map = Vec::with_capacity(p.n_vars());
        for j in 0..p.n_vars() {
            let (l, u, c) = (p.lower[j], p.upper[j], csign * p.cost[j]);
            let col = cost.len();
            if l.is_finite() {
                map.push(VarMap::Shift { col, offset: l });
                cost.push(c);
                upper.push(u - l);
            } else if u.is_finite() {
                map.push(VarMap::Mirror { col, offset: u });
                cost.push(-c);
                upper.push(f64::INFINITY);
            } else {
                map.push(VarMap::Split {
                    plus: col,
                    minus: col + 1,
                });
                cost.extend([c, -c]);
                upper.extend([f64::INFINITY, f64::INFINITY]);
            }
        }
        let n_struct = cost.len();
        let n_slack = p.row_sense.iter().filter(|s| **s != RowSense::Eq).count();
        let width_wo_art = n_struct + n_slack;

        // structural part and rhs shift
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0; width_wo_art]; m];
        let mut b = p.rhs.clone();
        for (i, row) in p.rows.iter().enumerate() {
            for &(j, v) in row {
                match map[j] {
                    VarMap::Shift { col, offset } => {
                        rows[i][col] += v;
                        b[i] -= v * offset;
                    }
                    VarMap::Mirror { col, offset } => {
                        rows[i][col] -= v;
                        b[i] -= v * offset;
                    }
                    VarMap::Split { plus, minus } => {
                        rows[i][plus] += v;
                        rows[i][minus] -= v;
                    }
                }
            }
        }
        let mut slack_of_row = vec![None; m];
        let mut next = n_struct;
        for i in 0..m {
            match p.row_sense[i] {
                RowSense::Le => {
                    rows[i][next] = 1.0;
                    slack_of_row[i] = Some(next);
                    next += 1;
                }
                RowSense::Ge => {
                    rows[i][next] = -1.0;
                    slack_of_row[i] = Some(next);
                    next += 1;
                }
                RowSense::Eq => {}
            }
        }
        cost.extend(std::iter::repeat(0.0).take(n_slack));
        upper.extend(std::iter::repeat(f64::INFINITY).take(n_slack));

        let mut flip = vec![1.0; m];
        for i in 0..m {
            if b[i] < 0.0 {
                flip[i] = -1.0;
                b[i] = -b[i];
                rows[i].iter_mut().for_each(|v| *v = -*v);
            }
        }

        let mut unit_col = vec![usize::MAX; m];
        let mut n_artificial = 0;
        for i in 0..m {
            match slack_of_row[i] {
                Some(s) if rows[i][s] == 1.0 => unit_col[i] = s,
                _ => {
                    unit_col[i] = width_wo_art + n_artificial;
                    n_artificial += 1;
                }
            }
        }
        let n_cols = width_wo_art + n_artificial;
        let mut a = vec![0.0; m * n_cols];
        for i in 0..m {
            a[i * n_cols..i * n_cols + width_wo_art].copy_from_slice(&rows[i]);
            if unit_col[i] >= width_wo_art {
                a[i * n_cols + unit_col[i]] = 1.0;
            }
        }
        cost.extend(std::iter::repeat(0.0).take(n_artificial));
        upper.extend(std::iter::repeat(f64::INFINITY).take(n_artificial));

        StandardForm {
            m,
            n_cols,
            a,
            b,
            cost,
            upper,
            flip,
            unit_col,
            first_artificial: width_wo_art,
            n_artificial,
            map,
        }
    }

    fn recover(&self, xs: &[f64]) -> Vec<f64> {
        self.map
            .iter()
            .map(|m| match *m {
                VarMap::Shift { col, offset } => offset + xs[col],
                VarMap::Mirror { col, offset } => offset - xs[col],
                VarMap::Split { plus, minus } => xs[plus] - xs[minus],
            })
            .collect()
    }
}

struct Tableau {
    m: usize,
    n: usize,
    /// B^-1 A, row-major.
    t: Vec<f64>,
    /// Values of the basic variables.
    beta: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    at_upper: Vec<bool>,
    upper: Vec<f64>,
    /// Columns that may never enter (artificials in phase two).
    blocked: Vec<bool>,
    cost: Vec<f64>,
    /// Reduced costs.
    d: Vec<f64>,
    opt_tol: f64,
    piv_tol: f64,
    stall_limit: usize,
    bland: bool,
    iterations: usize,
}

impl Tableau {
    fn new(sf: &StandardForm, opts: &SolverOptions) -> Self {
        let mut is_basic = vec![false; sf.n_cols];
        for &c in &sf.unit_col {
            is_basic[c] = true;
        }
        Tableau {
            m: sf.m,
            n: sf.n_cols,
            t: sf.a.clone(),
            beta: sf.b.clone(),
            basis: sf.unit_col.clone(),
            is_basic,
            at_upper: vec![false; sf.n_cols],
            upper: sf.upper.clone(),
            blocked: vec![false; sf.n_cols],
            cost: vec![0.0; sf.n_cols],
            d: vec![0.0; sf.n_cols],
            opt_tol: opts.optimality_tol,
            piv_tol: 1e-11,
            stall_limit: opts.stall_limit,
            bland: false,
            iterations: 0,
        }
    }

    fn set_costs(&mut self, cost: &[f64]) {
        self.cost.copy_from_slice(cost);
        self.d.copy_from_slice(cost);
        for r in 0..self.m {
            let cb = self.cost[self.basis[r]];
            if cb != 0.0 {
                let row = &self.t[r * self.n..(r + 1) * self.n];
                for (dj, &tj) in self.d.iter_mut().zip(row) {
                    *dj -= cb * tj;
                }
            }
        }
        for r in 0..self.m {
            self.d[self.basis[r]] = 0.0;
        }
    }

    fn value(&self, j: usize) -> f64 {
        if self.is_basic[j] {
            let r = self.basis.iter().position(|&b| b == j).expect("basic column has a row");
            self.beta[r]
        } else if self.at_upper[j] {
            self.upper[j]
        } else {
            0.0
        }
    }

    fn choose_entering(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut best_score = 0.0;
        for j in 0..self.n {
            if self.is_basic[j] || self.blocked[j] || self.upper[j] <= 0.0 {
                continue;
            }
            let dj = self.d[j];
            let dir = if !self.at_upper[j] && dj < -self.opt_tol {
                1.0
            } else if self.at_upper[j] && dj > self.opt_tol {
                -1.0
            } else {
                continue;
            };
            if self.bland {
                return Some((j, dir));
            }
            if dj.abs() > best_score {
                best_score = dj.abs();
                best = Some((j, dir));
            }
        }
        best
    }

    fn run(&mut self, limit: usize) -> Result<(), LpError> {
        let mut stalled = 0usize;
        self.bland = false;
        loop {
            let Some((q, dir)) = self.choose_entering() else {
                return Ok(());
            };
            if self.iterations >= limit {
                return Err(LpError::IterationLimit(limit));
            }
            self.iterations += 1;

            // ratio test
            let mut theta = self.upper[q];
            let mut leave: Option<(usize, bool)> = None; // (row, leaves at upper)
            let mut leave_key = (0.0f64, usize::MAX);
            for r in 0..self.m {
                let alpha = dir * self.t[r * self.n + q];
                let bj = self.basis[r];
                let (limit_r, to_upper) = if alpha > self.piv_tol {
                    ((self.beta[r].max(0.0)) / alpha, false)
                } else if alpha < -self.piv_tol && self.upper[bj].is_finite() {
                    (((self.upper[bj] - self.beta[r]).max(0.0)) / (-alpha), true)
                } else {
                    continue;
                };
                let take = match leave {
                    None => limit_r < theta,
                    Some(_) if limit_r < theta - 1e-12 => true,
                    Some(_) if limit_r <= theta + 1e-12 => {
                        if self.bland {
                            bj < leave_key.1
                        } else {
                            alpha.abs() > leave_key.0
                        }
                    }
                    Some(_) => false,
                };
                if take {
                    theta = theta.min(limit_r);
                    leave = Some((r, to_upper));
                    leave_key = (alpha.abs(), bj);
                }
            }
            if !theta.is_finite() {
                return Err(LpError::Unbounded);
            }

            if theta <= 1e-12 {
                stalled += 1;
                if stalled > self.stall_limit {
                    self.bland = true;
                }
            } else {
                stalled = 0;
            }

            // move along the edge
            if theta > 0.0 {
                for r in 0..self.m {
                    let tq = self.t[r * self.n + q];
                    if tq != 0.0 {
                        self.beta[r] -= theta * dir * tq;
                    }
                }
            }

            match leave {
                None => {
                    // bound flip of the entering variable
                    self.at_upper[q] = !self.at_upper[q];
                }
                Some((r, to_upper)) => {
                    let entering_value = if dir > 0.0 { theta } else { self.upper[q] - theta };
                    let old = self.basis[r];
                    self.pivot(r, q);
                    self.beta[r] = entering_value;
                    self.is_basic[old] = false;
                    self.at_upper[old] = to_upper;
                    self.is_basic[q] = true;
                    self.at_upper[q] = false;
                    self.basis[r] = q;
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let n = self.n;
        let piv = self.t[r * n + q];
        {
            let row = &mut self.t[r * n..(r + 1) * n];
            row.iter_mut().for_each(|v| *v /= piv);
            row[q] = 1.0;
        }
        let pivot_row: Vec<f64> = self.t[r * n..(r + 1) * n].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * n + q];
            if f != 0.0 {
                let row = &mut self.t[i * n..(i + 1) * n];
                for (v, &p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
                row[q] = 0.0;
            }
        }
        let dq = self.d[q];
        if dq != 0.0 {
            for (v, &p) in self.d.iter_mut().zip(&pivot_row) {
                *v -= dq * p;
            }
            self.d[q] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    const INF: f64 = f64::INFINITY;

    #[test]
    fn single_binding_row() {
        let mut p = LpProblem::new(Sense::Maximize);
        let x = p.add_var("x", 1.0, 0.0, INF);
        p.add_row(vec![(x, 1.0)], RowSense::Le, 5.0);
        let s = solve_lp(&p).unwrap();
        assert!((s.x[0] - 5.0).abs() < 1e-12);
        assert!((s.duals[0] - 1.0).abs() < 1e-12);
        assert!((s.objective - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_unit_dispatch_dual_is_marginal_cost() {
        let mut p = LpProblem::new(Sense::Minimize);
        let g1 = p.add_var("g1", 20.0, 0.0, INF);
        let g2 = p.add_var("g2", 40.0, 0.0, INF);
        p.add_row(vec![(g1, 1.0), (g2, 1.0)], RowSense::Eq, 70.0);
        p.add_row(vec![(g1, 1.0)], RowSense::Le, 50.0);
        p.add_row(vec![(g2, 1.0)], RowSense::Le, 50.0);
        let s = solve_lp(&p).unwrap();
        assert!((s.x[0] - 50.0).abs() < 1e-9 && (s.x[1] - 20.0).abs() < 1e-9);
        assert!((s.duals[0] - 40.0).abs() < 1e-9);
        assert!((s.duals[1] + 20.0).abs() < 1e-9);
        assert!(s.duals[2].abs() < 1e-9);
        assert!((s.objective - 1800.0).abs() < 1e-9);
    }

    #[test]
    fn same_dispatch_with_variable_bounds() {
        let mut p = LpProblem::new(Sense::Minimize);
        let g1 = p.add_var("g1", 20.0, 0.0, 50.0);
        let g2 = p.add_var("g2", 40.0, 0.0, 50.0);
        p.add_row(vec![(g1, 1.0), (g2, 1.0)], RowSense::Eq, 70.0);
        let s = solve_lp(&p).unwrap();
        assert!((s.duals[0] - 40.0).abs() < 1e-9);
        assert!((s.x[1] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut p = LpProblem::new(Sense::Minimize);
        let x = p.add_var("x", 1.0, 0.0, INF);
        p.add_row(vec![(x, 1.0)], RowSense::Le, -1.0);
        assert_eq!(solve_lp(&p), Err(LpError::Infeasible));

        let mut p = LpProblem::new(Sense::Maximize);
        let x = p.add_var("x", 1.0, 0.0, INF);
        let y = p.add_var("y", 0.0, 0.0, INF);
        p.add_row(vec![(x, 1.0), (y, -1.0)], RowSense::Le, 3.0);
        assert_eq!(solve_lp(&p), Err(LpError::Unbounded));
    }

    #[test]
    fn free_and_negative_variables() {
        // min x + 2y, x free, y <= 4 (no lower bound), x - y >= 1, x + y >= -3
        let mut p = LpProblem::new(Sense::Minimize);
        let x = p.add_var("x", 1.0, -INF, INF);
        let y = p.add_var("y", 2.0, -INF, 4.0);
        p.add_row(vec![(x, 1.0), (y, -1.0)], RowSense::Ge, 1.0);
        p.add_row(vec![(x, 1.0), (y, 1.0)], RowSense::Ge, -3.0);
        p.add_row(vec![(y, 1.0)], RowSense::Ge, -10.0);
        let s = solve_lp(&p).unwrap();
        // y runs down to -10 and x + y >= -3 binds: x = 7, obj = -13
        assert!((s.x[0] - 7.0).abs() < 1e-9, "{:?}", s.x);
        assert!((s.x[1] + 10.0).abs() < 1e-9);
        assert!((s.objective + 13.0).abs() < 1e-9);
        // 1 = y1, 2 = y1 + y2
        assert!(s.duals[0].abs() < 1e-9, "{:?}", s.duals);
        assert!((s.duals[1] - 1.0).abs() < 1e-9);
        assert!((s.duals[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let mut p = LpProblem::new(Sense::Maximize);
        let a = p.add_var("a", 1.0, 0.0, INF);
        let b = p.add_var("b", 1.0, 0.0, INF);
        p.add_row(vec![(a, 1.0), (b, 2.0)], RowSense::Le, 4.0);
        p.add_row(vec![(a, 3.0), (b, 1.0)], RowSense::Le, 6.0);
        let opts = SolverOptions {
            max_iterations: Some(1),
            ..SolverOptions::default()
        };
        assert_eq!(solve_lp_with(&p, &opts), Err(LpError::IterationLimit(1)));
    }

    #[test]
    fn malformed_bounds() {
        let mut p = LpProblem::new(Sense::Minimize);
        p.add_var("x", 1.0, 2.0, 1.0);
        assert!(matches!(solve_lp(&p), Err(LpError::Malformed(_))));
    }

    #[test]
    fn lp_text_dump() {
        let mut p = LpProblem::new(Sense::Minimize);
        let g1 = p.add_var("g1", 20.0, 0.0, 50.0);
        let g2 = p.add_var("g2", 40.0, 0.0, INF);
        p.add_row(vec![(g1, 1.0), (g2, 1.0)], RowSense::Eq, 70.0);
        let text = p.to_lp_format();
        assert_eq!(
            text,
            "Minimize\n obj: 20 g1 + 40 g2\nSubject To\n r0: 1 g1 + 1 g2 = 70\nBounds\n 0 <= g1 <= 50\n g2 >= 0\nEnd\n"
        );
    }

    #[test]
    fn deterministic() {
        let mut p = LpProblem::new(Sense::Minimize);
        let vars: Vec<usize> = (0..6).map(|k| p.add_var(format!("g{k}"), 10.0, 0.0, 10.0)).collect();
        p.add_row(vars.iter().map(|&v| (v, 1.0)).collect(), RowSense::Eq, 25.0);
        let a = solve_lp(&p).unwrap();
        let b = solve_lp(&p).unwrap();
        assert_eq!(a, b);
    }
}
