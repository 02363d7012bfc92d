//! Dense-tableau bounded-variable simplex.
//!
//! Solves `minimize c·x` subject to linear rows `a·x {<=, >=, =} b` and
//! per-variable bounds `lo <= x <= hi` (either side may be infinite).
//! Phase one minimizes the sum of artificial variables; phase two fixes
//! the artificials at zero and optimizes the real objective. Pricing is
//! Dantzig's rule until `10 * (m + n)` iterations have elapsed, after which
//! Bland's rule takes over so degenerate cycling cannot persist.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEASIBILITY_TOL: f64 = 1e-7;
pub const OPTIMALITY_TOL: f64 = 1e-7;
/// Tableau entries at or below this magnitude are never pivoted on.
pub const PIVOT_TOL: f64 = 1e-11;

const RATIO_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
}

impl Relation {
    pub fn symbol(self) -> &'static str {
        match self {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        }
    }

    /// Signed amount by which `lhs` violates `lhs rel rhs` (0 when satisfied).
    pub fn violation(self, lhs: f64, rhs: f64) -> f64 {
        match self {
            Relation::Le => (lhs - rhs).max(0.0),
            Relation::Ge => (rhs - lhs).max(0.0),
            Relation::Eq => (lhs - rhs).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    /// Sparse `(variable, coefficient)` pairs.
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn lhs(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|(j, a)| a * x[*j]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_var(&mut self, lower: f64, upper: f64) -> usize {
        self.objective.push(0.0);
        self.lower.push(lower);
        self.upper.push(upper);
        self.objective.len() - 1
    }

    pub fn add_constraint(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::shape("variable bounds do not match variable count"));
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(Error::Value("non-finite objective coefficient".into()));
        }
        for (j, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l.is_nan() || u.is_nan() || *l == f64::INFINITY || *u == f64::NEG_INFINITY {
                return Err(Error::Value(format!("invalid bounds on variable {j}")));
            }
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if !c.rhs.is_finite() || c.coeffs.iter().any(|(_, a)| !a.is_finite()) {
                return Err(Error::Value(format!("non-finite data in constraint {i}")));
            }
            if let Some((j, _)) = c.coeffs.iter().find(|(j, _)| *j >= n) {
                return Err(Error::shape(format!("constraint {i} references variable {j} of {n}")));
            }
        }
        Ok(())
    }

    /// Largest violation of any row or variable bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let rows = self.constraints.iter().map(|c| c.relation.violation(c.lhs(x), c.rhs));
        let bounds = x
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (l - v).max(v - u).max(0.0));
        rows.chain(bounds).fold(0.0, f64::max)
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

/// Plain-text dump, one row per line, for auditing.
impl fmt::Display for LinearProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "minimize")?;
        let terms: Vec<_> = self.objective.iter().enumerate().filter(|(_, c)| **c != 0.0).collect();
        if terms.is_empty() {
            write!(f, " 0")?;
        }
        for (j, c) in terms {
            write!(f, " {c:+} x{j}")?;
        }
        writeln!(f)?;
        for (i, c) in self.constraints.iter().enumerate() {
            write!(f, "c{i}:")?;
            for (j, a) in &c.coeffs {
                write!(f, " {a:+} x{j}")?;
            }
            writeln!(f, " {} {}", c.relation.symbol(), c.rhs)?;
        }
        for j in 0..self.num_vars() {
            writeln!(f, "x{j} in [{}, {}]", self.lower[j], self.upper[j])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub point: Option<Vec<f64>>,
    pub objective_value: Option<f64>,
    pub iterations: usize,
}

pub fn lp_solve(lp: &LinearProgram) -> Result<LpOutcome> {
    lp.validate()?;
    if (0..lp.num_vars()).any(|j| lp.lower[j] > lp.upper[j]) {
        return Ok(LpOutcome {
            status: LpStatus::Infeasible,
            point: None,
            objective_value: None,
            iterations: 0,
        });
    }
    Tableau::build(lp).solve(lp)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pricing {
    Dantzig,
    Bland,
}

enum Step {
    Optimal,
    Unbounded,
    Continue,
}

struct Tableau {
    m: usize,
    n: usize,
    /// `m` rows of `n + 2m` columns: structurals, slacks, artificials.
    rows: Vec<Vec<f64>>,
    /// Original structural coefficients, kept for recomputing basic values.
    orig: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    art_sign: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    cost: Vec<f64>,
    iterations: usize,
    pricing: Pricing,
    bland_after: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars();
        let m = lp.constraints.len();
        let width = n + 2 * m;
        let mut lower = Vec::with_capacity(width);
        let mut upper = Vec::with_capacity(width);
        let mut x = Vec::with_capacity(width);
        for j in 0..n {
            let (l, u) = (lp.lower[j], lp.upper[j]);
            lower.push(l);
            upper.push(u);
            x.push(if l.is_finite() {
                l
            } else if u.is_finite() {
                u
            } else {
                0.0
            });
        }
        for c in &lp.constraints {
            let (l, u) = match c.relation {
                Relation::Le => (0.0, f64::INFINITY),
                Relation::Ge => (f64::NEG_INFINITY, 0.0),
                Relation::Eq => (0.0, 0.0),
            };
            lower.push(l);
            upper.push(u);
            x.push(0.0);
        }
        lower.extend(std::iter::repeat_n(0.0, m));
        upper.extend(std::iter::repeat_n(0.0, m));
        x.extend(std::iter::repeat_n(0.0, m));

        let mut rows = vec![vec![0.0; width]; m];
        let mut orig = vec![vec![0.0; n]; m];
        let mut rhs = vec![0.0; m];
        let mut art_sign = vec![1.0; m];
        let mut basis = vec![0; m];
        let mut is_basic = vec![false; width];
        let mut cost = vec![0.0; width];
        for (i, c) in lp.constraints.iter().enumerate() {
            let row = &mut rows[i];
            for (j, a) in &c.coeffs {
                row[*j] += a;
                orig[i][*j] += a;
            }
            row[n + i] = 1.0;
            rhs[i] = c.rhs;
            let residual = c.rhs - c.coeffs.iter().map(|(j, a)| a * x[*j]).sum::<f64>();
            let slack = n + i;
            if lower[slack] <= residual && residual <= upper[slack] {
                basis[i] = slack;
                x[slack] = residual;
                row[n + m + i] = 1.0;
            } else {
                let s = if residual >= 0.0 { 1.0 } else { -1.0 };
                art_sign[i] = s;
                row[n + m + i] = s;
                let art = n + m + i;
                basis[i] = art;
                upper[art] = f64::INFINITY;
                x[art] = residual.abs();
                cost[art] = 1.0;
                // normalize so the basic column is +e_i
                for v in row.iter_mut() {
                    *v *= s;
                }
            }
            is_basic[basis[i]] = true;
        }
        Tableau {
            m,
            n,
            rows,
            orig,
            rhs,
            art_sign,
            lower,
            upper,
            x,
            basis,
            is_basic,
            cost,
            iterations: 0,
            pricing: Pricing::Dantzig,
            bland_after: 10 * (m + n),
        }
    }

    fn solve(mut self, lp: &LinearProgram) -> Result<LpOutcome> {
        let limit = 100_000 + 200 * (self.m + self.n);
        let needs_phase_one = self.cost.iter().any(|c| *c != 0.0);
        if needs_phase_one {
            self.run(limit)?;
            self.refresh_basic_values();
            let infeasibility: f64 = (0..self.m).map(|i| self.x[self.n + self.m + i].max(0.0)).sum();
            if infeasibility > FEASIBILITY_TOL {
                return Ok(self.outcome(LpStatus::Infeasible, lp));
            }
        }
        for i in 0..self.m {
            let art = self.n + self.m + i;
            self.upper[art] = 0.0;
            self.cost[art] = 0.0;
            if !self.is_basic[art] {
                self.x[art] = 0.0;
            }
        }
        self.cost[..self.n].copy_from_slice(&lp.objective);
        let unbounded = matches!(self.run(limit)?, Step::Unbounded);
        self.refresh_basic_values();
        if unbounded {
            return Ok(self.outcome(LpStatus::Unbounded, lp));
        }
        let out = self.outcome(LpStatus::Optimal, lp);
        let point = out.point.as_ref().expect("optimal point");
        let viol = lp.max_violation(point);
        if viol > FEASIBILITY_TOL {
            return Err(Error::NumericalBreakdown(format!(
                "final point violates constraints by {viol:e}"
            )));
        }
        Ok(out)
    }

    fn outcome(&self, status: LpStatus, lp: &LinearProgram) -> LpOutcome {
        let point = (status != LpStatus::Infeasible).then(|| self.x[..self.n].to_vec());
        LpOutcome {
            status,
            objective_value: match status {
                LpStatus::Optimal => point.as_ref().map(|p| lp.objective_at(p)),
                _ => None,
            },
            point,
            iterations: self.iterations,
        }
    }

    fn run(&mut self, limit: usize) -> Result<Step> {
        loop {
            if self.iterations >= limit {
                return Err(Error::NumericalBreakdown(format!("no convergence after {limit} iterations")));
            }
            if self.iterations >= self.bland_after {
                self.pricing = Pricing::Bland;
            }
            match self.iterate()? {
                Step::Continue => self.iterations += 1,
                done => return Ok(done),
            }
        }
    }

    fn reduced_cost(&self, j: usize) -> f64 {
        let mut d = self.cost[j];
        for (i, row) in self.rows.iter().enumerate() {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                d -= cb * row[j];
            }
        }
        d
    }

    /// Chooses the entering variable and its direction of motion.
    fn price(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..self.x.len() {
            if self.is_basic[j] || self.lower[j] == self.upper[j] {
                continue;
            }
            let d = self.reduced_cost(j);
            let dir = if d < -OPTIMALITY_TOL && self.x[j] < self.upper[j] {
                1.0
            } else if d > OPTIMALITY_TOL && self.x[j] > self.lower[j] {
                -1.0
            } else {
                continue;
            };
            match self.pricing {
                Pricing::Bland => return Some((j, dir)),
                Pricing::Dantzig => {
                    if best.is_none_or(|(_, _, s)| d.abs() > s) {
                        best = Some((j, dir, d.abs()));
                    }
                }
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    fn iterate(&mut self) -> Result<Step> {
        let Some((enter, dir)) = self.price() else {
            return Ok(Step::Optimal);
        };

        // (row, step, |alpha|); None row means the entering variable hits its own bound
        let mut limit: Option<(Option<usize>, f64, f64)> = None;
        let own = self.upper[enter] - self.lower[enter];
        if own.is_finite() {
            limit = Some((None, own, f64::INFINITY));
        }
        for i in 0..self.m {
            let alpha = -dir * self.rows[i][enter];
            if alpha.abs() <= PIVOT_TOL {
                continue;
            }
            let b = self.basis[i];
            let step = if alpha > 0.0 {
                if !self.upper[b].is_finite() {
                    continue;
                }
                (self.upper[b] - self.x[b]) / alpha
            } else {
                if !self.lower[b].is_finite() {
                    continue;
                }
                (self.x[b] - self.lower[b]) / -alpha
            }
            .max(0.0);
            let better = match limit {
                None => true,
                Some((cur_row, cur, cur_mag)) => {
                    if step < cur - RATIO_TIE {
                        true
                    } else if step > cur + RATIO_TIE {
                        false
                    } else {
                        match (cur_row, self.pricing) {
                            // prefer the bound flip, which needs no pivot
                            (None, _) => false,
                            (Some(r), Pricing::Bland) => b < self.basis[r],
                            (Some(r), Pricing::Dantzig) => {
                                alpha.abs() > cur_mag || (alpha.abs() == cur_mag && b < self.basis[r])
                            }
                        }
                    }
                }
            };
            if better {
                limit = Some((Some(i), step, alpha.abs()));
            }
        }

        let Some((leave_row, step, _)) = limit else {
            if self.cost[self.n + self.m..].iter().any(|c| *c != 0.0) {
                return Err(Error::NumericalBreakdown("phase one reported an unbounded ray".into()));
            }
            return Ok(Step::Unbounded);
        };

        self.x[enter] += dir * step;
        for i in 0..self.m {
            let b = self.basis[i];
            self.x[b] -= dir * step * self.rows[i][enter];
        }
        match leave_row {
            None => {
                self.x[enter] = if dir > 0.0 { self.upper[enter] } else { self.lower[enter] };
            }
            Some(r) => {
                let leaving = self.basis[r];
                let alpha = -dir * self.rows[r][enter];
                self.x[leaving] = if alpha > 0.0 { self.upper[leaving] } else { self.lower[leaving] };
                self.pivot(r, enter);
            }
        }
        Ok(Step::Continue)
    }

    fn pivot(&mut self, r: usize, enter: usize) {
        let p = self.rows[r][enter];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        self.rows[r][enter] = 1.0;
        let pivot_row = std::mem::take(&mut self.rows[r]);
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[enter];
            if f == 0.0 {
                continue;
            }
            for (v, pv) in row.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            row[enter] = 0.0;
        }
        self.rows[r] = pivot_row;
        let leaving = self.basis[r];
        self.is_basic[leaving] = false;
        self.is_basic[enter] = true;
        self.basis[r] = enter;
    }

    /// Recomputes basic values as `B^-1 (b - N x_N)`. The slack block of
    /// the tableau is exactly `B^-1` of the original system.
    fn refresh_basic_values(&mut self) {
        let (n, m) = (self.n, self.m);
        let mut residual = self.rhs.clone();
        for (i, r) in residual.iter_mut().enumerate() {
            for j in 0..n {
                if !self.is_basic[j] && self.orig[i][j] != 0.0 {
                    *r -= self.orig[i][j] * self.x[j];
                }
            }
            if !self.is_basic[n + i] {
                *r -= self.x[n + i];
            }
            if !self.is_basic[n + m + i] {
                *r -= self.art_sign[i] * self.x[n + m + i];
            }
        }
        for i in 0..m {
            let v: f64 = (0..m).map(|k| self.rows[i][n + k] * residual[k]).sum();
            self.x[self.basis[i]] = v;
        }
    }
}
