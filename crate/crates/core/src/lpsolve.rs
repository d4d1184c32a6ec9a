//! Dense two-phase primal simplex with Bland's anti-cycling rule.
//!
//! Programs are stated as `maximize c^T x` subject to equality rows and
//! per-variable bounds. Bounds are folded into a non-negative standard form
//! (shifts, reflections, free splits and slack rows) before the tableau is
//! built, and solutions are mapped back and checked against the original
//! program before being returned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PIVOT_TOLERANCE: f64 = 1e-11;
pub const FEASIBILITY_TOLERANCE: f64 = 1e-8;
pub const BOUND_TOLERANCE: f64 = 1e-10;
const REDUCED_COST_TOLERANCE: f64 = 1e-10;
const MAX_PIVOTS: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    objective: Vec<f64>,
    eq_constraints: Vec<(Vec<f64>, f64)>,
    bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    /// A program over `objective.len()` variables, each bounded to `[0, +inf)`.
    pub fn new(objective: Vec<f64>) -> Result<Self> {
        if objective.is_empty() {
            return Err(Error::InvalidInput(
                "linear program needs a variable".into(),
            ));
        }
        if objective.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteInput("objective coefficient".into()));
        }
        let m = objective.len();
        Ok(LinearProgram {
            objective,
            eq_constraints: Vec::new(),
            bounds: vec![(0.0, f64::INFINITY); m],
        })
    }

    pub fn with_equality(mut self, row: Vec<f64>, rhs: f64) -> Result<Self> {
        if row.len() != self.objective.len() {
            return Err(Error::ShapeMismatch(format!(
                "constraint row has {} coefficients for {} variables",
                row.len(),
                self.objective.len()
            )));
        }
        if !rhs.is_finite() || row.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteInput("constraint coefficient".into()));
        }
        self.eq_constraints.push((row, rhs));
        Ok(self)
    }

    /// Sets the bounds of one variable; `lower` may be `-inf` and `upper`
    /// may be `+inf`.
    pub fn with_bounds(mut self, var: usize, lower: f64, upper: f64) -> Result<Self> {
        if var >= self.objective.len() {
            return Err(Error::InvalidInput(format!("variable {var} out of range")));
        }
        if lower.is_nan() || upper.is_nan() || lower == f64::INFINITY || upper == f64::NEG_INFINITY
        {
            return Err(Error::InvalidInput(format!(
                "invalid bounds [{lower}, {upper}] for variable {var}"
            )));
        }
        self.bounds[var] = (lower, upper);
        Ok(self)
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn eq_constraints(&self) -> &[(Vec<f64>, f64)] {
        &self.eq_constraints
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest equality residual and largest bound violation at `x`.
    pub fn violations(&self, x: &[f64]) -> (f64, f64) {
        let eq = self
            .eq_constraints
            .iter()
            .map(|(row, rhs)| (row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() - rhs).abs())
            .fold(0.0, f64::max);
        let bd = self
            .bounds
            .iter()
            .zip(x)
            .map(|(&(l, u), &v)| (l - v).max(v - u).max(0.0))
            .fold(0.0, f64::max);
        (eq, bd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Meaningful only when `status` is `Optimal`.
    pub solution: Vec<f64>,
    pub objective_value: f64,
    pub pivots: usize,
}

impl LpSolution {
    fn without_point(status: LpStatus, m: usize, pivots: usize) -> Self {
        let objective_value = match status {
            LpStatus::Unbounded => f64::INFINITY,
            _ => f64::NAN,
        };
        LpSolution {
            status,
            solution: vec![f64::NAN; m],
            objective_value,
            pivots,
        }
    }
}

/// How an original variable is expressed through standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// `x = offset + col`
    Shift { col: usize, offset: f64 },
    /// `x = offset - col`
    Reflect { col: usize, offset: f64 },
    /// `x = pos - neg`
    Split { pos: usize, neg: usize },
}

struct StandardForm {
    maps: Vec<VarMap>,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    cost: Vec<f64>,
    cols: usize,
}

fn standardize(lp: &LinearProgram) -> Option<StandardForm> {
    let mut maps = Vec::with_capacity(lp.num_vars());
    let mut cols = 0;
    let mut range_rows: Vec<(usize, f64)> = Vec::new();
    for &(l, u) in &lp.bounds {
        if l > u {
            return None;
        }
        let map = if l.is_finite() {
            let col = cols;
            cols += 1;
            if u.is_finite() {
                range_rows.push((col, u - l));
            }
            VarMap::Shift { col, offset: l }
        } else if u.is_finite() {
            let col = cols;
            cols += 1;
            VarMap::Reflect { col, offset: u }
        } else {
            let pos = cols;
            cols += 2;
            VarMap::Split { pos, neg: pos + 1 }
        };
        maps.push(map);
    }
    // one slack per finite range
    let slack_base = cols;
    cols += range_rows.len();

    let expand = |coeffs: &[f64]| -> (Vec<f64>, f64) {
        let mut row = vec![0.0; cols];
        let mut constant = 0.0;
        for (a, map) in coeffs.iter().zip(&maps) {
            match *map {
                VarMap::Shift { col, offset } => {
                    row[col] += a;
                    constant += a * offset;
                }
                VarMap::Reflect { col, offset } => {
                    row[col] -= a;
                    constant += a * offset;
                }
                VarMap::Split { pos, neg } => {
                    row[pos] += a;
                    row[neg] -= a;
                }
            }
        }
        (row, constant)
    };

    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for (coeffs, b) in &lp.eq_constraints {
        let (row, constant) = expand(coeffs);
        rows.push(row);
        rhs.push(b - constant);
    }
    for (s, &(col, width)) in range_rows.iter().enumerate() {
        let mut row = vec![0.0; cols];
        row[col] = 1.0;
        row[slack_base + s] = 1.0;
        rows.push(row);
        rhs.push(width);
    }
    let (cost, _) = expand(&lp.objective);
    Some(StandardForm {
        maps,
        rows,
        rhs,
        cost,
        cols,
    })
}

/// Dense tableau; the last column holds the right-hand side and the last
/// row holds reduced costs (for maximization) with `-objective` in its
/// right-hand-side cell.
struct Tableau {
    data: Vec<Vec<f64>>,
    basis: Vec<usize>,
    width: usize,
    pivots: usize,
}

enum Phase {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn rows(&self) -> usize {
        self.data.len() - 1
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.data[r][c];
        for v in self.data[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.data[r].clone();
        for (i, row) in self.data.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
        self.pivots += 1;
    }

    fn set_objective(&mut self, cost: &[f64]) {
        let m = self.rows();
        let mut obj = vec![0.0; self.width + 1];
        obj[..cost.len()].copy_from_slice(cost);
        for i in 0..m {
            let cb = cost.get(self.basis[i]).copied().unwrap_or(0.0);
            if cb != 0.0 {
                for (o, v) in obj.iter_mut().zip(&self.data[i]) {
                    *o -= cb * v;
                }
            }
        }
        self.data[m] = obj;
    }

    /// Simplex iterations over columns `0..allowed` using Bland's rule.
    fn run(&mut self, allowed: usize) -> Result<Phase> {
        let m = self.rows();
        let rhs = self.width;
        loop {
            if self.pivots > MAX_PIVOTS {
                return Err(Error::NumericalFailure("pivot limit exceeded".into()));
            }
            let Some(enter) = (0..allowed).find(|&j| self.data[m][j] > REDUCED_COST_TOLERANCE)
            else {
                return Ok(Phase::Optimal);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let a = self.data[i][enter];
                if a <= PIVOT_TOLERANCE {
                    continue;
                }
                let ratio = self.data[i][rhs].max(0.0) / a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((bi, br)) => {
                        let tie = (ratio - br).abs() <= 1e-12 * br.abs().max(1.0);
                        if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                            Some((i, ratio))
                        } else {
                            Some((bi, br))
                        }
                    }
                };
            }
            match leave {
                None => return Ok(Phase::Unbounded),
                Some((r, _)) => self.pivot(r, enter),
            }
        }
    }
}

/// Solves `lp`. Infeasible and unbounded programs are reported through the
/// status; an `Err` means the arithmetic could not be trusted.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution> {
    let m_orig = lp.num_vars();
    let Some(sf) = standardize(lp) else {
        return Ok(LpSolution::without_point(LpStatus::Infeasible, m_orig, 0));
    };
    let n = sf.cols;
    let m = sf.rows.len();
    let width = n + m;

    let mut data = Vec::with_capacity(m + 1);
    for (i, (row, &b)) in sf.rows.iter().zip(&sf.rhs).enumerate() {
        let sign = if b < 0.0 { -1.0 } else { 1.0 };
        let mut t = vec![0.0; width + 1];
        for (dst, &a) in t.iter_mut().zip(row) {
            *dst = sign * a;
        }
        t[n + i] = 1.0;
        t[width] = sign * b;
        data.push(t);
    }
    data.push(vec![0.0; width + 1]);
    let mut tab = Tableau {
        data,
        basis: (n..n + m).collect(),
        width,
        pivots: 0,
    };

    // phase 1: maximize -sum(artificials)
    let mut phase1 = vec![0.0; width];
    for c in phase1.iter_mut().skip(n) {
        *c = -1.0;
    }
    tab.set_objective(&phase1);
    tab.run(width)?;
    let infeasibility = tab.data[m][width];
    if infeasibility > FEASIBILITY_TOLERANCE {
        return Ok(LpSolution::without_point(
            LpStatus::Infeasible,
            m_orig,
            tab.pivots,
        ));
    }

    // drive remaining artificials out of the basis; drop redundant rows
    let mut i = 0;
    while i < tab.rows() {
        if tab.basis[i] >= n {
            let col = (0..n)
                .filter(|&j| tab.data[i][j].abs() > PIVOT_TOLERANCE)
                .max_by(|&a, &b| tab.data[i][a].abs().total_cmp(&tab.data[i][b].abs()));
            match col {
                Some(j) => tab.pivot(i, j),
                None => {
                    tab.data.remove(i);
                    tab.basis.remove(i);
                    continue;
                }
            }
        }
        i += 1;
    }

    tab.set_objective(&sf.cost);
    let phase = tab.run(n)?;
    if let Phase::Unbounded = phase {
        return Ok(LpSolution::without_point(
            LpStatus::Unbounded,
            m_orig,
            tab.pivots,
        ));
    }

    let mut std_x = vec![0.0; n];
    for (r, &b) in tab.basis.iter().enumerate() {
        if b < n {
            std_x[b] = tab.data[r][width];
        }
    }
    let mut x: Vec<f64> = sf
        .maps
        .iter()
        .map(|map| match *map {
            VarMap::Shift { col, offset } => offset + std_x[col],
            VarMap::Reflect { col, offset } => offset - std_x[col],
            VarMap::Split { pos, neg } => std_x[pos] - std_x[neg],
        })
        .collect();
    for (v, &(l, u)) in x.iter_mut().zip(&lp.bounds) {
        if *v < l && l - *v <= FEASIBILITY_TOLERANCE {
            *v = l;
        }
        if *v > u && *v - u <= FEASIBILITY_TOLERANCE {
            *v = u;
        }
    }
    let (eq_violation, bound_violation) = lp.violations(&x);
    if eq_violation > FEASIBILITY_TOLERANCE || bound_violation > BOUND_TOLERANCE {
        return Err(Error::NumericalFailure(format!(
            "solution violates constraints (equality {eq_violation:e}, bounds {bound_violation:e})"
        )));
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        objective_value: lp.objective_at(&x),
        solution: x,
        pivots: tab.pivots,
    })
}
