//! Simplex-constrained least squares for the mixture weights.
//!
//! Minimizes `sum_i (target_i - sum_k lambda_k * delta_ik)^2` over the
//! probability simplex with projected gradient descent and an exact line
//! search along each projected direction. The quadratic form is
//! precomputed (`G = A^T A`, `h = A^T b`), so an iteration costs `O(K^2)`.
//! Once the iteration stalls, an equality-constrained solve on the current
//! support polishes the iterate; it is accepted only if it does not raise
//! the objective.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::predict_rows;
use crate::stats;
use crate::types::{FitDiagnostics, LogprobDataset, MixtureWeights, ScoreMode, SubsetIndicator};

/// Regression flavour. Reference regresses log-probabilities, Preference
/// regresses log-probability differences; both are the same optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegressionMode {
    #[serde(rename = "PEPR-R")]
    Reference,
    #[serde(rename = "PEPR-P")]
    Preference,
}

impl RegressionMode {
    pub fn for_scores(mode: ScoreMode) -> Self {
        match mode {
            ScoreMode::Reference => RegressionMode::Reference,
            ScoreMode::Preference => RegressionMode::Preference,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RegressionMode::Reference => "PEPR-R",
            RegressionMode::Preference => "PEPR-P",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once an iteration lowers the objective by no more than this
    /// (relative to the objective once it exceeds 1).
    pub convergence_tolerance: f64,
    /// Unused by the deterministic solver; carried for provenance.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 50_000,
            convergence_tolerance: 1e-10,
            seed: 0,
        }
    }
}

/// Design matrix and target of one regression.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    mode: RegressionMode,
    rows: Vec<Vec<f64>>,
    target: Vec<f64>,
    options: SolverOptions,
}

impl RegressionProblem {
    pub fn from_dataset(
        dataset: &LogprobDataset,
        mode: RegressionMode,
        options: SolverOptions,
    ) -> Result<Self> {
        if RegressionMode::for_scores(dataset.mode()) != mode {
            return Err(Error::InvalidInput(format!(
                "{} regression requires a {} dataset",
                mode.label(),
                match mode {
                    RegressionMode::Reference => "reference",
                    RegressionMode::Preference => "preference",
                }
            )));
        }
        Self::from_rows(
            mode,
            dataset.delta().to_vec(),
            dataset.full_library().to_vec(),
            options,
        )
    }

    pub fn from_rows(
        mode: RegressionMode,
        rows: Vec<Vec<f64>>,
        target: Vec<f64>,
        options: SolverOptions,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput(
                "regression needs at least one row".into(),
            ));
        }
        if rows.len() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows but {} targets",
                rows.len(),
                target.len()
            )));
        }
        let k = rows[0].len();
        if k == 0 {
            return Err(Error::InvalidInput("regression needs K >= 1".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {k}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!("row {i}")));
            }
        }
        if let Some(i) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("target {i}")));
        }
        if options.max_iterations == 0
            || (options.convergence_tolerance.is_nan() || options.convergence_tolerance < 0.0)
        {
            return Err(Error::InvalidInput("invalid solver options".into()));
        }
        Ok(RegressionProblem {
            mode,
            rows,
            target,
            options,
        })
    }

    pub fn mode(&self) -> RegressionMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.rows[0].len()
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    /// Sum of squared residuals at `lambda`, evaluated row by row.
    pub fn objective(&self, lambda: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.target)
            .map(|(r, b)| {
                let fit: f64 = r.iter().zip(lambda).map(|(x, l)| x * l).sum();
                (b - fit) * (b - fit)
            })
            .sum()
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

struct Quadratic {
    gram: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
}

impl Quadratic {
    fn new(problem: &RegressionProblem) -> Self {
        let k = problem.k();
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut linear = DVector::<f64>::zeros(k);
        let mut constant = 0.0;
        for (row, &b) in problem.rows.iter().zip(&problem.target) {
            for a in 0..k {
                linear[a] += row[a] * b;
                for c in a..k {
                    gram[(a, c)] += row[a] * row[c];
                }
            }
            constant += b * b;
        }
        for a in 0..k {
            for c in 0..a {
                gram[(a, c)] = gram[(c, a)];
            }
        }
        Quadratic {
            gram,
            linear,
            constant,
        }
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        (x.dot(&(&self.gram * x)) - 2.0 * self.linear.dot(x) + self.constant).max(0.0)
    }

    /// Half the gradient, `G x - h`.
    fn half_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gram * x - &self.linear
    }
}

/// Fits the mixture weights. See the module docs for the algorithm.
pub fn fit(problem: &RegressionProblem) -> Result<MixtureWeights> {
    fit_with_trace(problem).map(|(w, _)| w)
}

/// Like [`fit`], also returning the objective after every iteration.
pub fn fit_with_trace(problem: &RegressionProblem) -> Result<(MixtureWeights, Vec<f64>)> {
    let k = problem.k();
    if k == 1 {
        let w = finish(problem, vec![1.0], 0, true, false)?;
        return Ok((w, vec![problem.objective(&[1.0])]));
    }

    let quad = Quadratic::new(problem);
    let eig = SymmetricEigen::new(quad.gram.clone()).eigenvalues;
    let eig_max = eig.iter().cloned().fold(0.0f64, f64::max);
    let eig_min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let non_unique = eig_min < 1e-8 * eig_max;
    let lipschitz = 2.0 * eig_max;
    if lipschitz <= 0.0 {
        // all-zero design: every point on the simplex is optimal
        let w = finish(problem, vec![1.0 / k as f64; k], 0, true, true)?;
        return Ok((w, vec![quad.constant]));
    }

    let opts = problem.options;
    let mut x = DVector::from_element(k, 1.0 / k as f64);
    let mut f = quad.value(&x);
    let mut trace = vec![f];
    let mut step = 1.0 / lipschitz;
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let hg = quad.half_gradient(&x);

        // spectral (Barzilai-Borwein) trial step, safeguarded
        if let Some((px, phg)) = &prev {
            let s = &x - px;
            let y = (&hg - phg) * 2.0;
            let sy = s.dot(&y);
            step = if sy > 0.0 {
                (s.dot(&s) / sy).clamp(1e-3 / lipschitz, 1e6 / lipschitz)
            } else {
                1.0 / lipschitz
            };
        }
        let trial: Vec<f64> = x
            .iter()
            .zip(hg.iter())
            .map(|(xi, gi)| xi - step * 2.0 * gi)
            .collect();
        let z = DVector::from_vec(project_to_simplex(&trial));
        let d = &z - &x;
        let slope = d.dot(&hg);
        if d.amax() == 0.0 || slope >= 0.0 {
            converged = true;
            break;
        }
        let curvature = d.dot(&(&quad.gram * &d));
        let alpha = if curvature > 0.0 {
            (-slope / curvature).min(1.0)
        } else {
            1.0
        };
        let x_new = &x + &d * alpha;
        let f_new = quad.value(&x_new);
        if f_new.is_nan() || f_new > f {
            // no representable improvement left
            converged = true;
            break;
        }
        let decrease = f - f_new;
        prev = Some((x.clone(), hg));
        x = x_new;
        f = f_new;
        trace.push(f);
        if decrease <= opts.convergence_tolerance * f.max(1.0) {
            converged = true;
            break;
        }
    }

    if let Some(polished) = polish(&quad, &x) {
        let polished = clean_simplex(polished.as_slice());
        let current = clean_simplex(x.as_slice());
        if problem.objective(&polished) <= problem.objective(&current) {
            x = DVector::from_vec(polished);
            trace.push(quad.value(&x).min(f));
        }
    }

    let lambda = clean_simplex(x.as_slice());
    let w = finish(problem, lambda, iterations, converged, non_unique)?;
    if !converged {
        return Err(Error::SolverDivergence {
            iterations,
            objective: w.diagnostics.sse,
            best: Box::new(w),
        });
    }
    Ok((w, trace))
}

/// Active-set refinement: solves the equality-constrained problem on the
/// current support, dropping negative components and adding elements whose
/// gradient violates optimality, until the KKT conditions hold.
fn polish(quad: &Quadratic, x: &DVector<f64>) -> Option<DVector<f64>> {
    let k = x.len();
    let mut support: Vec<usize> = (0..k).filter(|&i| x[i] > 0.0).collect();
    for _ in 0..4 * k {
        if support.is_empty() {
            return None;
        }
        let (point, mu) = solve_on_support(quad, &support)?;
        if let Some(worst) = support
            .iter()
            .copied()
            .filter(|&i| point[i] < 0.0)
            .min_by(|&a, &b| point[a].total_cmp(&point[b]))
        {
            support.retain(|&i| i != worst);
            continue;
        }
        let hg = quad.half_gradient(&point);
        let scale = quad.linear.amax().max(1.0);
        let entering = (0..k)
            .filter(|i| !support.contains(i))
            .map(|i| (i, hg[i] + mu))
            .filter(|&(_, v)| v < -1e-12 * scale)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match entering {
            Some((i, _)) => {
                support.push(i);
                support.sort_unstable();
            }
            None => return Some(point),
        }
    }
    None
}

/// Minimizer of the quadratic on `{x : sum x = 1, x_i = 0 off support}`
/// and the multiplier of the sum constraint.
fn solve_on_support(quad: &Quadratic, support: &[usize]) -> Option<(DVector<f64>, f64)> {
    let s = support.len();
    let mut kkt = DMatrix::<f64>::zeros(s + 1, s + 1);
    let mut rhs = DVector::<f64>::zeros(s + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = quad.gram[(i, j)];
        }
        kkt[(a, s)] = 1.0;
        kkt[(s, a)] = 1.0;
        rhs[a] = quad.linear[i];
    }
    rhs[s] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut out = DVector::<f64>::zeros(quad.linear.len());
    for (a, &i) in support.iter().enumerate() {
        out[i] = sol[a];
    }
    Some((out, sol[s]))
}

fn clean_simplex(x: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    clipped.into_iter().map(|v| v / sum).collect()
}

fn finish(
    problem: &RegressionProblem,
    lambda: Vec<f64>,
    iterations: usize,
    converged: bool,
    non_unique: bool,
) -> Result<MixtureWeights> {
    let fitted: Vec<f64> = problem
        .rows
        .iter()
        .map(|r| r.iter().zip(&lambda).map(|(x, l)| x * l).sum())
        .collect();
    let sse = fitted
        .iter()
        .zip(&problem.target)
        .map(|(f, b)| (b - f) * (b - f))
        .sum();
    let diagnostics = FitDiagnostics {
        sse,
        mae: stats::mean_abs_error(&fitted, &problem.target),
        pearson_r: stats::pearson(&fitted, &problem.target),
        iterations,
        converged,
        non_unique,
    };
    MixtureWeights::with_diagnostics(lambda, diagnostics)
}

/// Fits reference-mode weights on every candidate output of every input,
/// stacked row-major: rows `i*C..(i+1)*C` belong to input `i`. No labels
/// are needed.
pub fn fit_unsupervised_reference(
    delta_all_candidates: Vec<Vec<f64>>,
    full_library_all_candidates: Vec<f64>,
    options: SolverOptions,
) -> Result<MixtureWeights> {
    let problem = RegressionProblem::from_rows(
        RegressionMode::Reference,
        delta_all_candidates,
        full_library_all_candidates,
        options,
    )?;
    fit(&problem)
}

/// Prediction error of one group of equally sized subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeGroup {
    pub size: usize,
    pub subsets: usize,
    pub mae: f64,
    pub pearson_r: Option<f64>,
    /// `(predicted, true)` pairs of every row of every subset in the group.
    pub pairs: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDiagnostics {
    pub groups: Vec<SizeGroup>,
    pub pooled_mae: f64,
    pub pooled_pearson_r: Option<f64>,
}

impl PredictionDiagnostics {
    pub fn group(&self, size: usize) -> Option<&SizeGroup> {
        self.groups.iter().find(|g| g.size == size)
    }

    pub fn pooled_pairs(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.groups.iter().flat_map(|g| g.pairs.iter())
    }
}

/// Compares mixture-model predictions with observed combination scores,
/// grouped by subset size.
pub fn predict_versus_true(
    dataset: &LogprobDataset,
    lambda: &MixtureWeights,
    eval_subsets: &[SubsetIndicator],
    ground_truth: &[Vec<f64>],
) -> Result<PredictionDiagnostics> {
    if eval_subsets.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} subsets but {} ground-truth vectors",
            eval_subsets.len(),
            ground_truth.len()
        )));
    }
    let mut grouped: BTreeMap<usize, (usize, Vec<(f64, f64)>)> = BTreeMap::new();
    for (s, truth) in eval_subsets.iter().zip(ground_truth) {
        if truth.len() != dataset.n() {
            return Err(Error::ShapeMismatch(format!(
                "ground truth for {s} has {} entries, dataset has {} rows",
                truth.len(),
                dataset.n()
            )));
        }
        let predicted = predict_rows(dataset.delta(), lambda, s)?;
        let entry = grouped.entry(s.popcount()).or_default();
        entry.0 += 1;
        entry
            .1
            .extend(predicted.into_iter().zip(truth.iter().copied()));
    }
    let groups: Vec<SizeGroup> = grouped
        .into_iter()
        .map(|(size, (subsets, pairs))| {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            SizeGroup {
                size,
                subsets,
                mae: stats::mean_abs_error(&p, &t),
                pearson_r: stats::pearson(&p, &t),
                pairs,
            }
        })
        .collect();
    let (p, t): (Vec<f64>, Vec<f64>) = groups.iter().flat_map(|g| g.pairs.iter().copied()).unzip();
    Ok(PredictionDiagnostics {
        groups,
        pooled_mae: stats::mean_abs_error(&p, &t),
        pooled_pearson_r: stats::pearson(&p, &t),
    })
}
