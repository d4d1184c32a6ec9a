//! Cardinality-constrained prompt subset selection.
//!
//! For a fixed cardinality `j` the predicted objective of a subset `I` is
//! the weighted average `sum_k lambda_k I_k R_k / sum_k lambda_k I_k`.
//! Relaxing `I` to `[0, 1]^K` with `sum I = j` gives a linear-fractional
//! program; substituting `y = t I` with `lambda^T y = 1` turns it into the
//! linear program
//!
//! ```text
//! maximize (lambda * R)^T y
//! s.t.     lambda^T y = 1,  1^T y = j t,  0 <= y <= t,  t >= 0
//! ```
//!
//! whose vertices map back to binary indicators through `I = y / t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpsolve::{self, LinearProgram, LpStatus};
use crate::subsets::{binomial, enumerate_subsets};
use crate::types::{LogprobDataset, MixtureWeights, SubsetIndicator};

/// Indicator components this close to 0 or 1 are rounded.
pub const BINARY_TOLERANCE: f64 = 1e-6;
/// Objectives within this distance count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;
const MIN_SCALE: f64 = 1e-10;
/// Tie detection enumerates at most this many subsets per cardinality.
const TIE_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProblem {
    lambda: MixtureWeights,
    rewards: Vec<f64>,
    max_elements: usize,
    labeled_rows: Vec<usize>,
}

impl SelectionProblem {
    pub fn new(lambda: MixtureWeights, rewards: Vec<f64>, max_elements: usize) -> Result<Self> {
        if rewards.len() != lambda.k() {
            return Err(Error::ShapeMismatch(format!(
                "{} rewards for {} weights",
                rewards.len(),
                lambda.k()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFiniteInput("reward".into()));
        }
        if max_elements == 0 || max_elements > lambda.k() {
            return Err(Error::InvalidInput(format!(
                "max_elements must be in 1..={}, got {max_elements}",
                lambda.k()
            )));
        }
        Ok(SelectionProblem {
            lambda,
            rewards,
            max_elements,
            labeled_rows: Vec::new(),
        })
    }

    /// Rewards from the labeled rows of `dataset`, see [`rewards_from_rows`].
    pub fn from_dataset(
        dataset: &LogprobDataset,
        lambda: MixtureWeights,
        labeled_rows: Vec<usize>,
        max_elements: usize,
    ) -> Result<Self> {
        if dataset.k() != lambda.k() {
            return Err(Error::ShapeMismatch(format!(
                "dataset has K = {} but weights have K = {}",
                dataset.k(),
                lambda.k()
            )));
        }
        let rewards = rewards_from_rows(dataset, &labeled_rows)?;
        let mut p = Self::new(lambda, rewards, max_elements)?;
        p.labeled_rows = labeled_rows;
        Ok(p)
    }

    pub fn lambda(&self) -> &MixtureWeights {
        &self.lambda
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn max_elements(&self) -> usize {
        self.max_elements
    }

    pub fn labeled_rows(&self) -> &[usize] {
        &self.labeled_rows
    }

    pub fn k(&self) -> usize {
        self.lambda.k()
    }

    /// Elements with positive weight; only these enter the program.
    pub fn support(&self) -> Vec<usize> {
        (0..self.k())
            .filter(|&k| self.lambda.lambda()[k] > 0.0)
            .collect()
    }
}

/// `R_k = sum_{i in rows} delta_k^i`, larger is better in both modes: the
/// summed log-likelihood of the reference responses, or the summed margin
/// of preferred over dispreferred responses.
pub fn rewards_from_rows(dataset: &LogprobDataset, rows: &[usize]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput(
            "selection needs at least one labeled row".into(),
        ));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_unstable();
    let mut r = vec![0.0; dataset.k()];
    for &i in &sorted {
        if i >= dataset.n() {
            return Err(Error::InvalidInput(format!("labeled row {i} out of range")));
        }
        for (acc, d) in r.iter_mut().zip(dataset.row(i)) {
            *acc += d;
        }
    }
    Ok(r)
}

/// Predicted objective of `subset`; `None` if it carries no weight.
pub fn fractional_objective(
    lambda: &MixtureWeights,
    rewards: &[f64],
    subset: &SubsetIndicator,
) -> Option<f64> {
    let w = lambda.lambda();
    let (num, den) = subset
        .indices()
        .fold((0.0, 0.0), |(n, d), k| (n + w[k] * rewards[k], d + w[k]));
    (den > 0.0).then(|| num / den)
}

/// The relaxed program before the change of variables.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalProgram {
    /// `lambda * R`
    pub numerator: Vec<f64>,
    /// `lambda`
    pub denominator: Vec<f64>,
    pub cardinality: usize,
}

impl FractionalProgram {
    pub fn value(&self, x: &[f64]) -> f64 {
        let n: f64 = self.numerator.iter().zip(x).map(|(a, b)| a * b).sum();
        let d: f64 = self.denominator.iter().zip(x).map(|(a, b)| a * b).sum();
        n / d
    }
}

/// Linear program after the change of variables, restricted to the
/// positive-weight support.
///
/// Variable layout: `y_s` for each support position `s`, then `t`, then one
/// slack per support position for `y_s - t + slack_s = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedProgram {
    pub lp: LinearProgram,
    pub support: Vec<usize>,
    pub k: usize,
    pub cardinality: usize,
}

impl TransformedProgram {
    pub fn t_index(&self) -> usize {
        self.support.len()
    }

    /// Splits an LP solution into a length-`K` `y` (zero off support) and `t`.
    pub fn split(&self, solution: &[f64]) -> (Vec<f64>, f64) {
        let mut y = vec![0.0; self.k];
        for (s, &k) in self.support.iter().enumerate() {
            y[k] = solution[s];
        }
        (y, solution[self.t_index()])
    }
}

pub fn build_lfp(
    problem: &SelectionProblem,
    j: usize,
) -> Result<(FractionalProgram, TransformedProgram)> {
    let k = problem.k();
    if j == 0 || j > k {
        return Err(Error::InvalidInput(format!(
            "cardinality must be in 1..={k}, got {j}"
        )));
    }
    let lam = problem.lambda.lambda();
    let fractional = FractionalProgram {
        numerator: lam
            .iter()
            .zip(&problem.rewards)
            .map(|(l, r)| l * r)
            .collect(),
        denominator: lam.to_vec(),
        cardinality: j,
    };
    let support = problem.support();
    let s = support.len();
    if s < j {
        return Err(Error::DegenerateLambda {
            support: s,
            needed: j,
        });
    }
    let vars = 2 * s + 1;
    let t = s;
    let mut objective = vec![0.0; vars];
    let mut norm_row = vec![0.0; vars];
    let mut card_row = vec![0.0; vars];
    for (pos, &el) in support.iter().enumerate() {
        objective[pos] = fractional.numerator[el];
        norm_row[pos] = lam[el];
        card_row[pos] = 1.0;
    }
    card_row[t] = -(j as f64);
    let mut lp = LinearProgram::new(objective)?
        .with_equality(norm_row, 1.0)?
        .with_equality(card_row, 0.0)?;
    for pos in 0..s {
        let mut row = vec![0.0; vars];
        row[pos] = 1.0;
        row[t] = -1.0;
        row[t + 1 + pos] = 1.0;
        lp = lp.with_equality(row, 0.0)?;
    }
    Ok((
        fractional,
        TransformedProgram {
            lp,
            support,
            k,
            cardinality: j,
        },
    ))
}

/// Recovers `I = y / t`, rounding components within
/// [`BINARY_TOLERANCE`] of 0 or 1. The popcount must equal `cardinality`.
pub fn recover_indicators(y: &[f64], t: f64, cardinality: usize) -> Result<SubsetIndicator> {
    if t.is_nan() || t <= MIN_SCALE {
        return Err(Error::DegenerateScale(t));
    }
    let mut bits = Vec::with_capacity(y.len());
    for (index, &v) in y.iter().enumerate() {
        let x = v / t;
        if x.abs() <= BINARY_TOLERANCE {
            bits.push(false);
        } else if (x - 1.0).abs() <= BINARY_TOLERANCE {
            bits.push(true);
        } else {
            return Err(Error::NonBinarySolution { index, value: x });
        }
    }
    let ind = SubsetIndicator::from_bits(bits);
    if ind.popcount() != cardinality {
        return Err(Error::NumericalFailure(format!(
            "recovered {} elements, expected {cardinality}",
            ind.popcount()
        )));
    }
    Ok(ind)
}

/// Number of size-`j` subsets of the support attaining the optimum, or
/// `None` when the enumeration would be too large.
pub fn count_optima(problem: &SelectionProblem, j: usize) -> Option<usize> {
    let support = problem.support();
    if binomial(support.len(), j) > TIE_ENUMERATION_CAP || j == 0 || j > support.len() {
        return None;
    }
    let values: Vec<f64> = enumerate_subsets(support.len(), j)
        .ok()?
        .filter(|s| s.popcount() == j)
        .filter_map(|s| {
            let mut bits = vec![false; problem.k()];
            for p in s.indices() {
                bits[support[p]] = true;
            }
            fractional_objective(
                &problem.lambda,
                &problem.rewards,
                &SubsetIndicator::from_bits(bits),
            )
        })
        .collect();
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some(
        values
            .iter()
            .filter(|&&v| best - v <= TIE_TOLERANCE)
            .count(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub j: usize,
    pub indicator: SubsetIndicator,
    /// Fractional objective of the recovered indicator.
    pub predicted_objective: f64,
    pub lp_objective: f64,
    /// Several subsets share the optimum; `None` if not checked.
    pub tie: Option<bool>,
}

/// Solves the transformed program for a single cardinality.
pub fn solve_cardinality(problem: &SelectionProblem, j: usize) -> Result<Candidate> {
    let (_, program) = build_lfp(problem, j)?;
    let sol = lpsolve::solve(&program.lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(Error::LpStatus("infeasible")),
        LpStatus::Unbounded => return Err(Error::LpStatus("unbounded")),
    }
    let (y, t) = program.split(&sol.solution);
    let tie = count_optima(problem, j).map(|c| c > 1);
    let indicator = recover_indicators(&y, t, j)?;
    let predicted_objective = fractional_objective(&problem.lambda, &problem.rewards, &indicator)
        .ok_or(Error::DegenerateSubset)?;
    Ok(Candidate {
        j,
        indicator,
        predicted_objective,
        lp_objective: sol.objective_value,
        tie,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CardinalitySolve {
    pub j: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<Candidate>,
    /// Evaluator value of the candidate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetSelection {
    pub per_j: Vec<CardinalitySolve>,
    /// Index into `per_j` of the chosen candidate.
    pub chosen: Option<usize>,
    /// Prompts evaluated: each element alone, the full library, and every
    /// candidate that reached the evaluator.
    pub budget_used: usize,
}

impl SubsetSelection {
    pub fn chosen(&self) -> Option<&Candidate> {
        self.chosen.and_then(|i| self.per_j[i].candidate.as_ref())
    }

    pub fn chosen_evaluation(&self) -> Option<f64> {
        self.chosen.and_then(|i| self.per_j[i].evaluation)
    }
}

/// Solves every cardinality `1..=c` and keeps the candidate the evaluator
/// scores highest; ties go to the smaller cardinality. A failing
/// cardinality is recorded and does not stop the others.
pub fn select<F>(problem: &SelectionProblem, mut evaluator: F) -> SubsetSelection
where
    F: FnMut(&SubsetIndicator) -> f64,
{
    let mut per_j = Vec::with_capacity(problem.max_elements);
    let mut chosen: Option<(usize, f64)> = None;
    let mut evaluated = 0;
    for j in 1..=problem.max_elements {
        match solve_cardinality(problem, j) {
            Ok(candidate) => {
                let value = evaluator(&candidate.indicator);
                evaluated += 1;
                let score = if value.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    value
                };
                if chosen.is_none_or(|(_, best)| score > best) {
                    chosen = Some((per_j.len(), score));
                }
                per_j.push(CardinalitySolve {
                    j,
                    candidate: Some(candidate),
                    evaluation: Some(value),
                    error: None,
                });
            }
            Err(e) => per_j.push(CardinalitySolve {
                j,
                candidate: None,
                evaluation: None,
                error: Some(e.to_string()),
            }),
        }
    }
    SubsetSelection {
        per_j,
        chosen: chosen.map(|(i, _)| i),
        budget_used: problem.k() + 1 + evaluated,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptimum {
    pub j: usize,
    pub best: SubsetIndicator,
    pub objective: f64,
    /// Number of subsets within [`TIE_TOLERANCE`] of the optimum.
    pub optima: usize,
}

impl OracleOptimum {
    pub fn tie(&self) -> bool {
        self.optima > 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceSelection {
    pub per_j: Vec<OracleOptimum>,
    /// Best over all cardinalities, first in enumeration order on ties.
    pub best: OracleOptimum,
}

/// Exhaustive maximization of the predicted objective over every subset of
/// size at most `c`.
pub fn brute_force_select(problem: &SelectionProblem) -> Result<BruteForceSelection> {
    let c = problem.max_elements;
    let mut per_j: Vec<Option<OracleOptimum>> = vec![None; c];
    let mut all_values: Vec<Vec<f64>> = vec![Vec::new(); c];
    for s in enumerate_subsets(problem.k(), c)? {
        let Some(v) = fractional_objective(&problem.lambda, &problem.rewards, &s) else {
            continue;
        };
        let j = s.popcount();
        all_values[j - 1].push(v);
        let slot = &mut per_j[j - 1];
        if slot.as_ref().is_none_or(|o| v > o.objective) {
            *slot = Some(OracleOptimum {
                j,
                best: s,
                objective: v,
                optima: 0,
            });
        }
    }
    let per_j: Vec<OracleOptimum> = per_j
        .into_iter()
        .zip(&all_values)
        .filter_map(|(o, vals)| {
            o.map(|mut o| {
                o.optima = vals
                    .iter()
                    .filter(|&&v| o.objective - v <= TIE_TOLERANCE)
                    .count();
                o
            })
        })
        .collect();
    if per_j.is_empty() {
        return Err(Error::DegenerateLambda {
            support: 0,
            needed: 1,
        });
    }
    let top = per_j
        .iter()
        .map(|o| o.objective)
        .fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<&OracleOptimum> = per_j
        .iter()
        .filter(|o| top - o.objective <= TIE_TOLERANCE)
        .collect();
    let mut best = per_j
        .iter()
        .find(|o| o.objective == top)
        .cloned()
        .expect("non-empty");
    best.optima = winners.iter().map(|o| o.optima).sum();
    Ok(BruteForceSelection { per_j, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(lambda: &[f64], rewards: &[f64], c: usize) -> SelectionProblem {
        SelectionProblem::new(
            MixtureWeights::new(lambda.to_vec()).unwrap(),
            rewards.to_vec(),
            c,
        )
        .unwrap()
    }

    #[test]
    fn two_singletons() {
        let p = problem(&[0.5, 0.5], &[1.0, -1.0], 1);
        let c = solve_cardinality(&p, 1).unwrap();
        assert_eq!(c.indicator.to_indices(), vec![0]);
        assert_eq!(c.predicted_objective, 1.0);
    }

    #[test]
    fn full_cardinality_forced() {
        let p = problem(&[0.2, 0.3, 0.5], &[-4.0, 9.0, 0.1], 3);
        let c = solve_cardinality(&p, 3).unwrap();
        assert_eq!(c.indicator, SubsetIndicator::full(3));
    }

    #[test]
    fn four_elements_pick_two() {
        let p = problem(&[0.4, 0.3, 0.2, 0.1], &[2.0, -1.0, 3.0, 0.0], 2);
        // oracle: all C(4,2) pairs
        let oracle = brute_force_select(&p).unwrap();
        assert_eq!(oracle.per_j[1].best.to_indices(), vec![0, 2]);
        let c = solve_cardinality(&p, 2).unwrap();
        assert_eq!(c.indicator.to_indices(), vec![0, 2]);
        assert!((c.predicted_objective - (0.4 * 2.0 + 0.2 * 3.0) / 0.6).abs() < 1e-12);
        assert!((c.predicted_objective - 2.333_333_333_333).abs() < 1e-11);
        assert!((c.lp_objective - c.predicted_objective).abs() < 1e-9);
    }

    #[test]
    fn lambda_form_of_transformed_program() {
        let p = problem(&[0.4, 0.3, 0.2, 0.1], &[2.0, -1.0, 3.0, 0.0], 2);
        let (frac, cc) = build_lfp(&p, 2).unwrap();
        assert_eq!(frac.numerator, vec![0.4 * 2.0, 0.3 * -1.0, 0.2 * 3.0, 0.0]);
        assert_eq!(cc.lp.num_vars(), 9);
        assert_eq!(cc.lp.eq_constraints().len(), 2 + 4);
        let (norm, rhs) = &cc.lp.eq_constraints()[0];
        assert_eq!(&norm[..4], &[0.4, 0.3, 0.2, 0.1]);
        assert_eq!(*rhs, 1.0);
        let (card, _) = &cc.lp.eq_constraints()[1];
        assert_eq!(card[4], -2.0);
    }

    #[test]
    fn recover_examples() {
        assert_eq!(
            recover_indicators(&[2.0, 0.0, 2.0], 2.0, 2)
                .unwrap()
                .to_indices(),
            vec![0, 2]
        );
        assert!(matches!(
            recover_indicators(&[0.0, 0.0], 1e-11, 1),
            Err(Error::DegenerateScale(_))
        ));
        assert!(matches!(
            recover_indicators(&[0.5, 0.0, 0.5], 1.0, 1),
            Err(Error::NonBinarySolution { index: 0, .. })
        ));
    }

    #[test]
    fn tie_is_flagged() {
        let p = problem(&[0.5, 0.5], &[1.0, 1.0], 1);
        let c = solve_cardinality(&p, 1).unwrap();
        assert_eq!(c.tie, Some(true));
        assert_eq!(c.indicator.popcount(), 1);
        let oracle = brute_force_select(&p).unwrap();
        assert!(oracle.per_j[0].tie());
        assert!((oracle.per_j[0].objective - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_excluded_from_support() {
        let p = problem(&[0.0, 0.6, 0.4], &[100.0, 1.0, 2.0], 3);
        let c = solve_cardinality(&p, 1).unwrap();
        assert_eq!(c.indicator.to_indices(), vec![2]);
        assert!(matches!(
            solve_cardinality(&p, 3),
            Err(Error::DegenerateLambda {
                support: 2,
                needed: 3
            })
        ));
        let sel = select(&p, |_| 0.0);
        assert_eq!(sel.per_j.len(), 3);
        assert!(sel.per_j[2].error.is_some());
        assert_eq!(sel.chosen, Some(0));
    }

    #[test]
    fn budget_is_k_plus_one_plus_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lam: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = lam.iter().sum();
        let lam: Vec<f64> = lam.iter().map(|v| v / s).collect();
        let rewards: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = SelectionProblem::new(MixtureWeights::new(lam).unwrap(), rewards, 4).unwrap();
        let sel = select(&p, |s| s.popcount() as f64);
        assert_eq!(sel.budget_used, 15);
        assert_eq!(sel.per_j.len(), 4);
        assert_eq!(sel.chosen().unwrap().j, 4);
    }

    #[test]
    fn evaluator_ties_go_to_smaller_j() {
        let p = problem(&[0.25; 4], &[1.0, 2.0, 3.0, 4.0], 3);
        let sel = select(&p, |_| 0.5);
        assert_eq!(sel.chosen().unwrap().j, 1);
    }

    #[test]
    fn single_element_library() {
        let p = problem(&[1.0], &[-3.0], 1);
        let oracle = brute_force_select(&p).unwrap();
        assert_eq!(oracle.best.best.to_indices(), vec![0]);
        assert_eq!(
            solve_cardinality(&p, 1).unwrap().indicator.to_indices(),
            vec![0]
        );
    }

    #[test]
    fn constant_rewards_tie_on_first_subset() {
        let p = problem(&[0.1, 0.2, 0.3, 0.4], &[2.0; 4], 2);
        let oracle = brute_force_select(&p).unwrap();
        assert_eq!(oracle.best.best.to_indices(), vec![0]);
        assert!(oracle.best.tie());
    }
}
