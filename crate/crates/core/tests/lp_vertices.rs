//! Simplex solver against brute-force enumeration of basic feasible
//! solutions.

use nalgebra::{DMatrix, DVector};
use pepr_core::lpsolve::{solve, LinearProgram, LpStatus};
use pepr_core::selection::{build_lfp, SelectionProblem};
use pepr_core::MixtureWeights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn combinations(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    rec(0, n, m, &mut cur, &mut out);
    out
}

/// Best objective over all basic feasible solutions of
/// `max c.x, A x = b, x >= 0`, with `A` of full row rank.
fn best_vertex(lp: &LinearProgram) -> Option<f64> {
    let rows = lp.eq_constraints();
    let m = rows.len();
    let n = lp.num_vars();
    let a = DMatrix::from_fn(m, n, |i, j| rows[i].0[j]);
    let b = DVector::from_fn(m, |i, _| rows[i].1);
    let mut best: Option<f64> = None;
    for basis in combinations(n, m) {
        let sub = DMatrix::from_fn(m, m, |i, j| a[(i, basis[j])]);
        if sub.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(xb) = sub.lu().solve(&b) else {
            continue;
        };
        if xb.iter().any(|&v| v < -1e-9) {
            continue;
        }
        let mut x = vec![0.0; n];
        for (j, &col) in basis.iter().enumerate() {
            x[col] = xb[j];
        }
        let v = lp.objective_at(&x);
        if best.is_none_or(|b| v > b) {
            best = Some(v);
        }
    }
    best
}

#[test]
fn charnes_cooper_program_matches_vertex_enumeration() {
    // Support of three elements: y (3), t, three slacks.
    let lambda = MixtureWeights::new(vec![0.5, 0.3, 0.2]).unwrap();
    for (rewards, j) in [
        (vec![-20.0, -35.0, -12.0], 1),
        (vec![-20.0, -35.0, -12.0], 2),
        (vec![-5.0, -50.0, -30.0], 2),
        (vec![-40.0, -10.0, -25.0], 3),
    ] {
        let problem = SelectionProblem::new(lambda.clone(), rewards, 3).unwrap();
        let (_, program) = build_lfp(&problem, j).unwrap();
        assert_eq!(program.lp.num_vars(), 7);
        let sol = solve(&program.lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        let oracle = best_vertex(&program.lp).unwrap();
        assert!(
            (sol.objective_value - oracle).abs() <= 1e-8,
            "j={j}: {} vs {oracle}",
            sol.objective_value
        );
    }
}

#[test]
fn two_element_program_has_five_variables_and_matches() {
    let lambda = MixtureWeights::new(vec![0.7, 0.3]).unwrap();
    let problem = SelectionProblem::new(lambda, vec![-3.0, -9.0], 2).unwrap();
    for j in 1..=2 {
        let (_, program) = build_lfp(&problem, j).unwrap();
        assert_eq!(program.lp.num_vars(), 5);
        let sol = solve(&program.lp).unwrap();
        let oracle = best_vertex(&program.lp).unwrap();
        assert!((sol.objective_value - oracle).abs() <= 1e-8);
    }
}

#[test]
fn random_bounded_programs_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..200 {
        let n = rng.random_range(3..=6);
        let m = rng.random_range(1..=3.min(n - 1));
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let objective: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut lp = LinearProgram::new(objective).unwrap();
        // positive row keeps the feasible set bounded
        let positive: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let rhs = positive.iter().zip(&x0).map(|(a, x)| a * x).sum();
        lp = lp.with_equality(positive, rhs).unwrap();
        for _ in 1..m {
            let row: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let rhs = row.iter().zip(&x0).map(|(a, x)| a * x).sum();
            lp = lp.with_equality(row, rhs).unwrap();
        }
        let sol = solve(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal, "case {case}");
        let (eq, bound) = lp.violations(&sol.solution);
        assert!(
            eq <= 1e-8 && bound <= 1e-10,
            "case {case}: violations {eq} {bound}"
        );
        let oracle = best_vertex(&lp).expect("feasible by construction");
        assert!(
            (sol.objective_value - oracle).abs() <= 1e-8 * oracle.abs().max(1.0),
            "case {case}: {} vs {oracle}",
            sol.objective_value
        );
    }
}
