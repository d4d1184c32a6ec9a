//! Mixture-model arithmetic: renormalizing the full-library weights onto a
//! subset, predicting a combination's score, and Bradley-Terry preference
//! probabilities.

use crate::error::{Error, Result};
use crate::types::{BtConfig, MixtureWeights, SubsetIndicator};

fn check_subset(lambda: &MixtureWeights, subset: &SubsetIndicator) -> Result<()> {
    if subset.len() != lambda.k() {
        return Err(Error::ShapeMismatch(format!(
            "subset has length {} but there are {} weights",
            subset.len(),
            lambda.k()
        )));
    }
    if subset.popcount() == 0 {
        return Err(Error::EmptySubset);
    }
    Ok(())
}

/// Weights of the selected elements rescaled to sum to one, as
/// `(element index, weight)` pairs in index order.
pub fn renormalize_weights(
    lambda: &MixtureWeights,
    subset: &SubsetIndicator,
) -> Result<Vec<(usize, f64)>> {
    check_subset(lambda, subset)?;
    let w = lambda.lambda();
    let mass: f64 = subset.indices().map(|k| w[k]).sum();
    if mass <= 0.0 {
        return Err(Error::DegenerateSubset);
    }
    Ok(subset.indices().map(|k| (k, w[k] / mass)).collect())
}

/// Predicted score of the prompt built from `subset` for one input row.
pub fn predict_score(
    row: &[f64],
    lambda: &MixtureWeights,
    subset: &SubsetIndicator,
) -> Result<f64> {
    if row.len() != lambda.k() {
        return Err(Error::ShapeMismatch(format!(
            "row has {} scores but there are {} weights",
            row.len(),
            lambda.k()
        )));
    }
    let weights = renormalize_weights(lambda, subset)?;
    Ok(weights.iter().map(|&(k, w)| w * row[k]).sum())
}

/// Predicted scores of `subset` for every row of `delta`.
pub fn predict_rows(
    delta: &[Vec<f64>],
    lambda: &MixtureWeights,
    subset: &SubsetIndicator,
) -> Result<Vec<f64>> {
    let weights = renormalize_weights(lambda, subset)?;
    delta
        .iter()
        .map(|row| {
            if row.len() != lambda.k() {
                return Err(Error::ShapeMismatch(format!(
                    "row has {} scores but there are {} weights",
                    row.len(),
                    lambda.k()
                )));
            }
            Ok(weights.iter().map(|&(k, w)| w * row[k]).sum())
        })
        .collect()
}

/// Probability that the response scored `score_preferred` is preferred.
pub fn bt_probability(score_preferred: f64, score_other: f64, config: BtConfig) -> f64 {
    let x = config.beta() * (score_other - score_preferred);
    // logistic(-x), evaluated on the side where exp cannot overflow
    if x > 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn w(v: &[f64]) -> MixtureWeights {
        MixtureWeights::new(v.to_vec()).unwrap()
    }

    fn s(k: usize, idx: &[usize]) -> SubsetIndicator {
        SubsetIndicator::from_indices(k, idx).unwrap()
    }

    #[test]
    fn renormalize_pair() {
        let r = renormalize_weights(&w(&[0.5, 0.3, 0.2]), &s(3, &[0, 2])).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].0, 0);
        assert_eq!(r[1].0, 2);
        assert_abs_diff_eq!(r[0].1, 0.5 / 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1].1, 0.2 / 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(r[0].1, 0.714_285_714_285_714, epsilon = 1e-12);
    }

    #[test]
    fn renormalize_singleton_is_one() {
        let r = renormalize_weights(&w(&[0.5, 0.3, 0.2]), &s(3, &[1])).unwrap();
        assert_eq!(r, vec![(1, 1.0)]);
    }

    #[test]
    fn zero_mass_subset_is_degenerate() {
        let r = renormalize_weights(&w(&[0.0, 0.0, 1.0]), &s(3, &[0, 1]));
        assert!(matches!(r, Err(Error::DegenerateSubset)));
    }

    #[test]
    fn empty_subset_rejected() {
        let r = renormalize_weights(&w(&[0.5, 0.5]), &SubsetIndicator::empty(2));
        assert!(matches!(r, Err(Error::EmptySubset)));
    }

    #[test]
    fn predict_singleton_exact() {
        let row = [-1.3, -2.7, -0.4];
        for k in 0..3 {
            let p = predict_score(
                &row,
                &w(&[0.5, 0.3, 0.2]),
                &SubsetIndicator::singleton(3, k),
            )
            .unwrap();
            assert_eq!(p, row[k]);
        }
    }

    #[test]
    fn predict_uniform_average() {
        let p = predict_score(
            &[-1.0, -2.0, -3.0, -4.0],
            &w(&[0.25; 4]),
            &SubsetIndicator::full(4),
        )
        .unwrap();
        assert_abs_diff_eq!(p, -2.5, epsilon = 1e-15);
    }

    #[test]
    fn predict_pair() {
        let p = predict_score(&[-1.0, -9.0, -2.0], &w(&[0.5, 0.3, 0.2]), &s(3, &[0, 2])).unwrap();
        assert_abs_diff_eq!(p, (0.5 * -1.0 + 0.2 * -2.0) / 0.7, epsilon = 1e-14);
        assert_abs_diff_eq!(p, -1.285_714_285_714, epsilon = 1e-11);
    }

    #[test]
    fn bt_examples() {
        let c = BtConfig::default();
        assert_eq!(bt_probability(-3.0, -3.0, c), 0.5);
        assert_eq!(bt_probability(2.0, 2.0, BtConfig::new(7.5).unwrap()), 0.5);
        assert_abs_diff_eq!(
            bt_probability(-1.0, -2.0, c),
            1.0 / (1.0 + (-1.0f64).exp()),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            bt_probability(-1.0, -2.0, c),
            0.731_058_578_630_005,
            epsilon = 1e-12
        );
        let hot = BtConfig::new(1e6).unwrap();
        assert!(bt_probability(0.0, -1.0, hot) > 1.0 - 1e-12);
        assert_eq!(
            bt_probability(-1.0, 0.0, BtConfig::new(1e308).unwrap()),
            0.0
        );
        assert_eq!(
            bt_probability(0.0, -1.0, BtConfig::new(1e308).unwrap()),
            1.0
        );
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    fn normalized(v: Vec<f64>) -> MixtureWeights {
        // exact-sum renormalization can drift by an ulp; absorb it in the first entry
        let mut v = v;
        let rest: f64 = v[1..].iter().sum();
        v[0] = (1.0 - rest).max(0.0);
        MixtureWeights::new(v).unwrap()
    }

    proptest! {
        #[test]
        fn renormalized_weights_on_simplex(lam in simplex(6), mask in 1u32..64) {
            let bits: Vec<bool> = (0..6).map(|i| mask >> i & 1 == 1).collect();
            let r = renormalize_weights(&normalized(lam), &SubsetIndicator::from_bits(bits)).unwrap();
            let sum: f64 = r.iter().map(|p| p.1).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(r.iter().all(|p| p.1 >= 0.0));
        }

        #[test]
        fn prediction_is_convex_combination(lam in simplex(6), mask in 1u32..64,
                                            row in prop::collection::vec(-8.0f64..0.0, 6)) {
            let bits: Vec<bool> = (0..6).map(|i| mask >> i & 1 == 1).collect();
            let p = predict_score(&row, &normalized(lam), &SubsetIndicator::from_bits(bits)).unwrap();
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }

        #[test]
        fn zero_weight_elements_do_not_change_prediction(lam in simplex(4), extra in 0usize..2,
                                                        row in prop::collection::vec(-8.0f64..0.0, 6)) {
            // elements 4 and 5 carry zero weight
            let mut v = lam;
            v.extend([0.0, 0.0]);
            let weights = normalized(v);
            let base = SubsetIndicator::from_indices(6, &[0, 2]).unwrap();
            let padded = SubsetIndicator::from_indices(6, &[0, 2, 4 + extra]).unwrap();
            prop_assert_eq!(
                predict_score(&row, &weights, &base).unwrap(),
                predict_score(&row, &weights, &padded).unwrap()
            );
        }

        #[test]
        fn full_subset_is_plain_mixture(lam in simplex(5), row in prop::collection::vec(-8.0f64..0.0, 5)) {
            let weights = normalized(lam);
            let p = predict_score(&row, &weights, &SubsetIndicator::full(5)).unwrap();
            let direct: f64 = weights.lambda().iter().zip(&row).map(|(l, d)| l * d).sum();
            prop_assert!((p - direct).abs() <= 1e-12);
        }

        #[test]
        fn bt_symmetric(a in -50.0f64..50.0, b in -50.0f64..50.0, beta in 0.01f64..20.0) {
            let c = BtConfig::new(beta).unwrap();
            prop_assert!((bt_probability(a, b, c) + bt_probability(b, a, c) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn bt_monotone(a in -10.0f64..10.0, gap in 0.01f64..5.0) {
            let c = BtConfig::default();
            prop_assert!(bt_probability(a + gap, 0.0, c) > bt_probability(a, 0.0, c));
        }
    }
}
