//! Seeded synthetic log-probability data following the mixture model, with
//! optional noise on the full-library column and pairwise coupling between
//! elements in the true combination scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::predict_score;
use crate::regression::{
    fit, predict_versus_true, RegressionMode, RegressionProblem, SolverOptions,
};
use crate::stats;
use crate::subsets::enumerate_subsets;
use crate::truth::{desired_column, ScoreMatrix, SubsetTruth};
use crate::types::{
    CandidateScores, LogprobDataset, MixtureWeights, RowLabel, ScoreMode, SubsetIndicator,
};

/// Range of a single generated log-probability.
pub const LOGPROB_RANGE: (f64, f64) = (-8.0, -0.5);

const STREAM_ELEMENTS: u64 = 0;
const STREAM_LAMBDA: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_COUPLING: u64 = 3;
const STREAM_NOISE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub k: usize,
    pub n: usize,
    pub mode: ScoreMode,
    /// Drawn from a flat Dirichlet when absent.
    #[serde(default)]
    pub true_lambda: Option<Vec<f64>>,
    #[serde(default)]
    pub noise_std: f64,
    /// Standard deviation of the pairwise interaction contribution to any
    /// combination of two or more elements.
    #[serde(default)]
    pub coupling_strength: f64,
    /// Candidate responses per input (reference mode).
    #[serde(default = "one")]
    pub candidate_classes: usize,
    /// Elements whose desired (or preferred) response scores are drawn from
    /// a range shifted up by `planted_margin`.
    #[serde(default)]
    pub planted: Vec<usize>,
    #[serde(default)]
    pub planted_margin: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SynthConfig {
    pub fn new(k: usize, n: usize, mode: ScoreMode, seed: u64) -> Self {
        SynthConfig {
            k,
            n,
            mode,
            true_lambda: None,
            noise_std: 0.0,
            coupling_strength: 0.0,
            candidate_classes: 1,
            planted: Vec::new(),
            planted_margin: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::InvalidInput(
                "synthetic data needs k >= 1 and n >= 1".into(),
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::InvalidInput(
                "noise_std must be finite and >= 0".into(),
            ));
        }
        if !self.coupling_strength.is_finite() || self.coupling_strength < 0.0 {
            return Err(Error::InvalidInput(
                "coupling_strength must be finite and >= 0".into(),
            ));
        }
        if self.candidate_classes == 0 || self.candidate_classes > 64 {
            return Err(Error::InvalidInput(
                "candidate_classes must be in 1..=64".into(),
            ));
        }
        if self.mode == ScoreMode::Preference && self.candidate_classes != 1 {
            return Err(Error::InvalidInput(
                "preference-mode synthetic data has one margin per input".into(),
            ));
        }
        let (lo, hi) = LOGPROB_RANGE;
        if self.planted_margin.is_nan()
            || self.planted_margin < 0.0
            || self.planted_margin >= hi - lo
        {
            return Err(Error::InvalidInput(format!(
                "planted_margin must be in [0, {})",
                hi - lo
            )));
        }
        if let Some(&p) = self.planted.iter().find(|&&p| p >= self.k) {
            return Err(Error::InvalidInput(format!(
                "planted element {p} out of range"
            )));
        }
        if let Some(l) = &self.true_lambda {
            if l.len() != self.k {
                return Err(Error::ShapeMismatch(format!(
                    "true_lambda has {} entries, expected {}",
                    l.len(),
                    self.k
                )));
            }
            MixtureWeights::new(l.clone())?;
        }
        Ok(())
    }
}

/// True scores of a synthetic instance for any subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    mode: ScoreMode,
    k: usize,
    lambda: MixtureWeights,
    /// `[row][class][element]`
    elements: Vec<Vec<Vec<f64>>>,
    /// `[row][class]`
    base: Vec<Vec<f64>>,
    /// `[row][class][pair]`, pairs `k < l` in lexicographic order.
    coupling: Vec<Vec<Vec<f64>>>,
    desired: Vec<usize>,
}

fn pair_index(k: usize, a: usize, b: usize) -> usize {
    a * (2 * k - a - 1) / 2 + (b - a - 1)
}

impl SynthTruth {
    pub fn true_lambda(&self) -> &MixtureWeights {
        &self.lambda
    }

    pub fn desired(&self) -> &[usize] {
        &self.desired
    }

    /// True score of `class` for input `row` under the prompt built from
    /// `subset`.
    pub fn score(&self, row: usize, class: usize, subset: &SubsetIndicator) -> Result<f64> {
        if subset.len() != self.k {
            return Err(Error::ShapeMismatch(format!(
                "subset has length {}, expected {}",
                subset.len(),
                self.k
            )));
        }
        if subset.popcount() == 0 {
            return Ok(self.base[row][class]);
        }
        let mut value = predict_score(&self.elements[row][class], &self.lambda, subset)?;
        let members = subset.to_indices();
        if members.len() >= 2 {
            let gamma = &self.coupling[row][class];
            let mut sum = 0.0;
            for (x, &a) in members.iter().enumerate() {
                for &b in &members[x + 1..] {
                    sum += gamma[pair_index(self.k, a, b)];
                }
            }
            let pairs = (members.len() * (members.len() - 1) / 2) as f64;
            value += sum / pairs.sqrt();
        }
        if self.mode == ScoreMode::Reference {
            value = value.min(0.0);
        }
        Ok(value)
    }

    /// Subset of size at most `max_elements` maximising the summed true
    /// score of the desired responses, with its objective. Ties go to the
    /// earlier subset in enumeration order.
    pub fn best_subset(&self, max_elements: usize) -> Result<(SubsetIndicator, f64)> {
        let mut best: Option<(SubsetIndicator, f64)> = None;
        for s in enumerate_subsets(self.k, max_elements)? {
            let total = desired_column(&self.scores(&s)?, Some(&self.desired))
                .iter()
                .sum::<f64>();
            if best.as_ref().is_none_or(|(_, b)| total > *b) {
                best = Some((s, total));
            }
        }
        Ok(best.expect("enumeration is never empty"))
    }
}

impl SubsetTruth for SynthTruth {
    fn mode(&self) -> ScoreMode {
        self.mode
    }

    fn n(&self) -> usize {
        self.elements.len()
    }

    fn k(&self) -> usize {
        self.k
    }

    fn columns(&self) -> usize {
        self.base.first().map_or(1, Vec::len)
    }

    fn scores(&self, subset: &SubsetIndicator) -> Result<ScoreMatrix> {
        (0..self.n())
            .map(|i| {
                (0..self.columns())
                    .map(|c| self.score(i, c, subset))
                    .collect()
            })
            .collect()
    }

    fn base_scores(&self) -> Option<ScoreMatrix> {
        Some(self.base.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub dataset: LogprobDataset,
    pub truth: SynthTruth,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn logprob(rng: &mut ChaCha8Rng, shift: f64) -> f64 {
    let (lo, hi) = LOGPROB_RANGE;
    rng.random_range(lo + shift..hi)
}

/// Draws a synthetic instance. Each random component (element scores,
/// weights, labels, coupling, noise) has its own stream, so changing the
/// noise or coupling level leaves everything else untouched.
pub fn generate(config: &SynthConfig) -> Result<SyntheticInstance> {
    config.validate()?;
    let (k, n, classes) = (config.k, config.n, config.candidate_classes);

    let lambda = match &config.true_lambda {
        Some(l) => MixtureWeights::new(l.clone())?,
        None => {
            let mut rng = stream(config.seed, STREAM_LAMBDA);
            let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = raw.iter().sum();
            MixtureWeights::new(raw.iter().map(|v| v / total).collect())?
        }
    };

    let desired: Vec<usize> = {
        let mut rng = stream(config.seed, STREAM_LABELS);
        (0..n).map(|_| rng.random_range(0..classes)).collect()
    };

    let mut rng = stream(config.seed, STREAM_ELEMENTS);
    let mut elements = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    for &d in &desired {
        let mut row = Vec::with_capacity(classes);
        for c in 0..classes {
            let scores: Vec<f64> = (0..k)
                .map(|e| {
                    let shift = if c == d && config.planted.contains(&e) {
                        config.planted_margin
                    } else {
                        0.0
                    };
                    match config.mode {
                        ScoreMode::Reference => logprob(&mut rng, shift),
                        ScoreMode::Preference => logprob(&mut rng, shift) - logprob(&mut rng, 0.0),
                    }
                })
                .collect();
            row.push(scores);
        }
        elements.push(row);
        base.push(
            (0..classes)
                .map(|_| match config.mode {
                    ScoreMode::Reference => logprob(&mut rng, 0.0),
                    ScoreMode::Preference => logprob(&mut rng, 0.0) - logprob(&mut rng, 0.0),
                })
                .collect(),
        );
    }

    let pairs = k * (k - 1) / 2;
    let mut rng = stream(config.seed, STREAM_COUPLING);
    let coupling: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| {
            (0..classes)
                .map(|_| {
                    (0..pairs)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            config.coupling_strength * z
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let truth = SynthTruth {
        mode: config.mode,
        k,
        lambda,
        elements,
        base,
        coupling,
        desired,
    };

    let full_set = SubsetIndicator::full(k);
    let mut noise = stream(config.seed, STREAM_NOISE);
    let mut blocks: Vec<Vec<CandidateScores>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut group = Vec::with_capacity(classes);
        for c in 0..classes {
            let z: f64 = StandardNormal.sample(&mut noise);
            let mut full = truth.score(i, c, &full_set)? + config.noise_std * z;
            if config.mode == ScoreMode::Reference {
                full = full.min(0.0);
            }
            group.push(CandidateScores {
                delta: truth.elements[i][c].clone(),
                full,
            });
        }
        blocks.push(group);
    }

    let delta = (0..n)
        .map(|i| blocks[i][truth.desired[i]].delta.clone())
        .collect();
    let full = (0..n).map(|i| blocks[i][truth.desired[i]].full).collect();
    let mut dataset = LogprobDataset::with_k(config.mode, k, delta, full, false)?;
    if config.mode == ScoreMode::Reference && classes > 1 {
        let labels = truth
            .desired
            .iter()
            .map(|&d| RowLabel {
                desired: Some(d),
                class: Some(format!("c{d}")),
            })
            .collect();
        dataset = dataset.with_labels(labels)?.with_candidates(blocks)?;
    }
    Ok(SyntheticInstance { dataset, truth })
}

/// Regression quality at one coupling level, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressRow {
    pub coupling_strength: f64,
    pub mean_mae: f64,
    /// Mean over the seeds where the correlation is defined.
    pub mean_pearson_r: Option<f64>,
    pub per_seed: Vec<StressSample>,
    /// Seeds whose fit or prediction failed.
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressSample {
    pub seed: u64,
    pub mae: f64,
    pub pearson_r: Option<f64>,
}

/// Fits weights on each seeded instance at every coupling level and
/// compares predicted with true scores of all subsets of size 2 to 4.
pub fn assumption_stress(
    base: &SynthConfig,
    strengths: &[f64],
    seeds: &[u64],
    options: &SolverOptions,
) -> Result<Vec<StressRow>> {
    if strengths.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidInput(
            "stress sweep needs strengths and seeds".into(),
        ));
    }
    let lo = if base.k >= 2 { 2 } else { 1 };
    let hi = base.k.min(4);
    let eval: Vec<SubsetIndicator> = enumerate_subsets(base.k, hi)?
        .filter(|s| s.popcount() >= lo)
        .collect();

    let mut rows = Vec::with_capacity(strengths.len());
    for &strength in strengths {
        let mut per_seed = Vec::new();
        let mut failures = Vec::new();
        for &seed in seeds {
            let config = SynthConfig {
                coupling_strength: strength,
                seed,
                ..base.clone()
            };
            match stress_sample(&config, &eval, options) {
                Ok((mae, pearson_r)) => per_seed.push(StressSample {
                    seed,
                    mae,
                    pearson_r,
                }),
                Err(e) => failures.push((seed, e.to_string())),
            }
        }
        let maes: Vec<f64> = per_seed.iter().map(|s| s.mae).collect();
        let rs: Vec<f64> = per_seed.iter().filter_map(|s| s.pearson_r).collect();
        rows.push(StressRow {
            coupling_strength: strength,
            mean_mae: stats::mean(&maes),
            mean_pearson_r: (!rs.is_empty()).then(|| stats::mean(&rs)),
            per_seed,
            failures,
        });
    }
    Ok(rows)
}

fn stress_sample(
    config: &SynthConfig,
    eval: &[SubsetIndicator],
    options: &SolverOptions,
) -> Result<(f64, Option<f64>)> {
    let inst = generate(config)?;
    let problem = RegressionProblem::from_dataset(
        &inst.dataset,
        RegressionMode::for_scores(config.mode),
        *options,
    )?;
    let lambda = fit(&problem)?;
    // subsets made only of zero-weight elements have no prediction
    let eval: Vec<SubsetIndicator> = eval
        .iter()
        .filter(|s| s.indices().any(|k| lambda.lambda()[k] > 0.0))
        .cloned()
        .collect();
    let truth: Vec<Vec<f64>> = eval
        .iter()
        .map(|s| {
            Ok(desired_column(
                &inst.truth.scores(s)?,
                Some(inst.truth.desired()),
            ))
        })
        .collect::<Result<_>>()?;
    let diag = predict_versus_true(&inst.dataset, &lambda, &eval, &truth)?;
    Ok((diag.pooled_mae, diag.pooled_pearson_r))
}
