//! Evaluation protocol: labeled-portion sweeps with repeats, matched-budget
//! baselines, and reference statistics over every enumerable prompt.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::{
    fit, fit_unsupervised_reference, RegressionMode, RegressionProblem, SolverOptions,
};
use crate::selection::{select, SelectionProblem};
use crate::stats;
use crate::subsets::enumerate_subsets;
use crate::truth::{ScoreMatrix, SubsetTruth};
use crate::types::{LogprobDataset, MixtureWeights, PromptLibrary, ScoreMode, SubsetIndicator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Desired response strictly more likely than every other one.
    Accuracy,
    /// Desired response is the argmax, ties going to the lowest index.
    Top1Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Baseline {
    Random,
    SuccessiveHalving,
}

/// Rows on which PEPR scores its per-cardinality candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateRows {
    #[default]
    LabeledPortion,
    AllRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub portions: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    pub max_elements: usize,
    #[serde(default)]
    pub baselines: Vec<Baseline>,
    pub metric: Metric,
    /// PEPR variants to run; empty runs every variant the dataset supports.
    #[serde(default)]
    pub methods: Vec<RegressionMode>,
    #[serde(default)]
    pub candidate_rows: CandidateRows,
    #[serde(default)]
    pub solver: SolverOptions,
}

pub const DEFAULT_REPEATS: usize = 1000;
pub const CI_REPEATS: usize = 50;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            portions: vec![0.05, 0.25, 0.5, 1.0],
            repeats: DEFAULT_REPEATS,
            seed: 0,
            max_elements: 4,
            baselines: vec![Baseline::Random, Baseline::SuccessiveHalving],
            metric: Metric::Top1Accuracy,
            methods: Vec::new(),
            candidate_rows: CandidateRows::LabeledPortion,
            solver: SolverOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.portions.is_empty() {
            return Err(Error::InvalidInput(
                "at least one portion is required".into(),
            ));
        }
        if self.portions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidInput("portions must lie in (0, 1]".into()));
        }
        if self.portions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "portions must be strictly ascending".into(),
            ));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidInput("repeats must be >= 1".into()));
        }
        if self.max_elements == 0 {
            return Err(Error::InvalidInput("max_elements must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fraction of rows where `desired` is strictly greater than `other`.
pub fn metric_accuracy(desired: &[f64], other: &[f64]) -> Result<f64> {
    if desired.len() != other.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} desired scores but {} others",
            desired.len(),
            other.len()
        )));
    }
    if desired.is_empty() {
        return Err(Error::InvalidInput("accuracy of zero rows".into()));
    }
    let wins = desired.iter().zip(other).filter(|(d, o)| d > o).count();
    Ok(wins as f64 / desired.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Top1 {
    pub accuracy: f64,
    /// Rows whose maximum is shared by several candidates.
    pub ties: usize,
}

fn argmax(row: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    let tied = row.iter().filter(|&&v| v == row[best]).count() > 1;
    (best, tied)
}

/// Fraction of rows whose argmax candidate is the desired one.
pub fn metric_top1(scores: &ScoreMatrix, desired: &[usize]) -> Result<Top1> {
    if scores.len() != desired.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score rows but {} desired labels",
            scores.len(),
            desired.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("top-1 accuracy of zero rows".into()));
    }
    let mut hits = 0;
    let mut ties = 0;
    for (i, (row, &d)) in scores.iter().zip(desired).enumerate() {
        if d >= row.len() {
            return Err(Error::ShapeMismatch(format!(
                "row {i}: desired class {d} but {} candidates",
                row.len()
            )));
        }
        let (best, tied) = argmax(row);
        hits += usize::from(best == d);
        ties += usize::from(tied);
    }
    Ok(Top1 {
        accuracy: hits as f64 / scores.len() as f64,
        ties,
    })
}

/// Per-row correctness of one prompt. Preference scores are margins, so
/// the pair is `(margin, 0)` with the preferred response at index 0.
fn row_correctness(
    scores: &ScoreMatrix,
    mode: ScoreMode,
    desired: &[usize],
    metric: Metric,
) -> Result<Vec<bool>> {
    scores
        .iter()
        .zip(desired)
        .map(|(row, &d)| {
            let pair;
            let row: &[f64] = if mode == ScoreMode::Preference {
                pair = [row[0], 0.0];
                &pair
            } else {
                row
            };
            if row.len() < 2 {
                return Err(Error::InvalidInput(
                    "metrics need at least two candidate responses per input".into(),
                ));
            }
            Ok(match metric {
                Metric::Accuracy => row.iter().enumerate().all(|(c, &v)| c == d || row[d] > v),
                Metric::Top1Accuracy => argmax(row).0 == d,
            })
        })
        .collect()
}

/// Per-row correctness of every prompt of size at most `c`, plus the base
/// prompt when the truth source knows it.
#[derive(Debug, Clone)]
pub struct CorrectnessTable {
    subsets: Vec<SubsetIndicator>,
    rows: Vec<Vec<bool>>,
    lookup: HashMap<SubsetIndicator, usize>,
    base: Option<Vec<bool>>,
}

impl CorrectnessTable {
    pub fn build(
        truth: &dyn SubsetTruth,
        desired: &[usize],
        metric: Metric,
        max_elements: usize,
    ) -> Result<Self> {
        if desired.len() != truth.n() {
            return Err(Error::ShapeMismatch(format!(
                "{} desired labels for {} truth rows",
                desired.len(),
                truth.n()
            )));
        }
        let subsets: Vec<SubsetIndicator> = enumerate_subsets(truth.k(), max_elements)?.collect();
        let rows = subsets
            .par_iter()
            .map(|s| row_correctness(&truth.scores(s)?, truth.mode(), desired, metric))
            .collect::<Result<Vec<_>>>()?;
        let base = truth
            .base_scores()
            .map(|b| row_correctness(&b, truth.mode(), desired, metric))
            .transpose()?;
        let lookup = subsets
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        Ok(CorrectnessTable {
            subsets,
            rows,
            lookup,
            base,
        })
    }

    /// Candidate subsets in enumeration order.
    pub fn subsets(&self) -> &[SubsetIndicator] {
        &self.subsets
    }

    pub fn correct(&self, candidate: usize, row: usize) -> bool {
        self.rows[candidate][row]
    }

    pub fn index_of(&self, subset: &SubsetIndicator) -> Option<usize> {
        self.lookup.get(subset).copied()
    }

    /// Metric of a candidate on `rows`; `None` means every row.
    pub fn metric(&self, candidate: usize, rows: Option<&[usize]>) -> f64 {
        fraction(&self.rows[candidate], rows)
    }

    pub fn subset_metric(&self, subset: &SubsetIndicator, rows: Option<&[usize]>) -> Option<f64> {
        self.index_of(subset).map(|i| self.metric(i, rows))
    }

    pub fn base_metric(&self, rows: Option<&[usize]>) -> Option<f64> {
        self.base.as_ref().map(|b| fraction(b, rows))
    }
}

fn fraction(correct: &[bool], rows: Option<&[usize]>) -> f64 {
    match rows {
        None => correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64,
        Some(rows) => rows.iter().filter(|&&r| correct[r]).count() as f64 / rows.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomOutcome {
    pub best: SubsetIndicator,
    pub value: f64,
    pub evaluated: Vec<SubsetIndicator>,
}

/// Evaluates `K + 1 + c` distinct subsets of size at most `c`, drawn
/// uniformly without replacement, and keeps the best (earliest in
/// enumeration order on ties).
pub fn random_baseline<F>(
    k: usize,
    max_elements: usize,
    seed: u64,
    mut evaluator: F,
) -> Result<RandomOutcome>
where
    F: FnMut(&SubsetIndicator) -> f64,
{
    let all: Vec<SubsetIndicator> = enumerate_subsets(k, max_elements)?.collect();
    let budget = (k + 1 + max_elements).min(all.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, all.len(), budget).into_vec();
    picks.sort_unstable();
    let mut best: Option<(usize, f64)> = None;
    for &p in &picks {
        let v = evaluator(&all[p]);
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((p, v));
        }
    }
    let (p, value) = best.expect("at least one subset is sampled");
    Ok(RandomOutcome {
        best: all[p].clone(),
        value,
        evaluated: picks.into_iter().map(|p| all[p].clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalvingOutcome {
    /// Index of the surviving candidate.
    pub winner: usize,
    pub evaluations: usize,
    pub rounds: usize,
}

/// Successive halving over `candidates` arms. Each round gives every
/// survivor `max(1, floor(remaining / (rounds_left * survivors)))` fresh
/// samples from a shared shuffled row order, then keeps the better half by
/// running mean (ties to the lower index).
pub fn successive_halving_baseline<F>(
    candidates: usize,
    rows: &[usize],
    total_budget: usize,
    seed: u64,
    mut per_sample: F,
) -> Result<HalvingOutcome>
where
    F: FnMut(usize, usize) -> f64,
{
    if candidates == 0 || rows.is_empty() {
        return Err(Error::InvalidInput(
            "successive halving needs candidates and rows".into(),
        ));
    }
    if candidates > total_budget {
        return Err(Error::BudgetInfeasible {
            candidates,
            budget: total_budget,
        });
    }
    let mut order = rows.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rounds = (candidates as f64).log2().ceil() as usize;
    let mut survivors: Vec<usize> = (0..candidates).collect();
    let mut sums = vec![0.0; candidates];
    let mut counts = vec![0usize; candidates];
    let mut remaining = total_budget;
    let mut cursor = 0;
    for r in 0..rounds {
        if survivors.len() == 1 {
            break;
        }
        let left = rounds - r;
        let per = if survivors.len() > remaining {
            0
        } else {
            (remaining / (left * survivors.len())).max(1)
        };
        for t in 0..per {
            let row = order[(cursor + t) % order.len()];
            for &s in &survivors {
                sums[s] += per_sample(s, row);
                counts[s] += 1;
            }
        }
        cursor += per;
        remaining -= per * survivors.len();
        let mean = |s: usize| {
            if counts[s] == 0 {
                0.0
            } else {
                sums[s] / counts[s] as f64
            }
        };
        survivors.sort_by(|&a, &b| mean(b).total_cmp(&mean(a)).then(a.cmp(&b)));
        survivors.truncate(survivors.len().div_ceil(2));
        survivors.sort_unstable();
    }
    Ok(HalvingOutcome {
        winner: survivors[0],
        evaluations: total_budget - remaining,
        rounds,
    })
}

/// Stratified subsample of `size` rows without replacement, sorted.
/// Strata get largest-remainder quotas proportional to their size.
pub fn stratified_sample(classes: &[Option<&str>], size: usize, seed: u64) -> Vec<usize> {
    let n = classes.len();
    let size = size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        strata.entry(*c).or_default().push(i);
    }
    let mut quotas: Vec<(usize, f64)> = strata
        .values()
        .map(|rows| {
            let exact = size as f64 * rows.len() as f64 / n as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut short = size - quotas.iter().map(|q| q.0).sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for s in by_remainder {
        if short == 0 {
            break;
        }
        quotas[s].0 += 1;
        short -= 1;
    }
    let mut out = Vec::with_capacity(size);
    for (rows, (quota, _)) in strata.into_values().zip(quotas) {
        let mut rows = rows;
        rows.shuffle(&mut rng);
        out.extend_from_slice(&rows[..quota]);
    }
    out.sort_unstable();
    out
}

/// Labeled rows for a portion: `floor(portion * n)`, at least one.
pub fn portion_size(portion: f64, n: usize) -> usize {
    ((portion * n as f64).floor() as usize).clamp(1, n)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one (portion, repeat) cell, independent across cells.
pub fn repeat_seed(seed: u64, portion: usize, repeat: usize) -> u64 {
    splitmix(splitmix(seed ^ splitmix(portion as u64)) ^ repeat as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub base_prompt_metric: Option<f64>,
    pub percentile_75: f64,
    pub max_metric: f64,
    pub min_metric: f64,
    pub subsets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub portion: f64,
    pub labeled_rows: usize,
    /// `None` when every repeat failed.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Metric on all rows per successful repeat, in repeat order.
    pub values: Vec<f64>,
    /// Prompt evaluations (PEPR, random) or per-sample evaluations (SH) of
    /// the first successful repeat.
    pub budget_used: Option<usize>,
    pub failures: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub k: usize,
    pub n: usize,
    pub metric: Metric,
    pub max_elements: usize,
    pub repeats: usize,
    pub seed: u64,
    pub weights: BTreeMap<String, Vec<f64>>,
    pub references: References,
    pub cells: Vec<Cell>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportRecord<'a> {
    Header {
        format: &'static str,
        format_version: u32,
        k: usize,
        n: usize,
        metric: Metric,
        max_elements: usize,
        repeats: usize,
        seed: u64,
        weights: &'a BTreeMap<String, Vec<f64>>,
    },
    References(&'a References),
    Cell(&'a Cell),
}

impl EvaluationReport {
    pub fn cell(&self, method: &str, portion: f64) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.portion == portion)
    }

    /// One JSON record per line: header, references, then every cell.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: ReportRecord| {
            out.push_str(&serde_json::to_string(&r).expect("report serializes"));
            out.push('\n');
        };
        push(ReportRecord::Header {
            format: "pepr-report",
            format_version: 1,
            k: self.k,
            n: self.n,
            metric: self.metric,
            max_elements: self.max_elements,
            repeats: self.repeats,
            seed: self.seed,
            weights: &self.weights,
        });
        push(ReportRecord::References(&self.references));
        for c in &self.cells {
            push(ReportRecord::Cell(c));
        }
        out
    }

    /// Methods by portion as `mean ± std`, then the reference columns.
    pub fn table(&self) -> String {
        let mut portions: Vec<f64> = Vec::new();
        let mut methods: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !portions.contains(&c.portion) {
                portions.push(c.portion);
            }
            if !methods.contains(&c.method.as_str()) {
                methods.push(&c.method);
            }
        }
        let fmt = |v: Option<f64>| v.map_or("N/A".to_string(), |v| format!("{v:.2}"));
        let mut header = vec!["Method".to_string()];
        header.extend(portions.iter().map(|p| format!("{p}")));
        header.extend(["Base", "0.75", "Max"].map(String::from));
        let mut lines = vec![header];
        for m in &methods {
            let mut line = vec![m.to_string()];
            for &p in &portions {
                line.push(match self.cell(m, p) {
                    Some(Cell {
                        mean: Some(mu),
                        std: Some(sd),
                        ..
                    }) => format!("{mu:.2} ± {sd:.2}"),
                    _ => "N/A".into(),
                });
            }
            line.push(fmt(self.references.base_prompt_metric));
            line.push(fmt(Some(self.references.percentile_75)));
            line.push(fmt(Some(self.references.max_metric)));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| {
                lines
                    .iter()
                    .map(|l| l[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}", w = *w))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

/// A fitted PEPR variant: its dataset view and the map from input rows to
/// that view's rows.
struct Variant {
    name: &'static str,
    dataset: LogprobDataset,
    lambda: MixtureWeights,
    rows_per_input: usize,
}

fn fit_variants(config: &ExperimentConfig, dataset: &LogprobDataset) -> Result<Vec<Variant>> {
    let wanted = |m: RegressionMode| config.methods.is_empty() || config.methods.contains(&m);
    let mut out = Vec::new();
    match dataset.mode() {
        ScoreMode::Reference => {
            if wanted(RegressionMode::Reference) {
                let (rows, full) = dataset.stacked_candidates();
                let lambda = fit_unsupervised_reference(rows, full, config.solver)?;
                out.push(Variant {
                    name: RegressionMode::Reference.label(),
                    dataset: dataset.clone(),
                    lambda,
                    rows_per_input: 1,
                });
            }
            if wanted(RegressionMode::Preference) && dataset.candidate_count() >= 2 {
                let pref = dataset.to_preference()?;
                let problem = RegressionProblem::from_dataset(
                    &pref,
                    RegressionMode::Preference,
                    config.solver,
                )?;
                out.push(Variant {
                    name: RegressionMode::Preference.label(),
                    lambda: fit(&problem)?,
                    dataset: pref,
                    rows_per_input: dataset.candidate_count() - 1,
                });
            }
        }
        ScoreMode::Preference => {
            if wanted(RegressionMode::Preference) {
                let problem = RegressionProblem::from_dataset(
                    dataset,
                    RegressionMode::Preference,
                    config.solver,
                )?;
                out.push(Variant {
                    name: RegressionMode::Preference.label(),
                    lambda: fit(&problem)?,
                    dataset: dataset.clone(),
                    rows_per_input: 1,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(
            "no PEPR variant applies to this dataset".into(),
        ));
    }
    Ok(out)
}

/// Outcome of one method in one repeat: metric on all rows and budget.
type RepeatOutcome = Result<(f64, usize)>;

/// Runs the full protocol. Regression always uses every row; selection
/// sees only the labeled portion; chosen prompts are scored on all rows
/// against `truth`.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &LogprobDataset,
    truth: &dyn SubsetTruth,
    library: &PromptLibrary,
) -> Result<EvaluationReport> {
    config.validate()?;
    let (k, n) = (dataset.k(), dataset.n());
    if library.k() != k || truth.k() != k {
        return Err(Error::ShapeMismatch(format!(
            "library K = {}, truth K = {}, dataset K = {k}",
            library.k(),
            truth.k()
        )));
    }
    if truth.n() != n || truth.mode() != dataset.mode() {
        return Err(Error::ShapeMismatch(
            "truth source does not describe the dataset's rows".into(),
        ));
    }
    if config.max_elements > k {
        return Err(Error::InvalidInput(format!(
            "max_elements {} exceeds K = {k}",
            config.max_elements
        )));
    }
    let desired: Vec<usize> = match dataset.mode() {
        ScoreMode::Preference => vec![0; n],
        ScoreMode::Reference => (0..n)
            .map(|i| {
                dataset
                    .desired(i)
                    .ok_or_else(|| Error::InvalidInput(format!("row {i} has no desired label")))
            })
            .collect::<Result<_>>()?,
    };
    if dataset.mode() == ScoreMode::Reference && truth.columns() != dataset.candidate_count() {
        return Err(Error::ShapeMismatch(format!(
            "truth has {} columns for {} candidates",
            truth.columns(),
            dataset.candidate_count()
        )));
    }

    let table = CorrectnessTable::build(truth, &desired, config.metric, config.max_elements)?;
    let all_metrics: Vec<f64> = (0..table.subsets().len())
        .map(|i| table.metric(i, None))
        .collect();
    let references = References {
        base_prompt_metric: table.base_metric(None),
        percentile_75: stats::percentile(&all_metrics, 0.75),
        max_metric: all_metrics
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max),
        min_metric: all_metrics.iter().cloned().fold(f64::INFINITY, f64::min),
        subsets: all_metrics.len(),
    };

    let variants = fit_variants(config, dataset)?;
    let classes: Vec<Option<&str>> = (0..n).map(|i| dataset.class_of(i)).collect();
    let c = config.max_elements;

    let mut method_names: Vec<&str> = variants.iter().map(|v| v.name).collect();
    for b in &config.baselines {
        method_names.push(match b {
            Baseline::Random => "Random",
            Baseline::SuccessiveHalving => "SH",
        });
    }

    let mut cells = Vec::new();
    for (pi, &portion) in config.portions.iter().enumerate() {
        let m = portion_size(portion, n);
        let outcomes: Vec<Vec<RepeatOutcome>> = (0..config.repeats)
            .into_par_iter()
            .map(|r| {
                let seed = repeat_seed(config.seed, pi, r);
                let labeled = stratified_sample(&classes, m, seed);
                let eval_rows: Option<&[usize]> = match config.candidate_rows {
                    CandidateRows::LabeledPortion => Some(&labeled),
                    CandidateRows::AllRows => None,
                };
                let mut row = Vec::with_capacity(method_names.len());
                for v in &variants {
                    row.push(run_pepr(v, &labeled, eval_rows, &table, c));
                }
                for b in &config.baselines {
                    row.push(match b {
                        Baseline::Random => random_baseline(k, c, splitmix(seed ^ 1), |s| {
                            table
                                .subset_metric(s, Some(&labeled))
                                .unwrap_or(f64::NEG_INFINITY)
                        })
                        .map(|o| {
                            (
                                table
                                    .subset_metric(&o.best, None)
                                    .expect("sampled from table"),
                                o.evaluated.len(),
                            )
                        }),
                        Baseline::SuccessiveHalving => successive_halving_baseline(
                            table.subsets().len(),
                            &labeled,
                            (k + 1 + c) * labeled.len(),
                            splitmix(seed ^ 2),
                            |cand, row| f64::from(u8::from(table.correct(cand, row))),
                        )
                        .map(|o| (table.metric(o.winner, None), o.evaluations)),
                    });
                }
                row
            })
            .collect();
        for (mi, name) in method_names.iter().enumerate() {
            let mut values = Vec::new();
            let mut failures = Vec::new();
            let mut budget_used = None;
            for (r, per_method) in outcomes.iter().enumerate() {
                match &per_method[mi] {
                    Ok((v, b)) => {
                        values.push(*v);
                        budget_used.get_or_insert(*b);
                    }
                    Err(e) => failures.push((r, e.to_string())),
                }
            }
            let (mean, std) = if values.is_empty() {
                (None, None)
            } else {
                (Some(stats::mean(&values)), Some(stats::std_dev(&values)))
            };
            cells.push(Cell {
                method: name.to_string(),
                portion,
                labeled_rows: m,
                mean,
                std,
                values,
                budget_used,
                failures,
            });
        }
    }

    Ok(EvaluationReport {
        k,
        n,
        metric: config.metric,
        max_elements: c,
        repeats: config.repeats,
        seed: config.seed,
        weights: variants
            .iter()
            .map(|v| (v.name.to_string(), v.lambda.lambda().to_vec()))
            .collect(),
        references,
        cells,
    })
}

fn run_pepr(
    variant: &Variant,
    labeled: &[usize],
    eval_rows: Option<&[usize]>,
    table: &CorrectnessTable,
    c: usize,
) -> RepeatOutcome {
    let rows: Vec<usize> = labeled
        .iter()
        .flat_map(|&i| (0..variant.rows_per_input).map(move |j| i * variant.rows_per_input + j))
        .collect();
    let problem =
        SelectionProblem::from_dataset(&variant.dataset, variant.lambda.clone(), rows, c)?;
    let selection = select(&problem, |s| {
        table
            .subset_metric(s, eval_rows)
            .unwrap_or(f64::NEG_INFINITY)
    });
    let chosen = selection.chosen().ok_or_else(|| {
        let reasons: Vec<String> = selection
            .per_j
            .iter()
            .filter_map(|p| p.error.clone())
            .collect();
        Error::NumericalFailure(format!(
            "no cardinality produced a candidate: {}",
            reasons.join("; ")
        ))
    })?;
    let value = table
        .subset_metric(&chosen.indicator, None)
        .expect("candidates have at most c elements");
    Ok((value, selection.budget_used))
}
