//! Domain types shared by regression, selection and the harness.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which scalar a [`LogprobDataset`] carries per (input, element) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Log-probability of the reference response.
    Reference,
    /// Log-probability of the preferred response minus that of the other one.
    Preference,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreMode::Reference => f.write_str("reference"),
            ScoreMode::Preference => f.write_str("preference"),
        }
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(ScoreMode::Reference),
            "preference" => Ok(ScoreMode::Preference),
            other => Err(Error::InvalidInput(format!("unknown score mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptElement {
    pub id: usize,
    pub text: String,
}

/// An ordered library of `K` prompt elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLibrary {
    elements: Vec<PromptElement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_prefix: Option<String>,
}

impl PromptLibrary {
    pub fn new(elements: Vec<PromptElement>, base_prefix: Option<String>) -> Result<Self> {
        let lib = PromptLibrary {
            elements,
            base_prefix,
        };
        lib.validate()?;
        Ok(lib)
    }

    /// Builds a library from element texts, assigning ids `0..K` in order.
    pub fn from_texts<I, S>(texts: I, base_prefix: Option<String>) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let elements = texts
            .into_iter()
            .enumerate()
            .map(|(id, t)| PromptElement { id, text: t.into() })
            .collect();
        Self::new(elements, base_prefix)
    }

    /// Placeholder texts, for synthetic experiments where only `K` matters.
    pub fn anonymous(k: usize) -> Result<Self> {
        Self::from_texts((0..k).map(|i| format!("element {i}")), None)
    }

    pub fn validate(&self) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::InvalidInput(
                "prompt library must have K >= 1".into(),
            ));
        }
        for (i, e) in self.elements.iter().enumerate() {
            if e.id != i {
                return Err(Error::InvalidInput(format!(
                    "element ids must be exactly 0..K-1 in order; position {i} has id {}",
                    e.id
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[PromptElement] {
        &self.elements
    }

    pub fn base_prefix(&self) -> Option<&str> {
        self.base_prefix.as_deref()
    }

    /// Concatenates the selected elements under the base prefix.
    pub fn compose(&self, subset: &SubsetIndicator, joiner: &str) -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(subset.popcount() + 1);
        if let Some(p) = self.base_prefix.as_deref() {
            parts.push(p);
        }
        parts.extend(subset.indices().map(|k| self.elements[k].text.as_str()));
        parts.join(joiner)
    }
}

/// Fixed-length inclusion vector over the library elements.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubsetIndicator {
    bits: Vec<bool>,
}

impl SubsetIndicator {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        SubsetIndicator { bits }
    }

    pub fn from_indices(k: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; k];
        for &i in indices {
            if i >= k {
                return Err(Error::InvalidInput(format!(
                    "element index {i} out of range for K = {k}"
                )));
            }
            if bits[i] {
                return Err(Error::InvalidInput(format!("duplicate element index {i}")));
            }
            bits[i] = true;
        }
        Ok(SubsetIndicator { bits })
    }

    pub fn full(k: usize) -> Self {
        SubsetIndicator {
            bits: vec![true; k],
        }
    }

    pub fn empty(k: usize) -> Self {
        SubsetIndicator {
            bits: vec![false; k],
        }
    }

    pub fn singleton(k: usize, index: usize) -> Self {
        let mut bits = vec![false; k];
        bits[index] = true;
        SubsetIndicator { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn contains(&self, index: usize) -> bool {
        self.bits.get(index).copied().unwrap_or(false)
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn to_indices(&self) -> Vec<usize> {
        self.indices().collect()
    }
}

/// Serialized as a string of `0`/`1` characters, element 0 first.
impl Serialize for SubsetIndicator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let bits: String = self
            .bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        s.serialize_str(&bits)
    }
}

impl<'de> Deserialize<'de> for SubsetIndicator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(serde::de::Error::custom(format!(
                    "invalid indicator character `{other}`"
                ))),
            })
            .collect::<std::result::Result<Vec<bool>, _>>()
            .map(SubsetIndicator::from_bits)
    }
}

impl fmt::Display for SubsetIndicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (n, i) in self.indices().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            write!(f, "{i}")?;
        }
        f.write_str("}")
    }
}

/// Per-row label metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    /// Index of the desired response among the row's candidate blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desired: Option<usize>,
    /// Data class used for stratified subsampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

/// Element and full-library scores for one candidate response of a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    pub delta: Vec<f64>,
    pub full: f64,
}

/// Per-input element scores plus the full-library score.
///
/// `delta[i][k]` holds the score of input `i` under element `k` alone. In
/// reference mode, when candidate blocks are present, `delta[i]` and
/// `full_library[i]` are the block of the desired candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LogprobDataset {
    mode: ScoreMode,
    k: usize,
    delta: Vec<Vec<f64>>,
    full_library: Vec<f64>,
    per_token_normalized: bool,
    labels: Option<Vec<RowLabel>>,
    candidates: Option<Vec<Vec<CandidateScores>>>,
}

impl LogprobDataset {
    pub fn new(
        mode: ScoreMode,
        delta: Vec<Vec<f64>>,
        full_library: Vec<f64>,
        per_token_normalized: bool,
    ) -> Result<Self> {
        let k = delta.first().map(Vec::len).unwrap_or(0);
        Self::with_k(mode, k, delta, full_library, per_token_normalized)
    }

    /// Like [`LogprobDataset::new`] but with an explicit `K`, so that empty
    /// datasets keep their width.
    pub fn with_k(
        mode: ScoreMode,
        k: usize,
        delta: Vec<Vec<f64>>,
        full_library: Vec<f64>,
        per_token_normalized: bool,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("dataset must have K >= 1".into()));
        }
        if full_library.len() != delta.len() {
            return Err(Error::ShapeMismatch(format!(
                "full-library column has {} entries for {} rows",
                full_library.len(),
                delta.len()
            )));
        }
        for (i, row) in delta.iter().enumerate() {
            if row.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} element scores, expected {k}",
                    row.len()
                )));
            }
            check_scores(mode, row, i)?;
        }
        for (i, &v) in full_library.iter().enumerate() {
            check_scores(mode, &[v], i)?;
        }
        Ok(LogprobDataset {
            mode,
            k,
            delta,
            full_library,
            per_token_normalized,
            labels: None,
            candidates: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<RowLabel>) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                self.n()
            )));
        }
        self.labels = Some(labels);
        self.check_desired()?;
        Ok(self)
    }

    /// Attaches per-row candidate blocks (reference mode only).
    pub fn with_candidates(mut self, candidates: Vec<Vec<CandidateScores>>) -> Result<Self> {
        if self.mode != ScoreMode::Reference {
            return Err(Error::InvalidInput(
                "candidate blocks are only defined for reference-mode datasets".into(),
            ));
        }
        if candidates.len() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "{} candidate groups for {} rows",
                candidates.len(),
                self.n()
            )));
        }
        let c = candidates.first().map(Vec::len).unwrap_or(0);
        if c == 0 {
            return Err(Error::InvalidInput(
                "candidate groups must be non-empty".into(),
            ));
        }
        for (i, group) in candidates.iter().enumerate() {
            if group.len() != c {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} candidates, expected {c}",
                    group.len()
                )));
            }
            for cand in group {
                if cand.delta.len() != self.k {
                    return Err(Error::ShapeMismatch(format!(
                        "row {i} candidate has {} element scores, expected {}",
                        cand.delta.len(),
                        self.k
                    )));
                }
                check_scores(self.mode, &cand.delta, i)?;
                check_scores(self.mode, &[cand.full], i)?;
            }
        }
        self.candidates = Some(candidates);
        self.check_desired()?;
        Ok(self)
    }

    fn check_desired(&self) -> Result<()> {
        let (Some(labels), Some(cands)) = (&self.labels, &self.candidates) else {
            return Ok(());
        };
        for (i, (label, group)) in labels.iter().zip(cands).enumerate() {
            let Some(d) = label.desired else {
                return Err(Error::InvalidInput(format!(
                    "row {i} has candidate blocks but no desired label"
                )));
            };
            let Some(block) = group.get(d) else {
                return Err(Error::InvalidInput(format!(
                    "row {i} desired candidate {d} out of range"
                )));
            };
            if block.delta != self.delta[i] || block.full != self.full_library[i] {
                return Err(Error::InvalidInput(format!(
                    "row {i} element scores differ from its desired candidate block"
                )));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> ScoreMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.delta.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn delta(&self) -> &[Vec<f64>] {
        &self.delta
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.delta[i]
    }

    pub fn full_library(&self) -> &[f64] {
        &self.full_library
    }

    pub fn per_token_normalized(&self) -> bool {
        self.per_token_normalized
    }

    pub fn labels(&self) -> Option<&[RowLabel]> {
        self.labels.as_deref()
    }

    pub fn candidates(&self) -> Option<&[Vec<CandidateScores>]> {
        self.candidates.as_deref()
    }

    /// Number of candidate responses per row; 1 when no blocks are attached.
    pub fn candidate_count(&self) -> usize {
        self.candidates
            .as_ref()
            .and_then(|c| c.first())
            .map_or(1, Vec::len)
    }

    pub fn desired(&self, row: usize) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l[row].desired)
    }

    pub fn class_of(&self, row: usize) -> Option<&str> {
        self.labels.as_ref().and_then(|l| l[row].class.as_deref())
    }

    /// Every candidate block stacked row-major, as `(delta rows, full column)`.
    /// Without candidate blocks this is the dataset's own rows.
    pub fn stacked_candidates(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        match &self.candidates {
            None => (self.delta.clone(), self.full_library.clone()),
            Some(groups) => groups
                .iter()
                .flatten()
                .map(|c| (c.delta.clone(), c.full))
                .unzip(),
        }
    }

    /// Preference view of a labeled reference dataset with candidate blocks:
    /// one row per (input, non-desired candidate), scores are desired minus
    /// other. Row `i` of the input maps to rows `i*(C-1)..(i+1)*(C-1)`.
    pub fn to_preference(&self) -> Result<LogprobDataset> {
        let Some(groups) = &self.candidates else {
            return Err(Error::InvalidInput(
                "preference view requires candidate blocks".into(),
            ));
        };
        if groups.first().map_or(0, Vec::len) < 2 {
            return Err(Error::InvalidInput(
                "preference view requires at least two candidates per row".into(),
            ));
        }
        let mut delta = Vec::new();
        let mut full = Vec::new();
        let mut labels = Vec::new();
        for (i, group) in groups.iter().enumerate() {
            let d = self
                .desired(i)
                .ok_or_else(|| Error::InvalidInput(format!("row {i} has no desired label")))?;
            for (c, other) in group.iter().enumerate() {
                if c == d {
                    continue;
                }
                delta.push(
                    group[d]
                        .delta
                        .iter()
                        .zip(&other.delta)
                        .map(|(a, b)| a - b)
                        .collect(),
                );
                full.push(group[d].full - other.full);
                labels.push(RowLabel {
                    desired: None,
                    class: self.class_of(i).map(str::to_owned),
                });
            }
        }
        LogprobDataset::with_k(
            ScoreMode::Preference,
            self.k,
            delta,
            full,
            self.per_token_normalized,
        )?
        .with_labels(labels)
    }

    /// Restriction to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<LogprobDataset> {
        for &r in rows {
            if r >= self.n() {
                return Err(Error::InvalidInput(format!("row {r} out of range")));
            }
        }
        Ok(LogprobDataset {
            mode: self.mode,
            k: self.k,
            delta: rows.iter().map(|&r| self.delta[r].clone()).collect(),
            full_library: rows.iter().map(|&r| self.full_library[r]).collect(),
            per_token_normalized: self.per_token_normalized,
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r].clone()).collect()),
            candidates: self
                .candidates
                .as_ref()
                .map(|c| rows.iter().map(|&r| c[r].clone()).collect()),
        })
    }
}

fn check_scores(mode: ScoreMode, values: &[f64], row: usize) -> Result<()> {
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput(format!("row {row} contains {v}")));
        }
        if mode == ScoreMode::Reference && v > 0.0 {
            return Err(Error::InvalidInput(format!(
                "row {row}: reference-mode log-probability {v} is positive"
            )));
        }
    }
    Ok(())
}

/// Goodness of fit of mixture weights against the full-library column.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub sse: f64,
    pub mae: f64,
    /// `None` when either fitted or observed values have zero variance.
    pub pearson_r: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Gram matrix is numerically singular, so the weights are not unique.
    pub non_unique: bool,
}

/// Simplex weights measuring each element's share of the full-library score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    lambda: Vec<f64>,
    #[serde(default)]
    pub diagnostics: FitDiagnostics,
}

pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

impl MixtureWeights {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        Self::with_diagnostics(lambda, FitDiagnostics::default())
    }

    pub fn with_diagnostics(lambda: Vec<f64>, diagnostics: FitDiagnostics) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::InvalidInput(
                "mixture weights must have K >= 1".into(),
            ));
        }
        if let Some(v) = lambda.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "mixture weight {v} is negative or non-finite"
            )));
        }
        let sum: f64 = lambda.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "mixture weights sum to {sum}, not 1"
            )));
        }
        Ok(MixtureWeights {
            lambda,
            diagnostics,
        })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }
}

/// Bradley-Terry temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtConfig {
    beta: f64,
}

impl BtConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "beta must be positive, got {beta}"
            )));
        }
        Ok(BtConfig { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for BtConfig {
    fn default() -> Self {
        BtConfig { beta: 1.0 }
    }
}
