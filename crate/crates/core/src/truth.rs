//! Observed scores of evaluated prompt combinations.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::{ScoreMode, SubsetIndicator};

/// `n x C` matrix of true scores for one prompt: one column per candidate
/// response in reference mode, a single margin column in preference mode.
pub type ScoreMatrix = Vec<Vec<f64>>;

/// Source of true scores for prompts built from library subsets.
pub trait SubsetTruth: Sync {
    fn mode(&self) -> ScoreMode;
    fn n(&self) -> usize;
    fn k(&self) -> usize;
    /// Columns of every [`ScoreMatrix`].
    fn columns(&self) -> usize;
    fn scores(&self, subset: &SubsetIndicator) -> Result<ScoreMatrix>;
    /// Scores of the base prompt with no library element, if known.
    fn base_scores(&self) -> Option<ScoreMatrix>;
}

/// Scores of the response a model is meant to produce: column `desired[i]`
/// of row `i` (column 0 when no desired labels exist).
pub fn desired_column(scores: &ScoreMatrix, desired: Option<&[usize]>) -> Vec<f64> {
    scores
        .iter()
        .enumerate()
        .map(|(i, row)| row[desired.map_or(0, |d| d[i])])
        .collect()
}

/// Ground truth held in memory, keyed by subset. The empty subset stands
/// for the base prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTable {
    mode: ScoreMode,
    k: usize,
    n: usize,
    columns: usize,
    entries: HashMap<SubsetIndicator, ScoreMatrix>,
    order: Vec<SubsetIndicator>,
}

impl TruthTable {
    pub fn new(mode: ScoreMode, k: usize, n: usize, columns: usize) -> Result<Self> {
        if k == 0 || columns == 0 {
            return Err(Error::InvalidInput(
                "truth table needs K >= 1 and C >= 1".into(),
            ));
        }
        if mode == ScoreMode::Preference && columns != 1 {
            return Err(Error::InvalidInput(
                "preference-mode truth has a single margin column".into(),
            ));
        }
        Ok(TruthTable {
            mode,
            k,
            n,
            columns,
            entries: HashMap::new(),
            order: Vec::new(),
        })
    }

    pub fn insert(&mut self, subset: SubsetIndicator, scores: ScoreMatrix) -> Result<()> {
        if subset.len() != self.k {
            return Err(Error::ShapeMismatch(format!(
                "subset has length {}, expected {}",
                subset.len(),
                self.k
            )));
        }
        if scores.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "truth for {subset} has {} rows, expected {}",
                scores.len(),
                self.n
            )));
        }
        for row in &scores {
            if row.len() != self.columns {
                return Err(Error::ShapeMismatch(format!(
                    "truth for {subset} has a row with {} columns, expected {}",
                    row.len(),
                    self.columns
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!("truth for {subset}")));
            }
        }
        if self.entries.insert(subset.clone(), scores).is_some() {
            return Err(Error::InvalidInput(format!("duplicate truth for {subset}")));
        }
        self.order.push(subset);
        Ok(())
    }

    /// Copies the scores of `subsets` (and the base prompt, if any) out of
    /// another truth source.
    pub fn capture<'a, T, I>(source: &T, subsets: I) -> Result<Self>
    where
        T: SubsetTruth + ?Sized,
        I: IntoIterator<Item = &'a SubsetIndicator>,
    {
        let mut table = TruthTable::new(source.mode(), source.k(), source.n(), source.columns())?;
        if let Some(base) = source.base_scores() {
            table.insert(SubsetIndicator::empty(source.k()), base)?;
        }
        for s in subsets {
            table.insert(s.clone(), source.scores(s)?)?;
        }
        Ok(table)
    }

    /// Subsets in insertion order, base prompt included.
    pub fn subsets(&self) -> &[SubsetIndicator] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, subset: &SubsetIndicator) -> Option<&ScoreMatrix> {
        self.entries.get(subset)
    }
}

impl SubsetTruth for TruthTable {
    fn mode(&self) -> ScoreMode {
        self.mode
    }

    fn n(&self) -> usize {
        self.n
    }

    fn k(&self) -> usize {
        self.k
    }

    fn columns(&self) -> usize {
        self.columns
    }

    fn scores(&self, subset: &SubsetIndicator) -> Result<ScoreMatrix> {
        self.entries
            .get(subset)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no ground truth for subset {subset}")))
    }

    fn base_scores(&self) -> Option<ScoreMatrix> {
        self.entries.get(&SubsetIndicator::empty(self.k)).cloned()
    }
}
