//! Mixture-model prompt regression and prompt subset selection.
//!
//! A prompt library of `K` elements is modelled as a convex mixture: the
//! log-probability (or log-probability difference) of a response under any
//! combination of elements is predicted from the scores of the elements
//! alone, with weights fitted against the full library. Selection then
//! picks the combination maximizing the predicted objective under a
//! cardinality bound by solving a linear-fractional program.

pub mod error;
pub mod format;
pub mod harness;
pub mod lpsolve;
pub mod mixture;
pub mod regression;
pub mod selection;
pub mod stats;
pub mod subsets;
pub mod synth;
pub mod truth;
pub mod types;

pub use error::{Error, Result};
pub use harness::{
    run_experiment, Baseline, CandidateRows, EvaluationReport, ExperimentConfig, Metric,
};
pub use mixture::{bt_probability, predict_rows, predict_score, renormalize_weights};
pub use regression::{
    fit, fit_unsupervised_reference, predict_versus_true, PredictionDiagnostics, RegressionMode,
    RegressionProblem, SolverOptions,
};
pub use subsets::{enumerate_subsets, subset_count};
pub use synth::{generate, SynthConfig, SynthTruth, SyntheticInstance};
pub use truth::{ScoreMatrix, SubsetTruth, TruthTable};
pub use types::{
    BtConfig, CandidateScores, FitDiagnostics, LogprobDataset, MixtureWeights, PromptElement,
    PromptLibrary, RowLabel, ScoreMode, SubsetIndicator,
};
