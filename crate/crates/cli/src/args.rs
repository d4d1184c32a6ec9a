//! Command-line surface and configuration layering.
//!
//! Every option is optional at parse time so that a value can come from,
//! in order of precedence, the flag, its `PEPR_*` environment variable, or
//! the subcommand's section of the `--config` TOML file. Built-in defaults
//! apply last, in the command implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "pepr",
    version,
    about = "Prompt mixture regression and prompt subset selection"
)]
pub struct Cli {
    /// TOML file with one table per subcommand (`[simulate]`, `[regress]`, ...).
    #[arg(long, global = true, env = "PEPR_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known mixture weights.
    Simulate(SimulateArgs),
    /// Fit mixture weights and write a weights file.
    Regress(RegressArgs),
    /// Compare predicted and observed scores of prompt subsets.
    Predict(PredictArgs),
    /// Choose a prompt subset under a cardinality bound.
    Select(SelectArgs),
    /// Run the repeated evaluation protocol against a truth table.
    Evaluate(EvaluateArgs),
    /// Collect log-probabilities from a scoring endpoint.
    Acquire(AcquireArgs),
}

/// Fills every unset field from a lower-precedence layer.
pub trait Layered: Sized {
    fn layer(self, lower: Self) -> Self;
}

macro_rules! layered {
    ($t:ty { $($f:ident),* $(,)? }) => {
        impl Layered for $t {
            fn layer(self, lower: Self) -> Self {
                Self { $($f: self.$f.or(lower.$f)),* }
            }
        }
    };
}

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// Number of prompt elements [default: 10]
    #[arg(long, env = "PEPR_SIMULATE_K")]
    pub k: Option<usize>,
    /// Number of inputs [default: 100]
    #[arg(long, env = "PEPR_SIMULATE_N")]
    pub n: Option<usize>,
    /// `reference` or `preference` [default: reference]
    #[arg(long, env = "PEPR_SIMULATE_MODE")]
    pub mode: Option<String>,
    /// Candidate outputs per input in reference mode [default: 1]
    #[arg(long, env = "PEPR_SIMULATE_CLASSES")]
    pub classes: Option<usize>,
    /// Standard deviation of the noise on the full-library column [default: 0]
    #[arg(long, env = "PEPR_SIMULATE_NOISE")]
    pub noise: Option<f64>,
    /// Strength of pairwise element interactions [default: 0]
    #[arg(long, env = "PEPR_SIMULATE_COUPLING")]
    pub coupling: Option<f64>,
    /// Elements that favour the desired output, comma separated
    #[arg(long, value_delimiter = ',', env = "PEPR_SIMULATE_PLANTED")]
    pub planted: Option<Vec<usize>>,
    /// Score advantage of planted elements [default: 0]
    #[arg(long, env = "PEPR_SIMULATE_PLANTED_MARGIN")]
    pub planted_margin: Option<f64>,
    /// True mixture weights, comma separated [default: random]
    #[arg(long, value_delimiter = ',', env = "PEPR_SIMULATE_LAMBDA")]
    pub lambda: Option<Vec<f64>>,
    /// Also write a truth table covering every subset up to this size
    #[arg(long, env = "PEPR_SIMULATE_TRUTH_OUTPUT")]
    pub truth_output: Option<PathBuf>,
    /// Largest subset stored in the truth table [default: min(4, k)]
    #[arg(long, env = "PEPR_SIMULATE_TRUTH_MAX_ELEMENTS")]
    pub truth_max_elements: Option<usize>,
    /// Write the generating weights as a weights file
    #[arg(long, env = "PEPR_SIMULATE_LAMBDA_OUTPUT")]
    pub lambda_output: Option<PathBuf>,
    /// [default: 0]
    #[arg(long, env = "PEPR_SIMULATE_SEED")]
    pub seed: Option<u64>,
    /// Dataset file to write
    #[arg(long, env = "PEPR_SIMULATE_OUTPUT")]
    pub output: Option<PathBuf>,
}

layered!(SimulateArgs {
    k,
    n,
    mode,
    classes,
    noise,
    coupling,
    planted,
    planted_margin,
    lambda,
    truth_output,
    truth_max_elements,
    lambda_output,
    seed,
    output,
});

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressArgs {
    #[arg(long, env = "PEPR_REGRESS_DATASET")]
    pub dataset: Option<PathBuf>,
    /// `PEPR-R` or `PEPR-P` [default: from the dataset mode]
    #[arg(long, env = "PEPR_REGRESS_METHOD")]
    pub method: Option<String>,
    /// [default: 50000]
    #[arg(long, env = "PEPR_REGRESS_MAX_ITERATIONS")]
    pub max_iterations: Option<usize>,
    /// Stopping threshold on the objective decrease [default: 1e-10]
    #[arg(long, env = "PEPR_REGRESS_TOLERANCE")]
    pub tolerance: Option<f64>,
    /// Recorded with the solver options [default: 0]
    #[arg(long, env = "PEPR_REGRESS_SEED")]
    pub seed: Option<u64>,
    /// Weights file to write
    #[arg(long, env = "PEPR_REGRESS_OUTPUT")]
    pub output: Option<PathBuf>,
}

layered!(RegressArgs {
    dataset,
    method,
    max_iterations,
    tolerance,
    seed,
    output
});

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictArgs {
    #[arg(long, env = "PEPR_PREDICT_WEIGHTS")]
    pub weights: Option<PathBuf>,
    #[arg(long, env = "PEPR_PREDICT_DATASET")]
    pub dataset: Option<PathBuf>,
    /// Truth table with the observed scores
    #[arg(long, env = "PEPR_PREDICT_TRUTH")]
    pub truth: Option<PathBuf>,
    /// Subsets as `0,1;2;3,4` [default: every non-empty subset in the truth table]
    #[arg(long, env = "PEPR_PREDICT_SUBSETS")]
    pub subsets: Option<String>,
    /// Accepted for uniformity; prediction draws no random numbers
    #[arg(long, env = "PEPR_PREDICT_SEED")]
    pub seed: Option<u64>,
    /// Diagnostics file [default: stdout]
    #[arg(long, env = "PEPR_PREDICT_OUTPUT")]
    pub output: Option<PathBuf>,
}

layered!(PredictArgs {
    weights,
    dataset,
    truth,
    subsets,
    seed,
    output
});

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectArgs {
    #[arg(long, env = "PEPR_SELECT_WEIGHTS")]
    pub weights: Option<PathBuf>,
    #[arg(long, env = "PEPR_SELECT_DATASET")]
    pub dataset: Option<PathBuf>,
    /// Cardinality bound c [default: min(4, k)]
    #[arg(long, env = "PEPR_SELECT_MAX_ELEMENTS")]
    pub max_elements: Option<usize>,
    /// Fraction of inputs treated as labeled, sampled per class [default: 1]
    #[arg(long, env = "PEPR_SELECT_PORTION")]
    pub portion: Option<f64>,
    /// Score candidates with this truth table instead of the predicted objective
    #[arg(long, env = "PEPR_SELECT_TRUTH")]
    pub truth: Option<PathBuf>,
    /// `accuracy` or `top1_accuracy` when scoring with a truth table [default: top1_accuracy]
    #[arg(long, env = "PEPR_SELECT_METRIC")]
    pub metric: Option<String>,
    /// Seed of the labeled-row sample [default: 0]
    #[arg(long, env = "PEPR_SELECT_SEED")]
    pub seed: Option<u64>,
    /// JSON report file; a summary is always printed
    #[arg(long, env = "PEPR_SELECT_OUTPUT")]
    pub output: Option<PathBuf>,
}

layered!(SelectArgs {
    weights,
    dataset,
    max_elements,
    portion,
    truth,
    metric,
    seed,
    output
});

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long, env = "PEPR_EVALUATE_DATASET")]
    pub dataset: Option<PathBuf>,
    #[arg(long, env = "PEPR_EVALUATE_TRUTH")]
    pub truth: Option<PathBuf>,
    /// Prompt library JSON [default: placeholder texts]
    #[arg(long, env = "PEPR_EVALUATE_LIBRARY")]
    pub library: Option<PathBuf>,
    /// Labeled portions, comma separated [default: 0.05,0.25,0.5,1]
    #[arg(long, value_delimiter = ',', env = "PEPR_EVALUATE_PORTIONS")]
    pub portions: Option<Vec<f64>>,
    /// [default: 1000]
    #[arg(long, env = "PEPR_EVALUATE_REPEATS")]
    pub repeats: Option<usize>,
    /// [default: 4]
    #[arg(long, env = "PEPR_EVALUATE_MAX_ELEMENTS")]
    pub max_elements: Option<usize>,
    /// [default: top1_accuracy]
    #[arg(long, env = "PEPR_EVALUATE_METRIC")]
    pub metric: Option<String>,
    /// Comma separated from `random`, `successive_halving`; `none` for neither
    #[arg(long, value_delimiter = ',', env = "PEPR_EVALUATE_BASELINES")]
    pub baselines: Option<Vec<String>>,
    /// Comma separated from `PEPR-R`, `PEPR-P` [default: every applicable]
    #[arg(long, value_delimiter = ',', env = "PEPR_EVALUATE_METHODS")]
    pub methods: Option<Vec<String>>,
    /// `labeled_portion` or `all_rows` [default: labeled_portion]
    #[arg(long, env = "PEPR_EVALUATE_CANDIDATE_ROWS")]
    pub candidate_rows: Option<String>,
    /// [default: 0]
    #[arg(long, env = "PEPR_EVALUATE_SEED")]
    pub seed: Option<u64>,
    /// JSON-lines report [default: none, table only]
    #[arg(long, env = "PEPR_EVALUATE_OUTPUT")]
    pub output: Option<PathBuf>,
}

layered!(EvaluateArgs {
    dataset,
    truth,
    library,
    portions,
    repeats,
    max_elements,
    metric,
    baselines,
    methods,
    candidate_rows,
    seed,
    output,
});

#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquireArgs {
    /// Client configuration TOML (endpoint, model, token variable, ...)
    #[arg(long, env = "PEPR_ACQUIRE_CLIENT")]
    pub client: Option<PathBuf>,
    /// Prompt library JSON
    #[arg(long, env = "PEPR_ACQUIRE_LIBRARY")]
    pub library: Option<PathBuf>,
    /// JSON lines of `{input, candidates, desired?, class?}`
    #[arg(long, env = "PEPR_ACQUIRE_INPUTS")]
    pub inputs: Option<PathBuf>,
    /// Journal of completed cells, appended to and resumed from
    #[arg(long, env = "PEPR_ACQUIRE_JOURNAL")]
    pub journal: Option<PathBuf>,
    /// Replay responses from a fixture instead of calling the endpoint
    #[arg(long, env = "PEPR_ACQUIRE_STUB")]
    pub stub: Option<PathBuf>,
    /// Also score these subsets (`0,1;2`) into a truth table
    #[arg(long, env = "PEPR_ACQUIRE_TRUTH_SUBSETS")]
    pub truth_subsets: Option<String>,
    #[arg(long, env = "PEPR_ACQUIRE_TRUTH_OUTPUT")]
    pub truth_output: Option<PathBuf>,
    /// Accepted for uniformity; acquisition draws no random numbers
    #[arg(long, env = "PEPR_ACQUIRE_SEED")]
    pub seed: Option<u64>,
    /// Dataset file to write
    #[arg(long, env = "PEPR_ACQUIRE_OUTPUT")]
    pub output: Option<PathBuf>,
}

layered!(AcquireArgs {
    client,
    library,
    inputs,
    journal,
    stub,
    truth_subsets,
    truth_output,
    seed,
    output,
});

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub simulate: SimulateArgs,
    pub regress: RegressArgs,
    pub predict: PredictArgs,
    pub select: SelectArgs,
    pub evaluate: EvaluateArgs,
    pub acquire: AcquireArgs,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Flags and environment first, then the config file.
pub fn resolve(cli: Cli) -> Result<Command, CliError> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    Ok(match cli.command {
        Command::Simulate(a) => Command::Simulate(a.layer(file.simulate)),
        Command::Regress(a) => Command::Regress(a.layer(file.regress)),
        Command::Predict(a) => Command::Predict(a.layer(file.predict)),
        Command::Select(a) => Command::Select(a.layer(file.select)),
        Command::Evaluate(a) => Command::Evaluate(a.layer(file.evaluate)),
        Command::Acquire(a) => Command::Acquire(a.layer(file.acquire)),
    })
}

pub fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file() {
        let flag = SimulateArgs {
            k: Some(3),
            ..Default::default()
        };
        let file: ConfigFile = toml::from_str("[simulate]\nk = 8\nn = 20\n").unwrap();
        let merged = flag.layer(file.simulate);
        assert_eq!((merged.k, merged.n), (Some(3), Some(20)));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ConfigFile>("[simulate]\nkk = 8\n").is_err());
        assert!(toml::from_str::<ConfigFile>("[other]\n").is_err());
    }
}
