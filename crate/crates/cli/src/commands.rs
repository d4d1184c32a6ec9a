use std::io::Write;
use std::path::Path;

use anyhow::Context;
use pepr_core::format::{
    dataset_to_string, load_dataset, load_truth, load_weights, save_truth, weights_to_string,
};
use pepr_core::harness::{portion_size, stratified_sample, CorrectnessTable};
use pepr_core::selection::{fractional_objective, rewards_from_rows, select, SelectionProblem};
use pepr_core::subsets::enumerate_subsets;
use pepr_core::truth::desired_column;
use pepr_core::{
    fit, fit_unsupervised_reference, generate, predict_versus_true, run_experiment, Baseline,
    CandidateRows, ExperimentConfig, LogprobDataset, Metric, MixtureWeights, PromptLibrary,
    RegressionMode, RegressionProblem, ScoreMode, SolverOptions, SubsetIndicator, SubsetTruth,
    SynthConfig, TruthTable,
};
use serde::Serialize;

use crate::acquire::{
    acquire_logprobs, acquire_truth, read_inputs, HttpBackend, LogprobBackend, LogprobClientConfig,
    StubBackend,
};
use crate::args::{
    required, AcquireArgs, EvaluateArgs, PredictArgs, RegressArgs, SelectArgs, SimulateArgs,
};
use crate::CliError;

type Out<'a> = &'a mut dyn Write;

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(CliError::Other)
}

fn emit(out: Out, path: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_file(p, contents),
        None => out
            .write_all(contents.as_bytes())
            .map_err(|e| CliError::Other(e.into())),
    }
}

fn say(out: Out, line: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::Other(e.into()))
}

fn parse_mode(s: &str) -> Result<ScoreMode, CliError> {
    s.parse()
        .map_err(|_| CliError::Usage(format!("unknown mode `{s}`")))
}

fn parse_method(s: &str) -> Result<RegressionMode, CliError> {
    match s.to_ascii_uppercase().replace('_', "-").as_str() {
        "PEPR-R" | "R" | "REFERENCE" => Ok(RegressionMode::Reference),
        "PEPR-P" | "P" | "PREFERENCE" => Ok(RegressionMode::Preference),
        _ => Err(CliError::Usage(format!(
            "unknown method `{s}`; expected PEPR-R or PEPR-P"
        ))),
    }
}

fn parse_metric(s: &str) -> Result<Metric, CliError> {
    match s {
        "accuracy" => Ok(Metric::Accuracy),
        "top1_accuracy" | "top1" => Ok(Metric::Top1Accuracy),
        _ => Err(CliError::Usage(format!(
            "unknown metric `{s}`; expected accuracy or top1_accuracy"
        ))),
    }
}

fn parse_baselines(v: &[String]) -> Result<Vec<Baseline>, CliError> {
    let mut out = Vec::new();
    for s in v {
        match s.as_str() {
            "none" => {}
            "random" => out.push(Baseline::Random),
            "successive_halving" | "sh" => out.push(Baseline::SuccessiveHalving),
            _ => return Err(CliError::Usage(format!("unknown baseline `{s}`"))),
        }
    }
    Ok(out)
}

fn parse_candidate_rows(s: &str) -> Result<CandidateRows, CliError> {
    match s {
        "labeled_portion" => Ok(CandidateRows::LabeledPortion),
        "all_rows" => Ok(CandidateRows::AllRows),
        _ => Err(CliError::Usage(format!("unknown candidate_rows `{s}`"))),
    }
}

/// `0,1;2;3,4` to indicators over `k` elements.
pub fn parse_subsets(text: &str, k: usize) -> Result<Vec<SubsetIndicator>, CliError> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|part| {
            let idx = part
                .split(',')
                .map(|t| {
                    t.trim().parse::<usize>().map_err(|_| {
                        CliError::Usage(format!("bad element index `{t}` in `{part}`"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            SubsetIndicator::from_indices(k, &idx).map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect()
}

pub fn load_library(path: &Path) -> Result<PromptLibrary, CliError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read library {}", path.display()))
        .map_err(CliError::Other)?;
    let lib: PromptLibrary = serde_json::from_str(&text)
        .with_context(|| format!("invalid library {}", path.display()))
        .map_err(CliError::Other)?;
    lib.validate()?;
    Ok(lib)
}

fn lambda_line(w: &MixtureWeights) -> String {
    let parts: Vec<String> = w.lambda().iter().map(|l| format!("{l:.6}")).collect();
    format!("lambda = [{}]", parts.join(", "))
}

pub fn simulate(a: SimulateArgs, out: Out) -> Result<(), CliError> {
    let output = required(a.output, "output")?;
    let mode = parse_mode(a.mode.as_deref().unwrap_or("reference"))?;
    let k = a.k.unwrap_or(10);
    let mut cfg = SynthConfig::new(k, a.n.unwrap_or(100), mode, a.seed.unwrap_or(0));
    cfg.candidate_classes = a.classes.unwrap_or(1);
    cfg.noise_std = a.noise.unwrap_or(0.0);
    cfg.coupling_strength = a.coupling.unwrap_or(0.0);
    cfg.planted = a.planted.unwrap_or_default();
    cfg.planted_margin = a.planted_margin.unwrap_or(0.0);
    cfg.true_lambda = a.lambda;
    let inst = generate(&cfg)?;
    write_file(&output, &dataset_to_string(&inst.dataset)?)?;
    say(
        out,
        format!(
            "wrote {} rows with k = {k} to {}",
            inst.dataset.n(),
            output.display()
        ),
    )?;
    say(out, lambda_line(inst.truth.true_lambda()))?;
    if let Some(path) = a.lambda_output {
        write_file(&path, &weights_to_string(inst.truth.true_lambda(), None)?)?;
    }
    if let Some(path) = a.truth_output {
        let c = a.truth_max_elements.unwrap_or(k.min(4));
        let subsets: Vec<SubsetIndicator> = enumerate_subsets(k, c)?.collect();
        let table = TruthTable::capture(&inst.truth, &subsets)?;
        save_truth(&table, &path)?;
        say(
            out,
            format!(
                "wrote truth for {} subsets to {}",
                table.len(),
                path.display()
            ),
        )?;
    }
    Ok(())
}

/// The dataset view a regression mode works on, and how many of its rows
/// belong to each input.
fn regression_view(
    dataset: &LogprobDataset,
    method: RegressionMode,
) -> Result<(LogprobDataset, usize), CliError> {
    match (dataset.mode(), method) {
        (ScoreMode::Preference, RegressionMode::Preference) => Ok((dataset.clone(), 1)),
        (ScoreMode::Reference, RegressionMode::Reference) => Ok((dataset.clone(), 1)),
        (ScoreMode::Reference, RegressionMode::Preference) if dataset.candidate_count() >= 2 => {
            Ok((dataset.to_preference()?, dataset.candidate_count() - 1))
        }
        (ScoreMode::Reference, RegressionMode::Preference) => Err(CliError::Usage(
            "PEPR-P on a reference dataset needs at least two candidates per input".into(),
        )),
        (ScoreMode::Preference, RegressionMode::Reference) => {
            Err(CliError::Usage("PEPR-R needs a reference dataset".into()))
        }
    }
}

pub fn regress(a: RegressArgs, out: Out) -> Result<(), CliError> {
    let dataset = load_dataset(required(a.dataset, "dataset")?)?;
    let output = required(a.output, "output")?;
    let method = match a.method {
        Some(m) => parse_method(&m)?,
        None => RegressionMode::for_scores(dataset.mode()),
    };
    let defaults = SolverOptions::default();
    let options = SolverOptions {
        max_iterations: a.max_iterations.unwrap_or(defaults.max_iterations),
        convergence_tolerance: a.tolerance.unwrap_or(defaults.convergence_tolerance),
        seed: a.seed.unwrap_or(0),
    };
    let weights = match method {
        // every candidate output enters the unsupervised fit
        RegressionMode::Reference if dataset.mode() == ScoreMode::Reference => {
            let (rows, full) = dataset.stacked_candidates();
            fit_unsupervised_reference(rows, full, options)?
        }
        _ => {
            let (view, _) = regression_view(&dataset, method)?;
            fit(&RegressionProblem::from_dataset(&view, method, options)?)?
        }
    };
    write_file(&output, &weights_to_string(&weights, Some(method.label()))?)?;
    let d = &weights.diagnostics;
    say(out, format!("method = {}", method.label()))?;
    say(out, lambda_line(&weights))?;
    say(
        out,
        format!(
            "sse = {:.6e}  mae = {:.6e}  r = {}  iterations = {}  converged = {}",
            d.sse,
            d.mae,
            d.pearson_r.map_or("n/a".into(), |r| format!("{r:.6}")),
            d.iterations,
            d.converged
        ),
    )?;
    if d.non_unique {
        say(
            out,
            "note: the design is rank deficient; the weights are one of several optima",
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictReport {
    subsets: usize,
    skipped: Vec<SubsetIndicator>,
    diagnostics: pepr_core::PredictionDiagnostics,
}

pub fn predict(a: PredictArgs, out: Out) -> Result<(), CliError> {
    let (weights, _) = load_weights(required(a.weights, "weights")?)?;
    let dataset = load_dataset(required(a.dataset, "dataset")?)?;
    let truth = load_truth(required(a.truth, "truth")?)?;
    if weights.k() != dataset.k() || truth.k() != dataset.k() || truth.n() != dataset.n() {
        return Err(pepr_core::Error::ShapeMismatch(
            "weights, dataset and truth table disagree on k or n".into(),
        )
        .into());
    }
    let requested = match &a.subsets {
        Some(s) => parse_subsets(s, dataset.k())?,
        None => truth
            .subsets()
            .iter()
            .filter(|s| !s.is_empty())
            .cloned()
            .collect(),
    };
    let desired: Option<Vec<usize>> = (dataset.mode() == ScoreMode::Reference).then(|| {
        (0..dataset.n())
            .map(|i| dataset.desired(i).unwrap_or(0))
            .collect()
    });
    let (mut kept, mut skipped, mut observed) = (Vec::new(), Vec::new(), Vec::new());
    for s in requested {
        if !s.indices().any(|i| weights.lambda()[i] > 0.0) {
            skipped.push(s);
            continue;
        }
        let scores = truth.scores(&s)?;
        observed.push(desired_column(&scores, desired.as_deref()));
        kept.push(s);
    }
    let diagnostics = predict_versus_true(&dataset, &weights, &kept, &observed)?;
    for g in &diagnostics.groups {
        writeln!(
            out,
            "size {}: {} subsets  mae = {:.6}  r = {}",
            g.size,
            g.subsets,
            g.mae,
            g.pearson_r.map_or("n/a".into(), |r| format!("{r:.4}"))
        )
        .map_err(|e| CliError::Other(e.into()))?;
    }
    if !skipped.is_empty() {
        say(
            out,
            format!("skipped {} subsets with no weighted element", skipped.len()),
        )?;
    }
    let report = PredictReport {
        subsets: kept.len(),
        skipped,
        diagnostics,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.into()))? + "\n";
    emit(out, a.output.as_deref(), &json)
}

#[derive(Serialize)]
struct SelectReport {
    k: usize,
    max_elements: usize,
    method: String,
    evaluator: &'static str,
    labeled_rows: usize,
    chosen: Option<Vec<usize>>,
    chosen_evaluation: Option<f64>,
    budget_used: usize,
    selection: pepr_core::selection::SubsetSelection,
}

pub fn select_cmd(a: SelectArgs, out: Out) -> Result<(), CliError> {
    let (weights, mode) = load_weights(required(a.weights, "weights")?)?;
    let dataset = load_dataset(required(a.dataset, "dataset")?)?;
    let k = dataset.k();
    let c = a.max_elements.unwrap_or(k.min(4));
    let method = match mode.as_deref() {
        Some(m) => parse_method(m)?,
        None => RegressionMode::for_scores(dataset.mode()),
    };
    let (view, per_input) = regression_view(&dataset, method)?;
    let n = dataset.n();
    let portion = a.portion.unwrap_or(1.0);
    if !(portion > 0.0 && portion <= 1.0) {
        return Err(CliError::Usage(format!(
            "portion must be in (0, 1], got {portion}"
        )));
    }
    let classes: Vec<Option<&str>> = (0..n).map(|i| dataset.class_of(i)).collect();
    let labeled = stratified_sample(&classes, portion_size(portion, n), a.seed.unwrap_or(0));
    let rows: Vec<usize> = labeled
        .iter()
        .flat_map(|&i| (0..per_input).map(move |j| i * per_input + j))
        .collect();
    let problem = SelectionProblem::from_dataset(&view, weights.clone(), rows.clone(), c)?;

    let (evaluator, selection) = match &a.truth {
        Some(path) => {
            let truth = load_truth(path)?;
            let metric = parse_metric(a.metric.as_deref().unwrap_or("top1_accuracy"))?;
            let desired: Vec<usize> = (0..n).map(|i| dataset.desired(i).unwrap_or(0)).collect();
            let table = CorrectnessTable::build(&truth, &desired, metric, c)?;
            let sel = select(&problem, |s| {
                table
                    .subset_metric(s, Some(&labeled))
                    .unwrap_or(f64::NEG_INFINITY)
            });
            ("truth", sel)
        }
        None => {
            let rewards = rewards_from_rows(&view, &rows)?;
            let sel = select(&problem, |s| {
                fractional_objective(&weights, &rewards, s).unwrap_or(f64::NEG_INFINITY)
            });
            ("predicted", sel)
        }
    };
    let chosen = selection.chosen().map(|c| c.indicator.to_indices());
    if chosen.is_none() {
        let reasons: Vec<String> = selection
            .per_j
            .iter()
            .filter_map(|p| p.error.clone())
            .collect();
        return Err(pepr_core::Error::NumericalFailure(format!(
            "no cardinality produced a candidate: {}",
            reasons.join("; ")
        ))
        .into());
    }
    for p in &selection.per_j {
        match (&p.candidate, &p.error) {
            (Some(cand), _) => say(
                out,
                format!(
                    "j = {}: {}  predicted {:.6}  evaluation {:.6}{}",
                    p.j,
                    cand.indicator,
                    cand.predicted_objective,
                    p.evaluation.unwrap_or(f64::NAN),
                    if cand.tie == Some(true) {
                        "  (tied optimum)"
                    } else {
                        ""
                    }
                ),
            )?,
            (None, Some(e)) => say(out, format!("j = {}: failed: {e}", p.j))?,
            (None, None) => {}
        }
    }
    let chosen_set = selection
        .chosen()
        .map(|c| c.indicator.to_string())
        .unwrap_or_default();
    say(
        out,
        format!(
            "chosen {chosen_set}  budget {} prompts",
            selection.budget_used
        ),
    )?;
    let report = SelectReport {
        k,
        max_elements: c,
        method: method.label().into(),
        evaluator,
        labeled_rows: labeled.len(),
        chosen,
        chosen_evaluation: selection.chosen_evaluation(),
        budget_used: selection.budget_used,
        selection,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.into()))? + "\n";
    if let Some(p) = a.output {
        write_file(&p, &json)?;
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs, out: Out) -> Result<(), CliError> {
    let dataset_path = required(a.dataset, "dataset")?;
    let truth_path = required(a.truth, "truth")?;
    let defaults = ExperimentConfig::default();
    let config = ExperimentConfig {
        portions: a.portions.unwrap_or(defaults.portions),
        repeats: a.repeats.unwrap_or(defaults.repeats),
        seed: a.seed.unwrap_or(defaults.seed),
        max_elements: a.max_elements.unwrap_or(defaults.max_elements),
        baselines: match &a.baselines {
            Some(b) => parse_baselines(b)?,
            None => defaults.baselines,
        },
        metric: match &a.metric {
            Some(m) => parse_metric(m)?,
            None => defaults.metric,
        },
        methods: match &a.methods {
            Some(m) => m
                .iter()
                .map(|s| parse_method(s))
                .collect::<Result<_, _>>()?,
            None => defaults.methods,
        },
        candidate_rows: match &a.candidate_rows {
            Some(s) => parse_candidate_rows(s)?,
            None => defaults.candidate_rows,
        },
        solver: defaults.solver,
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dataset = load_dataset(dataset_path)?;
    let truth = load_truth(truth_path)?;
    let library = match &a.library {
        Some(p) => load_library(p)?,
        None => PromptLibrary::anonymous(dataset.k())?,
    };
    let report = run_experiment(&config, &dataset, &truth, &library)?;
    out.write_all(report.table().as_bytes())
        .map_err(|e| CliError::Other(e.into()))?;
    if let Some(p) = a.output {
        write_file(&p, &report.to_jsonl())?;
    }
    Ok(())
}

pub fn acquire(a: AcquireArgs, out: Out) -> Result<(), CliError> {
    let client_path = required(a.client, "client")?;
    let text = std::fs::read_to_string(&client_path).map_err(|e| {
        CliError::Usage(format!(
            "cannot read client config {}: {e}",
            client_path.display()
        ))
    })?;
    let client: LogprobClientConfig = toml::from_str(&text).map_err(|e| {
        CliError::Usage(format!(
            "invalid client config {}: {e}",
            client_path.display()
        ))
    })?;
    client
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let library = load_library(&required(a.library, "library")?)?;
    let inputs = read_inputs(&required(a.inputs, "inputs")?)?;
    let output = required(a.output, "output")?;
    let truth_subsets = match &a.truth_subsets {
        Some(s) => Some((
            parse_subsets(s, library.k())?,
            required(a.truth_output.clone(), "truth-output")?,
        )),
        None => None,
    };
    let backend: Box<dyn LogprobBackend> = match &a.stub {
        Some(p) => Box::new(StubBackend::from_fixture(p)?),
        None => Box::new(HttpBackend::from_config(&client)?),
    };
    let journal = a.journal.as_deref();
    let (dataset, stats) = acquire_logprobs(&client, &library, &inputs, backend.as_ref(), journal)?;
    write_file(&output, &dataset_to_string(&dataset)?)?;
    say(
        out,
        format!(
            "regression: {} prompt configurations, {} cells ({} resumed, {} requests)",
            stats.configurations, stats.cells, stats.resumed, stats.requests
        ),
    )?;
    if let Some((subsets, path)) = truth_subsets {
        let (table, stats) = acquire_truth(
            &client,
            &library,
            &inputs,
            &subsets,
            backend.as_ref(),
            journal,
        )?;
        save_truth(&table, &path)?;
        say(
            out,
            format!(
                "truth: {} prompt configurations, {} cells ({} resumed, {} requests)",
                stats.configurations, stats.cells, stats.resumed, stats.requests
            ),
        )?;
    }
    say(out, format!("wrote {}", output.display()))
}
