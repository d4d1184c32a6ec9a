//! Log-probability acquisition from a scoring endpoint.
//!
//! Each request carries one assembled prompt, one input and one candidate
//! completion; the endpoint answers with per-token log-probabilities.
//! Completed cells are appended to a journal so an interrupted run resumes
//! without re-issuing them.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Duration;

use pepr_core::truth::TruthTable;
use pepr_core::{
    CandidateScores, LogprobDataset, PromptLibrary, RowLabel, ScoreMode, SubsetIndicator,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptAssembly {
    /// Overrides the library's own base prefix when set.
    #[serde(default)]
    pub base_prefix: Option<String>,
    #[serde(default = "default_joiner")]
    pub element_joiner: String,
}

fn default_joiner() -> String {
    "\n".into()
}

impl Default for PromptAssembly {
    fn default() -> Self {
        PromptAssembly {
            base_prefix: None,
            element_joiner: default_joiner(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogprobClientConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env_var: String,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Passed through verbatim; how it maps onto the model's chat roles is
    /// up to the endpoint.
    #[serde(default = "default_role")]
    pub role: String,
    #[serde(default)]
    pub prompt_assembly: PromptAssembly,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_backoff")]
    pub backoff_initial_ms: u64,
    #[serde(default = "default_backoff_max")]
    pub backoff_max_ms: u64,
    /// Divide each response's summed log-probability by its token count.
    #[serde(default)]
    pub per_token_normalized: bool,
}

fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    3
}
fn default_role() -> String {
    "system".into()
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff() -> u64 {
    250
}
fn default_backoff_max() -> u64 {
    8000
}

impl LogprobClientConfig {
    pub fn validate(&self) -> Result<(), AcquireError> {
        if !self.request_timeout_secs.is_finite() || self.request_timeout_secs <= 0.0 {
            return Err(AcquireError::Config(
                "request_timeout_secs must be > 0".into(),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(AcquireError::Config("max_in_flight must be >= 1".into()));
        }
        if self.auth_token_env_var.is_empty() {
            return Err(AcquireError::Config(
                "auth_token_env_var must name a variable".into(),
            ));
        }
        Ok(())
    }

    /// Prompt text for a library subset.
    pub fn assemble(&self, library: &PromptLibrary, subset: &SubsetIndicator) -> String {
        let prefix = self
            .prompt_assembly
            .base_prefix
            .as_deref()
            .or(library.base_prefix());
        let mut parts: Vec<&str> = prefix.into_iter().collect();
        parts.extend(
            subset
                .indices()
                .map(|k| library.elements()[k].text.as_str()),
        );
        parts.join(&self.prompt_assembly.element_joiner)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AcquireError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("acquisition incomplete: {completed} of {total} cells done ({last_error}); the journal keeps the progress")]
    Incomplete {
        completed: usize,
        total: usize,
        last_error: String,
    },
    #[error("invalid client configuration: {0}")]
    Config(String),
    #[error("invalid acquisition input: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] pepr_core::Error),
    #[error("journal i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One scoring request, serialized as the HTTP request body.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub model: String,
    pub role: String,
    pub prompt: String,
    pub input: String,
    pub completion: String,
}

/// Endpoint answer: log-probability of every completion token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendError {
    Transport { message: String, retryable: bool },
    Auth(String),
}

pub trait LogprobBackend: Sync {
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError>;
}

/// JSON-over-HTTP backend; the token is sent as `Authorization: Bearer`.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    token: String,
}

impl HttpBackend {
    /// Reads the token from the configured environment variable.
    pub fn from_config(config: &LogprobClientConfig) -> Result<Self, AcquireError> {
        config.validate()?;
        let token = std::env::var(&config.auth_token_env_var).map_err(|_| {
            AcquireError::Auth(format!(
                "environment variable {} is not set",
                config.auth_token_env_var
            ))
        })?;
        Self::with_token(config, token)
    }

    pub fn with_token(config: &LogprobClientConfig, token: String) -> Result<Self, AcquireError> {
        config.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.request_timeout_secs))
            .build();
        Ok(HttpBackend {
            agent,
            url: config.endpoint_url.clone(),
            token,
        })
    }
}

impl LogprobBackend for HttpBackend {
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        let result = self
            .agent
            .post(&self.url)
            .set("Authorization", &format!("Bearer {}", self.token))
            .send_json(request);
        match result {
            Ok(resp) => resp
                .into_json::<ScoreResponse>()
                .map_err(|e| BackendError::Transport {
                    message: format!("malformed response: {e}"),
                    retryable: false,
                }),
            Err(ureq::Error::Status(code @ (401 | 403), _)) => {
                Err(BackendError::Auth(format!("endpoint answered {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(BackendError::Transport {
                message: format!("endpoint answered {code}"),
                retryable: code == 429 || code >= 500,
            }),
            Err(ureq::Error::Transport(t)) => Err(BackendError::Transport {
                message: t.to_string(),
                retryable: true,
            }),
        }
    }
}

/// Replays recorded responses; unknown requests fail without retry.
pub struct StubBackend {
    table: HashMap<(String, String, String), Vec<f64>>,
    calls: AtomicUsize,
    fail_after: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StubRecord {
    pub prompt: String,
    pub input: String,
    pub completion: String,
    pub token_logprobs: Vec<f64>,
}

impl StubBackend {
    pub fn new(records: impl IntoIterator<Item = StubRecord>) -> Self {
        StubBackend {
            table: records
                .into_iter()
                .map(|r| ((r.prompt, r.input, r.completion), r.token_logprobs))
                .collect(),
            calls: AtomicUsize::new(0),
            fail_after: None,
        }
    }

    /// Fixture file: one [`StubRecord`] per line.
    pub fn from_fixture(path: &Path) -> Result<Self, AcquireError> {
        let text = std::fs::read_to_string(path)?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| AcquireError::Input(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<StubRecord>, _>>()?;
        Ok(Self::new(records))
    }

    /// Simulates a dropped connection after `n` successful calls.
    pub fn failing_after(mut self, n: usize) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LogprobBackend for StubBackend {
    fn score(&self, r: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        if let Some(limit) = self.fail_after {
            if self.calls.load(Ordering::SeqCst) >= limit {
                return Err(BackendError::Transport {
                    message: "stub connection dropped".into(),
                    retryable: false,
                });
            }
        }
        let key = (r.prompt.clone(), r.input.clone(), r.completion.clone());
        let found = self.table.get(&key).cloned();
        self.calls.fetch_add(1, Ordering::SeqCst);
        found
            .map(|token_logprobs| ScoreResponse { token_logprobs })
            .ok_or_else(|| BackendError::Transport {
                message: format!(
                    "no recorded response for input {:?} / {:?}",
                    r.input, r.completion
                ),
                retryable: false,
            })
    }
}

/// One input with its candidate completions; `desired` indexes the
/// reference completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionInput {
    pub input: String,
    pub candidates: Vec<String>,
    #[serde(default)]
    pub desired: usize,
    #[serde(default)]
    pub class: Option<String>,
}

pub fn read_inputs(path: &Path) -> Result<Vec<AcquisitionInput>, AcquireError> {
    let text = std::fs::read_to_string(path)?;
    let inputs: Vec<AcquisitionInput> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| AcquireError::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<_, _>>()?;
    check_inputs(&inputs)?;
    Ok(inputs)
}

fn check_inputs(inputs: &[AcquisitionInput]) -> Result<(), AcquireError> {
    let c = inputs.first().map_or(0, |i| i.candidates.len());
    if inputs.is_empty() || c == 0 {
        return Err(AcquireError::Input(
            "need at least one input with candidates".into(),
        ));
    }
    if c > pepr_core::format::MAX_CANDIDATES {
        return Err(AcquireError::Input(format!(
            "{c} candidates exceed the limit"
        )));
    }
    for (i, x) in inputs.iter().enumerate() {
        if x.candidates.len() != c {
            return Err(AcquireError::Input(format!(
                "input {i} has {} candidates, expected {c}",
                x.candidates.len()
            )));
        }
        if x.desired >= c {
            return Err(AcquireError::Input(format!(
                "input {i}: desired {} out of range",
                x.desired
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
struct CellKey {
    subset: SubsetIndicator,
    input: usize,
    candidate: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalEntry {
    #[serde(flatten)]
    key: CellKey,
    logprob: f64,
    tokens: usize,
}

/// Append-only record of completed cells.
pub struct Journal {
    path: PathBuf,
    done: HashMap<CellKey, f64>,
}

impl Journal {
    /// Loads existing entries; a torn final line from an interrupted write
    /// is ignored.
    pub fn open(path: &Path) -> Result<Self, AcquireError> {
        let mut done = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if let Ok(e) = serde_json::from_str::<JournalEntry>(&line) {
                    done.insert(e.key, e.logprob);
                }
            }
        }
        Ok(Journal {
            path: path.to_owned(),
            done,
        })
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    /// Distinct prompt configurations with at least one completed cell.
    pub fn configurations(&self) -> usize {
        let set: std::collections::HashSet<&SubsetIndicator> =
            self.done.keys().map(|k| &k.subset).collect();
        set.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AcquisitionStats {
    pub configurations: usize,
    pub cells: usize,
    pub requests: usize,
    pub resumed: usize,
}

fn backoff(config: &LogprobClientConfig, attempt: u32) -> Duration {
    let ms = config
        .backoff_initial_ms
        .saturating_mul(1u64 << attempt.min(20))
        .min(config.backoff_max_ms);
    Duration::from_millis(ms)
}

fn score_cell(
    config: &LogprobClientConfig,
    backend: &dyn LogprobBackend,
    request: &ScoreRequest,
    requests: &AtomicUsize,
) -> Result<(f64, usize), AcquireError> {
    let mut attempt = 0;
    loop {
        requests.fetch_add(1, Ordering::SeqCst);
        match backend.score(request) {
            Ok(resp) => {
                let tokens = resp.token_logprobs.len();
                if tokens == 0 {
                    return Err(AcquireError::Transport("response has no tokens".into()));
                }
                if resp.token_logprobs.iter().any(|v| !v.is_finite()) {
                    return Err(AcquireError::Transport(
                        "non-finite token log-probability".into(),
                    ));
                }
                let sum: f64 = resp.token_logprobs.iter().sum();
                let value = if config.per_token_normalized {
                    sum / tokens as f64
                } else {
                    sum
                };
                return Ok((value, tokens));
            }
            Err(BackendError::Auth(m)) => return Err(AcquireError::Auth(m)),
            Err(BackendError::Transport { message, retryable }) => {
                if !retryable || attempt >= config.max_retries {
                    return Err(AcquireError::Transport(message));
                }
                std::thread::sleep(backoff(config, attempt));
                attempt += 1;
            }
        }
    }
}

/// Scores every (configuration, input, candidate) cell, skipping cells the
/// journal already holds. Results are keyed by cell, so placement does not
/// depend on completion order.
fn acquire_cells(
    config: &LogprobClientConfig,
    library: &PromptLibrary,
    inputs: &[AcquisitionInput],
    configurations: &[SubsetIndicator],
    backend: &dyn LogprobBackend,
    journal: Option<&Path>,
) -> Result<(HashMap<CellKey, f64>, AcquisitionStats), AcquireError> {
    config.validate()?;
    check_inputs(inputs)?;
    let mut journal = journal.map(Journal::open).transpose()?;
    let mut values: HashMap<CellKey, f64> = HashMap::new();
    let mut pending = Vec::new();
    for subset in configurations {
        for (i, x) in inputs.iter().enumerate() {
            for c in 0..x.candidates.len() {
                let key = CellKey {
                    subset: subset.clone(),
                    input: i,
                    candidate: c,
                };
                match journal.as_ref().and_then(|j| j.done.get(&key)) {
                    Some(&v) => {
                        values.insert(key, v);
                    }
                    None => pending.push(key),
                }
            }
        }
    }
    let total = values.len() + pending.len();
    let resumed = values.len();
    let prompts: HashMap<&SubsetIndicator, String> = configurations
        .iter()
        .map(|s| (s, config.assemble(library, s)))
        .collect();

    let mut writer = match &journal {
        Some(j) => Some(OpenOptions::new().create(true).append(true).open(&j.path)?),
        None => None,
    };
    let requests = AtomicUsize::new(0);
    let queue = Mutex::new(pending.into_iter());
    let mut failure: Option<AcquireError> = None;
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(CellKey, Result<(f64, usize), AcquireError>)>();
        for _ in 0..config.max_in_flight {
            let tx = tx.clone();
            let (queue, prompts, requests) = (&queue, &prompts, &requests);
            scope.spawn(move || loop {
                let Some(key) = queue.lock().expect("queue lock").next() else {
                    break;
                };
                let x = &inputs[key.input];
                let request = ScoreRequest {
                    model: config.model_name.clone(),
                    role: config.role.clone(),
                    prompt: prompts[&key.subset].clone(),
                    input: x.input.clone(),
                    completion: x.candidates[key.candidate].clone(),
                };
                let result = score_cell(config, backend, &request, requests);
                let stop = result.is_err();
                if tx.send((key, result)).is_err() || stop {
                    break;
                }
            });
        }
        drop(tx);
        for (key, result) in rx {
            match result {
                Ok((v, tokens)) => {
                    if let Some(w) = writer.as_mut() {
                        let entry = JournalEntry {
                            key: key.clone(),
                            logprob: v,
                            tokens,
                        };
                        let line = serde_json::to_string(&entry).expect("journal entry serializes");
                        if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                            failure.get_or_insert(AcquireError::Io(e));
                        }
                    }
                    if let Some(j) = journal.as_mut() {
                        j.done.insert(key.clone(), v);
                    }
                    values.insert(key, v);
                }
                Err(e) => {
                    // stop handing out work; in-flight cells still land in the journal
                    queue.lock().expect("queue lock").by_ref().for_each(drop);
                    if matches!(e, AcquireError::Auth(_)) || failure.is_none() {
                        failure = Some(e);
                    }
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(match e {
            AcquireError::Auth(_) | AcquireError::Io(_) => e,
            other => AcquireError::Incomplete {
                completed: values.len(),
                total,
                last_error: other.to_string(),
            },
        });
    }
    let stats = AcquisitionStats {
        configurations: configurations.len(),
        cells: total,
        requests: requests.load(Ordering::SeqCst),
        resumed,
    };
    Ok((values, stats))
}

/// The `K + 1` regression configurations: each element alone, then the
/// full library.
pub fn regression_configurations(k: usize) -> Vec<SubsetIndicator> {
    let mut out: Vec<SubsetIndicator> = (0..k).map(|e| SubsetIndicator::singleton(k, e)).collect();
    out.push(SubsetIndicator::full(k));
    out
}

/// Builds a reference-mode dataset from the `K + 1` regression prompts.
/// With several candidates per input, every candidate gets a block and the
/// desired one supplies the main columns.
pub fn acquire_logprobs(
    config: &LogprobClientConfig,
    library: &PromptLibrary,
    inputs: &[AcquisitionInput],
    backend: &dyn LogprobBackend,
    journal: Option<&Path>,
) -> Result<(LogprobDataset, AcquisitionStats), AcquireError> {
    let k = library.k();
    let configurations = regression_configurations(k);
    let (values, stats) =
        acquire_cells(config, library, inputs, &configurations, backend, journal)?;
    let get = |s: &SubsetIndicator, i: usize, c: usize| {
        values[&CellKey {
            subset: s.clone(),
            input: i,
            candidate: c,
        }]
    };
    let full_set = &configurations[k];
    let blocks: Vec<Vec<CandidateScores>> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            (0..x.candidates.len())
                .map(|c| CandidateScores {
                    delta: configurations[..k].iter().map(|s| get(s, i, c)).collect(),
                    full: get(full_set, i, c),
                })
                .collect()
        })
        .collect();
    let delta = blocks
        .iter()
        .zip(inputs)
        .map(|(b, x)| b[x.desired].delta.clone())
        .collect();
    let full = blocks
        .iter()
        .zip(inputs)
        .map(|(b, x)| b[x.desired].full)
        .collect();
    let mut ds = LogprobDataset::with_k(
        ScoreMode::Reference,
        k,
        delta,
        full,
        config.per_token_normalized,
    )?;
    if inputs[0].candidates.len() > 1 {
        let labels = inputs
            .iter()
            .map(|x| RowLabel {
                desired: Some(x.desired),
                class: x.class.clone(),
            })
            .collect();
        ds = ds.with_labels(labels)?.with_candidates(blocks)?;
    } else if inputs.iter().any(|x| x.class.is_some()) {
        let labels = inputs
            .iter()
            .map(|x| RowLabel {
                desired: None,
                class: x.class.clone(),
            })
            .collect();
        ds = ds.with_labels(labels)?;
    }
    Ok((ds, stats))
}

/// Scores the given candidate subsets (for example the `c` prompts a
/// selection run proposes) as a truth table over every candidate.
pub fn acquire_truth(
    config: &LogprobClientConfig,
    library: &PromptLibrary,
    inputs: &[AcquisitionInput],
    subsets: &[SubsetIndicator],
    backend: &dyn LogprobBackend,
    journal: Option<&Path>,
) -> Result<(TruthTable, AcquisitionStats), AcquireError> {
    let (values, stats) = acquire_cells(config, library, inputs, subsets, backend, journal)?;
    let columns = inputs[0].candidates.len();
    let mut table = TruthTable::new(ScoreMode::Reference, library.k(), inputs.len(), columns)?;
    for s in subsets {
        let scores = (0..inputs.len())
            .map(|i| {
                (0..columns)
                    .map(|c| {
                        values[&CellKey {
                            subset: s.clone(),
                            input: i,
                            candidate: c,
                        }]
                    })
                    .collect()
            })
            .collect();
        table.insert(s.clone(), scores)?;
    }
    Ok((table, stats))
}
