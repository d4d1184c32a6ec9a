use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use pepr_cli::acquire::{
    acquire_logprobs, acquire_truth, AcquisitionInput, HttpBackend, Journal, LogprobBackend,
    LogprobClientConfig, PromptAssembly, ScoreRequest, StubBackend, StubRecord,
};
use pepr_cli::AcquireError;
use pepr_core::subsets::enumerate_subsets;
use pepr_core::{PromptLibrary, SubsetIndicator, SubsetTruth};

fn config(url: &str) -> LogprobClientConfig {
    LogprobClientConfig {
        endpoint_url: url.into(),
        model_name: "test-model".into(),
        auth_token_env_var: "UNUSED".into(),
        request_timeout_secs: 5.0,
        max_retries: 3,
        role: "system".into(),
        prompt_assembly: PromptAssembly::default(),
        max_in_flight: 1,
        backoff_initial_ms: 1,
        backoff_max_ms: 2,
        per_token_normalized: false,
    }
}

fn library(k: usize) -> PromptLibrary {
    PromptLibrary::from_texts((0..k).map(|i| format!("rule {i}")), Some("base".into())).unwrap()
}

fn inputs(n: usize, c: usize) -> Vec<AcquisitionInput> {
    (0..n)
        .map(|i| AcquisitionInput {
            input: format!("input {i}"),
            candidates: (0..c).map(|j| format!("answer {j}")).collect(),
            desired: i % c,
            class: Some(format!("c{}", i % c)),
        })
        .collect()
}

/// Deterministic two-token responses for every subset of the library.
fn stub_records(lib: &PromptLibrary, xs: &[AcquisitionInput]) -> Vec<StubRecord> {
    let cfg = config("unused");
    let mut out = Vec::new();
    for s in enumerate_subsets(lib.k(), lib.k()).unwrap() {
        let prompt = cfg.assemble(lib, &s);
        for (i, x) in xs.iter().enumerate() {
            for (j, c) in x.candidates.iter().enumerate() {
                let seed = s.to_indices().iter().sum::<usize>() as f64;
                out.push(StubRecord {
                    prompt: prompt.clone(),
                    input: x.input.clone(),
                    completion: c.clone(),
                    token_logprobs: vec![-0.25 - 0.01 * seed, -0.5 * (1 + i + j) as f64],
                });
            }
        }
    }
    out
}

fn expected(records: &[StubRecord], prompt: &str, input: &str, completion: &str) -> f64 {
    records
        .iter()
        .find(|r| r.prompt == prompt && r.input == input && r.completion == completion)
        .map(|r| r.token_logprobs.iter().sum())
        .unwrap()
}

#[test]
fn dataset_matches_the_stub_table() {
    let (lib, xs) = (library(3), inputs(4, 2));
    let records = stub_records(&lib, &xs);
    let stub = StubBackend::new(stub_records(&lib, &xs));
    let cfg = config("unused");
    let (ds, stats) = acquire_logprobs(&cfg, &lib, &xs, &stub, None).unwrap();
    assert_eq!(stats.configurations, 4);
    assert_eq!(stub.calls(), 4 * 4 * 2);
    let full = cfg.assemble(&lib, &SubsetIndicator::full(3));
    let blocks = ds.candidates().unwrap();
    for (i, x) in xs.iter().enumerate() {
        for (j, c) in x.candidates.iter().enumerate() {
            for e in 0..3 {
                let p = cfg.assemble(&lib, &SubsetIndicator::singleton(3, e));
                assert_eq!(blocks[i][j].delta[e], expected(&records, &p, &x.input, c));
            }
            assert_eq!(blocks[i][j].full, expected(&records, &full, &x.input, c));
        }
        assert_eq!(ds.row(i), blocks[i][x.desired].delta.as_slice());
        assert_eq!(ds.desired(i), Some(x.desired));
    }
}

#[test]
fn per_token_normalization_divides_by_token_count() {
    let (lib, xs) = (library(2), inputs(2, 1));
    let stub = StubBackend::new(stub_records(&lib, &xs));
    let mut cfg = config("unused");
    let (raw, _) = acquire_logprobs(&cfg, &lib, &xs, &stub, None).unwrap();
    cfg.per_token_normalized = true;
    let (norm, _) = acquire_logprobs(&cfg, &lib, &xs, &stub, None).unwrap();
    assert!(norm.per_token_normalized());
    for i in 0..2 {
        assert_eq!(norm.row(i)[0], raw.row(i)[0] / 2.0);
        assert_eq!(norm.full_library()[i], raw.full_library()[i] / 2.0);
    }
}

#[test]
fn ten_elements_issue_eleven_configurations() {
    let (lib, xs) = (library(10), inputs(3, 2));
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let stub = StubBackend::new(stub_records(&lib, &xs));
    let cfg = config("unused");
    acquire_logprobs(&cfg, &lib, &xs, &stub, Some(&journal)).unwrap();
    assert_eq!(Journal::open(&journal).unwrap().configurations(), 11);

    // c = 3 selection candidates of size >= 2 bring the total to K + 1 + c
    let chosen = vec![
        SubsetIndicator::from_indices(10, &[1, 4]).unwrap(),
        SubsetIndicator::from_indices(10, &[1, 4, 7]).unwrap(),
        SubsetIndicator::from_indices(10, &[1, 4, 7, 9]).unwrap(),
    ];
    let (table, _) = acquire_truth(&cfg, &lib, &xs, &chosen, &stub, Some(&journal)).unwrap();
    assert_eq!(table.len(), 3);
    assert_eq!(
        Journal::open(&journal).unwrap().configurations(),
        10 + 1 + 3
    );
    assert_eq!(stub.calls(), (11 + 3) * 3 * 2);

    // a singleton candidate was already scored during regression
    let single = [SubsetIndicator::singleton(10, 1)];
    acquire_truth(&cfg, &lib, &xs, &single, &stub, Some(&journal)).unwrap();
    assert_eq!(stub.calls(), (11 + 3) * 3 * 2);
    let s = table.scores(&chosen[0]).unwrap();
    assert_eq!(s.len(), 3);
}

#[test]
fn interrupted_run_resumes_without_reissuing_cells() {
    let (lib, xs) = (library(4), inputs(5, 2));
    let total = 5 * 5 * 2;
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let cfg = config("unused");

    let flaky = StubBackend::new(stub_records(&lib, &xs)).failing_after(17);
    let err = acquire_logprobs(&cfg, &lib, &xs, &flaky, Some(&journal)).unwrap_err();
    match err {
        AcquireError::Incomplete {
            completed,
            total: t,
            ..
        } => {
            assert_eq!((completed, t), (17, total));
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(Journal::open(&journal).unwrap().len(), 17);

    let stub = StubBackend::new(stub_records(&lib, &xs));
    let (resumed, stats) = acquire_logprobs(&cfg, &lib, &xs, &stub, Some(&journal)).unwrap();
    assert_eq!(stub.calls(), total - 17);
    assert_eq!(stats.resumed, 17);

    let fresh = StubBackend::new(stub_records(&lib, &xs));
    let (once, _) = acquire_logprobs(&cfg, &lib, &xs, &fresh, None).unwrap();
    assert_eq!(resumed, once);
}

#[test]
fn parallel_workers_place_results_deterministically() {
    let (lib, xs) = (library(5), inputs(6, 3));
    let mut cfg = config("unused");
    let serial = acquire_logprobs(
        &cfg,
        &lib,
        &xs,
        &StubBackend::new(stub_records(&lib, &xs)),
        None,
    )
    .unwrap()
    .0;
    cfg.max_in_flight = 8;
    let parallel = acquire_logprobs(
        &cfg,
        &lib,
        &xs,
        &StubBackend::new(stub_records(&lib, &xs)),
        None,
    )
    .unwrap()
    .0;
    assert_eq!(serial, parallel);
}

/// Minimal HTTP/1.1 responder: answers each request with the next scripted
/// status (200 once the script runs out) and records what it received.
struct Server {
    url: String,
    seen: Arc<Mutex<Vec<(String, String)>>>,
}

fn serve(script: Vec<u16>, body: &'static str) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        let mut script = script.into_iter();
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut auth = String::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line["authorization:".len()..].trim().to_string();
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock()
                .unwrap()
                .push((auth, String::from_utf8(buf).unwrap()));
            let status = script.next().unwrap_or(200);
            let payload = if status == 200 { body } else { "{}" };
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    Server { url, seen }
}

const BODY: &str = r#"{"token_logprobs":[-0.5,-0.25]}"#;

#[test]
fn http_backend_sends_the_documented_request() {
    let server = serve(vec![], BODY);
    let backend = HttpBackend::with_token(&config(&server.url), "secret".into()).unwrap();
    let request = ScoreRequest {
        model: "test-model".into(),
        role: "system".into(),
        prompt: "base\nrule 0".into(),
        input: "hello".into(),
        completion: "world".into(),
    };
    let resp = backend.score(&request).unwrap();
    assert_eq!(resp.token_logprobs, vec![-0.5, -0.25]);
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen[0].0, "Bearer secret");
    let body: serde_json::Value = serde_json::from_str(&seen[0].1).unwrap();
    assert_eq!(body, serde_json::to_value(&request).unwrap());
}

#[test]
fn transient_failures_are_retried() {
    let server = serve(vec![503, 429], BODY);
    let cfg = config(&server.url);
    let backend = HttpBackend::with_token(&cfg, "t".into()).unwrap();
    let (ds, stats) = acquire_logprobs(&cfg, &library(1), &inputs(1, 1), &backend, None).unwrap();
    assert_eq!(ds.row(0), &[-0.75]);
    assert_eq!(stats.cells, 2);
    assert_eq!(stats.requests, 4);
    assert_eq!(server.seen.lock().unwrap().len(), 4);
}

#[test]
fn exhausted_retries_leave_the_run_incomplete() {
    let server = serve(vec![200, 500, 500, 500, 500], BODY);
    let cfg = config(&server.url);
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.jsonl");
    let backend = HttpBackend::with_token(&cfg, "t".into()).unwrap();
    let err =
        acquire_logprobs(&cfg, &library(1), &inputs(1, 1), &backend, Some(&journal)).unwrap_err();
    assert!(
        matches!(
            err,
            AcquireError::Incomplete {
                completed: 1,
                total: 2,
                ..
            }
        ),
        "{err}"
    );
    assert_eq!(Journal::open(&journal).unwrap().len(), 1);
}

#[test]
fn rejected_credentials_are_not_retried() {
    let server = serve(vec![401], BODY);
    let cfg = config(&server.url);
    let backend = HttpBackend::with_token(&cfg, "wrong".into()).unwrap();
    let err = acquire_logprobs(&cfg, &library(1), &inputs(1, 1), &backend, None).unwrap_err();
    assert!(matches!(err, AcquireError::Auth(_)), "{err}");
    assert_eq!(server.seen.lock().unwrap().len(), 1);
}
