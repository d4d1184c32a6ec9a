use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pepr_cli::{run_with, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};
use pepr_core::format::{load_dataset, load_weights};

fn pepr() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pepr"));
    // keep the caller's environment from leaking into precedence checks
    for (k, _) in std::env::vars() {
        if k.starts_with("PEPR_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("pepr").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

fn printed_lambda(stdout: &str) -> Vec<f64> {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("lambda = ["))
        .unwrap();
    line["lambda = [".len()..line.len() - 1]
        .split(", ")
        .map(|v| v.parse().unwrap())
        .collect()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let (code, _, err) = run(&[
            "simulate",
            "--k",
            "10",
            "--n",
            "100",
            "--seed",
            "7",
            "--output",
            p(out),
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.jsonl");
    run(&[
        "simulate",
        "--k",
        "10",
        "--n",
        "100",
        "--seed",
        "8",
        "--output",
        p(&c),
    ]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn regress_prints_the_generating_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, truth_w, fit_w) = (
        dir.path().join("d.jsonl"),
        dir.path().join("true.json"),
        dir.path().join("fit.json"),
    );
    let (code, _, _) = run(&[
        "simulate",
        "--k",
        "10",
        "--n",
        "100",
        "--seed",
        "3",
        "--output",
        p(&ds),
        "--lambda-output",
        p(&truth_w),
    ]);
    assert_eq!(code, EXIT_OK);
    let (code, stdout, err) = run(&["regress", "--dataset", p(&ds), "--output", p(&fit_w)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let (truth, _) = load_weights(&truth_w).unwrap();
    let printed = printed_lambda(&stdout);
    assert_eq!(printed.len(), 10);
    for (a, b) in printed.iter().zip(truth.lambda()) {
        assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
    }
    let (fitted, mode) = load_weights(&fit_w).unwrap();
    assert_eq!(mode.as_deref(), Some("PEPR-R"));
    for (a, b) in fitted.lambda().iter().zip(truth.lambda()) {
        assert!((a - b).abs() <= 1e-4);
    }
}

#[test]
fn select_reports_k_plus_one_plus_c_budget() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, w, report) = (
        dir.path().join("d.jsonl"),
        dir.path().join("w.json"),
        dir.path().join("sel.json"),
    );
    run(&[
        "simulate",
        "--k",
        "10",
        "--n",
        "60",
        "--seed",
        "1",
        "--output",
        p(&ds),
    ]);
    run(&["regress", "--dataset", p(&ds), "--output", p(&w)]);
    let (code, stdout, err) = run(&[
        "select",
        "--weights",
        p(&w),
        "--dataset",
        p(&ds),
        "--max-elements",
        "4",
        "--output",
        p(&report),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(stdout.contains("budget 15 prompts"), "{stdout}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["budget_used"], 15);
    assert_eq!(json["selection"]["per_j"].as_array().unwrap().len(), 4);
    assert_eq!(json["evaluator"], "predicted");
}

#[test]
fn select_and_evaluate_use_the_truth_table() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, truth, w, report) = (
        dir.path().join("d.jsonl"),
        dir.path().join("t.jsonl"),
        dir.path().join("w.json"),
        dir.path().join("r.jsonl"),
    );
    let (code, _, err) = run(&[
        "simulate",
        "--k",
        "6",
        "--n",
        "40",
        "--classes",
        "2",
        "--planted",
        "1,4",
        "--planted-margin",
        "3",
        "--seed",
        "5",
        "--output",
        p(&ds),
        "--truth-output",
        p(&truth),
        "--truth-max-elements",
        "3",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    run(&["regress", "--dataset", p(&ds), "--output", p(&w)]);
    let (code, stdout, _) = run(&[
        "select",
        "--weights",
        p(&w),
        "--dataset",
        p(&ds),
        "--max-elements",
        "3",
        "--truth",
        p(&truth),
        "--portion",
        "0.5",
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("budget 10 prompts"), "{stdout}");

    let (code, table, err) = run(&[
        "evaluate",
        "--dataset",
        p(&ds),
        "--truth",
        p(&truth),
        "--portions",
        "0.5,1",
        "--repeats",
        "3",
        "--max-elements",
        "3",
        "--output",
        p(&report),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(table.contains("PEPR-R") && table.contains("SH"));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text
        .lines()
        .next()
        .unwrap()
        .contains("\"record\":\"header\""));
    // header, references, then 4 methods at 2 portions
    assert_eq!(text.lines().count(), 2 + 4 * 2);
}

#[test]
fn predict_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, truth, w, diag) = (
        dir.path().join("d.jsonl"),
        dir.path().join("t.jsonl"),
        dir.path().join("w.json"),
        dir.path().join("p.json"),
    );
    run(&[
        "simulate",
        "--k",
        "5",
        "--n",
        "30",
        "--seed",
        "2",
        "--output",
        p(&ds),
        "--truth-output",
        p(&truth),
        "--truth-max-elements",
        "2",
    ]);
    run(&["regress", "--dataset", p(&ds), "--output", p(&w)]);
    let (code, _, err) = run(&[
        "predict",
        "--weights",
        p(&w),
        "--dataset",
        p(&ds),
        "--truth",
        p(&truth),
        "--subsets",
        "0,1;2,3;4",
        "--output",
        p(&diag),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&diag).unwrap()).unwrap();
    assert_eq!(
        json["subsets"].as_u64().unwrap() + json["skipped"].as_array().unwrap().len() as u64,
        3
    );
    assert!(json["diagnostics"]["pooled_mae"].as_f64().unwrap() < 1e-9);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--help"]).0, EXIT_OK);
    assert_eq!(run(&["simulate", "--help"]).0, EXIT_OK);
    assert_eq!(run(&["nonsense"]).0, EXIT_USAGE);
    assert_eq!(run(&["simulate", "--k", "ten"]).0, EXIT_USAGE);
    assert_eq!(
        run(&["simulate", "--k", "3"]).0,
        EXIT_USAGE,
        "missing --output"
    );
    assert_eq!(
        run(&[
            "evaluate",
            "--metric",
            "f1",
            "--dataset",
            "x",
            "--truth",
            "y"
        ])
        .0,
        EXIT_USAGE
    );
    assert_eq!(
        run(&["evaluate", "--dataset", "missing", "--truth", "y"]).0,
        EXIT_DATA
    );

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json\n").unwrap();
    let (code, _, err) = run(&[
        "regress",
        "--dataset",
        p(&bad),
        "--output",
        p(&dir.path().join("w")),
    ]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("line 1"), "{err}");

    let ds = dir.path().join("d.jsonl");
    run(&[
        "simulate",
        "--k",
        "8",
        "--n",
        "30",
        "--noise",
        "0.5",
        "--seed",
        "4",
        "--output",
        p(&ds),
    ]);
    let (code, _, err) = run(&[
        "regress",
        "--dataset",
        p(&ds),
        "--max-iterations",
        "1",
        "--tolerance",
        "0",
        "--output",
        p(&dir.path().join("w.json")),
    ]);
    assert_eq!(code, EXIT_NUMERICAL, "{err}");
}

#[test]
fn flags_beat_environment_beat_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("pepr.toml");
    std::fs::write(&config, "[simulate]\nk = 3\nn = 5\nseed = 9\n").unwrap();
    let header = |out: &Path| {
        let ds = load_dataset(out).unwrap();
        (ds.k(), ds.n())
    };

    let a = dir.path().join("a.jsonl");
    let o = pepr()
        .args(["simulate", "--config", p(&config), "--output", p(&a)])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(header(&a), (3, 5));

    let b = dir.path().join("b.jsonl");
    let o = pepr()
        .args(["simulate", "--config", p(&config), "--output", p(&b)])
        .env("PEPR_SIMULATE_N", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(header(&b), (3, 7));

    let c = dir.path().join("c.jsonl");
    let o = pepr()
        .args([
            "simulate",
            "--config",
            p(&config),
            "--k",
            "4",
            "--n",
            "6",
            "--output",
            p(&c),
        ])
        .env("PEPR_SIMULATE_N", "7")
        .env("PEPR_SIMULATE_K", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(header(&c), (4, 6));

    // the config path itself may come from the environment
    let d = dir.path().join("d.jsonl");
    let o = pepr()
        .args(["simulate", "--output", p(&d)])
        .env("PEPR_CONFIG", p(&config))
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&d).unwrap());

    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "[simulate]\nkay = 3\n").unwrap();
    let o = pepr()
        .args(["simulate", "--config", p(&broken), "--output", p(&d)])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}

fn acquire_sample(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.join("acquired.jsonl");
    pepr()
        .args([
            "acquire",
            "--client",
            p(&data("client.toml")),
            "--library",
            p(&data("library.json")),
            "--inputs",
            p(&data("inputs.jsonl")),
            "--output",
            p(&out),
        ])
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn acquire_replays_the_bundled_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let truth = dir.path().join("truth.jsonl");
    let o = acquire_sample(
        dir.path(),
        &[
            "--stub",
            p(&data("stub_fixture.jsonl")),
            "--journal",
            p(&journal),
            "--truth-subsets",
            "0,1;2,3",
            "--truth-output",
            p(&truth),
        ],
    );
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(
        stdout.contains("regression: 5 prompt configurations"),
        "{stdout}"
    );
    let ds = load_dataset(dir.path().join("acquired.jsonl")).unwrap();
    assert_eq!((ds.k(), ds.n(), ds.candidate_count()), (4, 3, 2));
    // 4 elements + full library + 2 candidates
    assert_eq!(
        pepr_cli::acquire::Journal::open(&journal)
            .unwrap()
            .configurations(),
        7
    );

    let again = acquire_sample(
        dir.path(),
        &[
            "--stub",
            p(&data("stub_fixture.jsonl")),
            "--journal",
            p(&journal),
        ],
    );
    assert!(String::from_utf8_lossy(&again.stdout).contains("(30 resumed, 0 requests)"));
}

#[test]
fn acquire_reads_the_token_from_the_environment_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = acquire_sample(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&o.stderr).contains("PEPR_ENDPOINT_TOKEN"));

    let config = dir.path().join("client.toml");
    let text = std::fs::read_to_string(data("client.toml")).unwrap();
    std::fs::write(&config, format!("{text}auth_token = \"inline\"\n")).unwrap();
    let o = pepr()
        .args([
            "acquire",
            "--client",
            p(&config),
            "--library",
            p(&data("library.json")),
            "--inputs",
            p(&data("inputs.jsonl")),
            "--output",
            p(&dir.path().join("x")),
        ])
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(EXIT_USAGE),
        "tokens are not accepted in config files"
    );
}
