use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Instant;

use dzlab::episode::Decision;
use dzlab::scenario::Phase;
use dzlab::session::client::Client;
use dzlab::session::{ClientMsg, ServerMsg};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dzlab"));
    c.env_remove("DZLAB_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, episodes: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("sim-{episodes}-{seed}"));
    ok(&[
        "simulate",
        "--episodes",
        &episodes.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    out
}

#[test]
fn zero_episodes_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), 0, 1);
    assert_eq!(std::fs::read_to_string(out.join("episodes.jsonl")).unwrap(), "");
    assert!(out.join("manifest.json").exists());
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["simulate", "--episodes", "3", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--variant", "bayes", "--episodes", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = run(&["train", "--variant", "logistic", "--episodes", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["exit_code"], 2);
}

#[test]
fn runtime_errors_emit_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"driver_id\":\n").unwrap();
    let out = run(&["report", "--episodes", s(&bad), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "parse");
}

#[test]
fn artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), 30, 9);
    let b = dir.path().join("again");
    ok(&["simulate", "--episodes", "30", "--seed", "9", "--out", s(&b)]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a.join("episodes.jsonl")), read(&b.join("episodes.jsonl")));

    let eps = a.join("episodes.jsonl");
    for run_dir in ["t1", "t2"] {
        ok(&[
            "train",
            "--variant",
            "generic",
            "--episodes",
            s(&eps),
            "--epochs",
            "2",
            "--seed",
            "4",
            "--out",
            s(&dir.path().join(run_dir)),
        ]);
    }
    for f in ["checkpoint.json", "loss_history.csv", "split.json"] {
        assert_eq!(read(&dir.path().join("t1").join(f)), read(&dir.path().join("t2").join(f)), "{f}");
    }
    let m1: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("t1/manifest.json"))).unwrap();
    let m2: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("t2/manifest.json"))).unwrap();
    assert_eq!(m1["config_sha256"], m2["config_sha256"]);
    assert_eq!(m1["inputs"], m2["inputs"]);
}

#[test]
fn config_file_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scenario": {"yellow_s": 4.0}}"#).unwrap();
    let out = dir.path().join("sim");
    let run = bin()
        .env("DZLAB_CONFIG", &cfg)
        .args(["simulate", "--episodes", "2", "--out", s(&out)])
        .output()
        .unwrap();
    assert!(run.status.success());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["scenario"]["yellow_s"], 4.0);
    let line = std::fs::read_to_string(out.join("episodes.jsonl")).unwrap();
    let ep: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(ep["scenario"]["timing"]["yellow_s"], 4.0);

    std::fs::write(&cfg, r#"{"scenario": {"yellow_s": -1.0}}"#).unwrap();
    let out = bin()
        .env("DZLAB_CONFIG", &cfg)
        .args(["simulate", "--episodes", "2", "--out", s(&dir.path().join("x"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_calibrated_personas() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cal.json");
    ok(&["sweep", "--episodes", "100", "--seed", "3", "--out", s(&out)]);
    let personas = dzlab::persona::load_personas(&out).unwrap();
    assert_eq!(personas.len(), 4);
    let sim = dir.path().join("sim");
    ok(&["simulate", "--personas", s(&out), "--episodes", "100", "--seed", "3", "--out", s(&sim)]);
    let eps: Vec<dzlab::episode::Episode> = dzlab::dataset::read_jsonl(&sim.join("episodes.jsonl")).unwrap();
    for (k, p) in personas.iter().enumerate() {
        let share = dzlab::persona::pof_go(&eps[k * 100..(k + 1) * 100]);
        assert!((share - p.target_pof_go.unwrap()).abs() <= 0.011, "{} {share}", p.name);
    }
}

#[test]
fn full_pipeline_smoke() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 200, 11);
    let eps = sim.join("episodes.jsonl");
    let mut ckpts = Vec::new();
    for variant in ["logistic", "generic", "personalized"] {
        let out = dir.path().join(variant);
        ok(&["train", "--variant", variant, "--episodes", s(&eps), "--epochs", "3", "--seed", "11", "--out", s(&out)]);
        assert!(out.join("manifest.json").exists());
        ckpts.push(out);
    }
    let ev = dir.path().join("eval");
    let mut args = vec!["eval", "--episodes", s(&eps), "--out", s(&ev), "--checkpoint"];
    args.extend(ckpts.iter().map(|p| s(p)));
    ok(&args);
    let rep = dir.path().join("report");
    let out = ok(&["report", "--episodes", s(&sim), "--eval", s(&ev), "--out", s(&rep)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("driver1") && text.contains("fleet"));
    for f in [
        "behavior.csv",
        "behavior.txt",
        "decision_timing.csv",
        "decision_timing.svg",
        "report.html",
        "accuracy.csv",
        "manifest.json",
    ] {
        assert!(rep.join(f).exists(), "{f}");
    }
    // The report's accuracy table is recomputed from the eval dump alone.
    assert_eq!(
        std::fs::read(ev.join("accuracy.csv")).unwrap(),
        std::fs::read(rep.join("accuracy.csv")).unwrap()
    );
    assert!(t0.elapsed().as_secs() < 300, "{:?}", t0.elapsed());
}

#[test]
fn collect_serves_fast_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let mut child = bin()
        .args(["collect", "--serve", "127.0.0.1:0", "--fast", "--store", s(&store)])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let mut c = Client::connect(addr.as_str()).unwrap();
    let first = c
        .request(&ClientMsg::Start {
            driver_id: "human1".into(),
            seed: Some(3),
            session_id: None,
        })
        .unwrap();
    assert!(matches!(first, ServerMsg::State { phase: Phase::Green, .. }));
    let mut decided = false;
    let summary = loop {
        let m = c.request(&ClientMsg::Control { throttle: 0.0, brake: if decided { 1.0 } else { 0.0 } }).unwrap();
        match m {
            ServerMsg::State { phase, .. } if phase != Phase::Green && !decided => {
                assert_eq!(c.request(&ClientMsg::Decision { choice: Decision::Stop }).unwrap(), ServerMsg::ack());
                decided = true;
            }
            ServerMsg::State { .. } => {}
            ServerMsg::Summary(s) => break s,
            other => panic!("{other:?}"),
        }
    };
    child.kill().unwrap();
    let _ = child.wait();
    assert!(summary.stored);
    let stored: Vec<dzlab::episode::Episode> = dzlab::dataset::read_jsonl(&store.join("human1.jsonl")).unwrap();
    assert_eq!(stored.len(), 1);
    assert_eq!(stored[0].decision, Decision::Stop);
    assert!(store.join("manifest.json").exists());
}
