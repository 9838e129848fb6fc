use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privatexr")).args(args).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn account_prints_one_json_line() {
    let out = cli(&["account", "--q", "0.02", "--sigma", "1.3", "--steps", "500", "--delta", "1e-5"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
    let v = json(&out);
    assert!((v["epsilon"].as_f64().unwrap() - 2.263531793353626).abs() < 1e-6);
    assert_eq!(v["alpha"], 10);
}

#[test]
fn account_solves_sigma() {
    let out = cli(&[
        "account", "--solve-sigma", "--epsilon", "1", "--delta", "1e-5", "--q", "0.05", "--steps", "400",
    ]);
    assert!(out.status.success());
    let v = json(&out);
    assert!((v["sigma"].as_f64().unwrap() - 5.059105374391691).abs() < 1e-3);
    assert!(v["epsilon"].as_f64().unwrap() <= 1.0);
}

#[test]
fn exit_codes() {
    // infeasible budget is a configuration problem
    let out = cli(&["account", "--q", "0.02", "--sigma", "1.3", "--steps", "5", "--delta", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = cli(&["pipeline", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = cli(&["synth", "--out", "/nonexistent-dir/x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let out = cli(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn synth_privatize_and_rda() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    write(Path::new(&p("synth.json")), r#"{"users": 4, "stimuli": 2, "frames_per_user_stimulus": 10, "dim": 8}"#);
    let out = cli(&["synth", "--config", &p("synth.json"), "--seed", "3", "--out", &p("d.csv"), "--manifest", &p("m.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    write(Path::new(&p("dp.json")), r#"{"mode": "selective", "selected": [1, 6], "level": "medium"}"#);
    let out = cli(&[
        "privatize", "--config", &p("dp.json"), "--data", &p("d.csv"), "--schema", &p("m.json"), "--out", &p("n.csv"),
        "--audit", &p("audit.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let audit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["selected"], serde_json::json!([1, 6]));
    assert_eq!(audit["per_feature_epsilon"], serde_json::json!([1.5, 1.5]));
    assert_eq!(audit["B"], 3.0);
    let raw = std::fs::read_to_string(p("d.csv")).unwrap();
    let noised = std::fs::read_to_string(p("n.csv")).unwrap();
    assert_eq!(raw.lines().count(), noised.lines().count());
    for (a, b) in raw.lines().zip(noised.lines()).skip(1) {
        let a: Vec<&str> = a.split(',').collect();
        let b: Vec<&str> = b.split(',').collect();
        // four metadata columns, then the features
        assert_eq!(a[..4], b[..4]);
        assert_eq!(a[4], b[4]);
        assert_ne!(a[5], b[5]);
        assert_eq!(a[6..10], b[6..10]);
        assert_ne!(a[10], b[10]);
    }

    write(Path::new(&p("rda.json")), r#"{"runs": 2}"#);
    let out = cli(&["attack", "rda", "--config", &p("rda.json"), "--data", &p("d.csv"), "--schema", &p("m.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["runs"], 2);
    let rate = v["rda_identification_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn privatize_needs_a_spec() {
    let out = cli(&["privatize", "--data", "x.csv", "--out", "y.csv"]);
    assert_eq!(out.status.code(), Some(2));
}
