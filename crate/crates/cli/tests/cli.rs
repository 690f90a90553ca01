use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn evomd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evomd"))
        .current_dir(dir)
        .env_remove("EVOMD_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = evomd(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn uniform(lo: u64, hi: u64) -> Value {
    let p = 1.0 / (hi - lo + 1) as f64;
    Value::Array((lo..=hi).map(|d| json!([d, p])).collect())
}

fn write_network(dir: &Path) -> PathBuf {
    let network = json!({
        "id": "cli",
        "species": ["MoO", "MoOS2", "MoS", "MoS2"],
        "transition": [
            [0.0, 0.6, 0.2, 0.2],
            [0.1, 0.0, 0.7, 0.2],
            [0.2, 0.1, 0.0, 0.7],
            [0.5, 0.3, 0.2, 0.0]
        ],
        "durations": [
            {"pmf": uniform(8, 30)},
            {"pmf": uniform(10, 40)},
            {"pmf": uniform(12, 25)},
            {"pmf": uniform(10, 20)}
        ],
        "d_max": 500
    });
    let path = dir.join("network.json");
    fs::write(&path, serde_json::to_string_pretty(&network).unwrap()).unwrap();
    path
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn templates_lists_six_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["templates"]);
    assert_eq!(out.lines().count(), 6);
    assert!(out.contains("17950d7616895decc8742fe756227e531438760840b6373d867d0deb593f7549  system"));
}

#[test]
fn frames_round_trip_through_extract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_network(d);
    let sim = ["simulate", "--network", "network.json", "--trajectories", "3", "--events-per", "40", "--seed", "5"];
    ok(d, &[&sim[..], &["--out", "frames.jsonl"]].concat());
    ok(d, &[&sim[..], &["--out", "generated_events.jsonl"]].concat());
    let manifest = ok(d, &["ingest", "--frames", "frames.jsonl", "--out", "traj.json"]);
    assert_eq!(manifest.lines().count(), 3);
    ok(d, &["--threads", "1", "extract", "--frames", "frames.jsonl", "--out", "events.jsonl"]);
    let hub: Vec<Value> = lines(&d.join("events.jsonl"))
        .into_iter()
        .filter(|e| e["lineage_id"] == 0)
        .collect();
    assert_eq!(hub, lines(&d.join("generated_events.jsonl")));
}

#[test]
fn stage_commands_chain_into_a_scored_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_network(d);
    ok(d, &["simulate", "--network", "network.json", "--trajectories", "6", "--events-per", "80", "--out", "events.jsonl"]);
    let stats = ok(d, &["filter", "--events", "events.jsonl", "--out", "filtered.jsonl", "--stats", "stats.json"]);
    assert!(stats.contains("Raw MD"));
    ok(d, &["balance", "--events", "filtered.jsonl", "--cap", "50", "--out", "balanced.jsonl"]);
    ok(d, &["windows", "--events", "balanced.jsonl", "--task", "forward1", "--out", "windows.jsonl"]);
    ok(d, &["split", "--samples", "windows.jsonl", "--test-frac", "0.3", "--out", "split.jsonl"]);
    ok(d, &["format", "--samples", "split.jsonl", "--out", "dataset.jsonl"]);
    ok(d, &["baseline", "fit", "--samples", "split.jsonl", "--kind", "markov", "--order", "1", "--out", "model.json"]);
    ok(d, &["baseline", "predict", "--model", "model.json", "--samples", "split.jsonl", "--task", "forward_1", "--out", "pred.jsonl"]);
    let summary = ok(d, &["eval", "--task", "forward_1", "--pred", "pred.jsonl", "--truth", "dataset.jsonl", "--out-dir", "eval"]);
    assert!(summary.contains("missing rate  0.00%"), "{summary}");
    for f in ["report.json", "confusion.csv", "nstep_decay.csv", "error_taxonomy.csv", "summary.txt"] {
        assert!(d.join("eval").join(f).exists(), "{f}");
    }

    let qa: String = (0..100)
        .map(|k| format!("{{\"system\":\"s\",\"instruction\":\"q{k}\",\"output\":\"a{k}\"}}\n"))
        .collect();
    fs::write(d.join("qa.jsonl"), qa).unwrap();
    let forecast = lines(&d.join("dataset.jsonl")).len();
    ok(d, &["mix", "--dataset", "dataset.jsonl", "--qa", "qa.jsonl", "--ratio", "0.5", "--out", "mixed.jsonl"]);
    let expected = forecast + (0.5 * forecast as f64).round() as usize;
    assert_eq!(lines(&d.join("mixed.jsonl")).len(), expected);
}

#[test]
fn seed_env_is_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_network(d);
    let run = |seed: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_evomd"));
        cmd.current_dir(d).env_remove("EVOMD_SEED");
        if let Some(s) = seed {
            cmd.env("EVOMD_SEED", s);
        }
        let status = cmd
            .args(["simulate", "--network", "network.json", "--trajectories", "2", "--events-per", "30", "--out", out])
            .output()
            .unwrap();
        assert!(status.status.success());
        fs::read(d.join(out)).unwrap()
    };
    let a = run(Some("9"), "a_events.jsonl");
    let b = run(Some("9"), "b_events.jsonl");
    let c = run(Some("10"), "c_events.jsonl");
    let default = run(None, "d_events.jsonl");
    let explicit = ok(d, &["simulate", "--network", "network.json", "--trajectories", "2", "--events-per", "30", "--seed", "3407", "--out", "e_events.jsonl"]);
    assert!(!explicit.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(default, fs::read(d.join("e_events.jsonl")).unwrap());
}

#[test]
fn run_is_resumable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_network(d);
    let config = "network = \"network.json\"\nout_dir = \"out\"\ntrajectories = 5\nevents_per = 60\ncap = 40\nseed = 4\n";
    fs::write(d.join("run.toml"), config).unwrap();
    let first = ok(d, &["run", "--config", "run.toml"]);
    assert!(first.contains("Balanced"));
    let status = |text: &str| -> Vec<String> {
        text.lines()
            .take_while(|l| !l.is_empty())
            .map(|l| l.split_whitespace().nth(1).unwrap().to_owned())
            .collect()
    };
    assert!(status(&first).iter().all(|s| s == "done"), "{first}");
    let manifest = fs::read(d.join("out/run_manifest.json")).unwrap();
    let second = ok(d, &["run", "--config", "run.toml"]);
    assert!(status(&second).iter().all(|s| s == "skipped"), "{second}");
    assert_eq!(status(&second).len(), 13);
    assert_eq!(fs::read(d.join("out/run_manifest.json")).unwrap(), manifest);
}

#[test]
fn exit_codes_separate_validation_from_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_network(d);

    fs::write(d.join("bad.toml"), "network = \"network.json\"\ntau_min = 600\n").unwrap();
    assert_eq!(evomd(d, &["run", "--config", "bad.toml"]).status.code(), Some(2));

    fs::write(d.join("typo.toml"), "network = \"network.json\"\ntau_mn = 6\n").unwrap();
    assert_eq!(evomd(d, &["run", "--config", "typo.toml"]).status.code(), Some(2));

    fs::write(d.join("frames.jsonl"), "{\"broken\n").unwrap();
    fs::write(d.join("frames.toml"), "frames = \"frames.jsonl\"\n").unwrap();
    let out = evomd(d, &["run", "--config", "frames.toml"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage ingest failed"));

    fs::write(d.join("e.jsonl"), "").unwrap();
    let out = evomd(d, &["filter", "--events", "e.jsonl", "--tau-min", "20", "--tau-max", "10", "--out", "f.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(evomd(d, &["windows", "--events", "e.jsonl", "--task", "sideways", "--out", "w"]).status.code(), Some(2));
}
