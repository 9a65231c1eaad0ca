use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fdsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdsim")).args(args).output().expect("binary runs")
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_suites_pass() {
    let o = fdsim(&["oracle"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    for suite in ["topk", "aggregation", "gradient"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{suite}: pass"))), "{out}");
    }
    let o = fdsim(&["oracle", "--suite", "gradient", "--seed", "9"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn unknown_oracle_suite_is_a_config_error() {
    assert_eq!(code(&fdsim(&["oracle", "--suite", "nope"])), 2);
}

#[test]
fn run_writes_artifacts_and_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let smoke = repo_path("configs/smoke.toml");
    let o = fdsim(&["run", "--config", s(&smoke), "--strategy", "adald,zeropad", "--seeds", "0,1", "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for stem in ["adald_seed0", "adald_seed1", "zeropad_seed0", "zeropad_seed1"] {
        for ext in ["csv", "events.jsonl", "server.ckpt"] {
            assert!(a.join(format!("{stem}.{ext}")).is_file(), "missing {stem}.{ext}");
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1]));
    assert_eq!(manifest["strategies"], serde_json::json!(["adald", "zeropad"]));
    assert_eq!(manifest["config"]["federation"]["rounds"], 3);

    let csv = fs::read_to_string(a.join("adald_seed0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "header plus rounds 0..=3");
    let events = fs::read_to_string(a.join("adald_seed0.events.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(events.lines().next().unwrap()).unwrap();
    assert_eq!(first["stage"], "server_infer");

    let o = fdsim(&["run", "--manifest", s(&a.join("manifest.json")), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(a.join("artifacts.json")).unwrap(), fs::read(b.join("artifacts.json")).unwrap());
    for name in ["adald_seed1.csv", "zeropad_seed0.events.jsonl", "adald_seed0.server.ckpt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn overrides_and_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = repo_path("configs/smoke.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_fdsim"))
        .args(["run", "--config", s(&smoke), "--strategy", "all_logits", "--seed", "5", "--rounds", "1", "--out", s(dir.path())])
        .env("FDSIM_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("all_logits_seed5.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);

    let o = Command::new(env!("CARGO_BIN_EXE_fdsim")).args(["oracle", "--suite", "topk"]).env("FDSIM_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_exit_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[federation]\nstrategy = \"bogus\"\n").unwrap();
    let o = fdsim(&["run", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("federation.strategy"), "{}", stderr(&o));

    fs::write(&bad, "[train]\nlearning_rate = -1.0\n").unwrap();
    let o = fdsim(&["run", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));

    let o = fdsim(&["run", "--strategy", "bogus", "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&fdsim(&["run", "--config", "/nonexistent.toml", "--out", s(dir.path())])), 2);
}

#[test]
fn report_matches_golden_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = fdsim(&["report", s(&fixture("logs")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let got = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(got, fs::read_to_string(fixture("summary_expected.csv")).unwrap());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), got);

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let rows = json.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0]["strategy"], "adald");
    assert_eq!(rows[0]["mean_bytes_to_threshold"], 3750.0);
    assert!(rows[2]["mean_bytes_to_threshold"].is_null());
}

#[test]
fn report_of_a_single_log_is_its_summary() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(fixture("logs/zeropad_seed0.csv"), dir.path().join("zeropad_seed0.csv")).unwrap();
    let o = fdsim(&["report", s(dir.path()), "--thresholds", "0.5,0.7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let got = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = got.lines().skip(1).collect();
    assert_eq!(rows, ["zeropad,0.5,1,1,0.001000,0.000500,0.000500,1", "zeropad,0.7,1,1,0.002000,0.001000,0.001000,2"]);
    // A second report ignores the summary it wrote.
    assert_eq!(code(&fdsim(&["report", s(dir.path()), "--thresholds", "0.5,0.7"])), 0);
}

#[test]
fn report_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&fdsim(&["report", s(&dir.path().join("missing"))])), 2);
    assert_eq!(code(&fdsim(&["report", s(dir.path())])), 2);
    fs::write(dir.path().join("broken.csv"), "not,a,log\n").unwrap();
    let o = fdsim(&["report", s(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("broken.csv"), "{}", stderr(&o));
}

#[test]
fn partition_lists_every_client() {
    let smoke = repo_path("configs/smoke.toml");
    let o = fdsim(&["partition", "--config", s(&smoke), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "client,samples,class_0,class_1,class_2,class_3");
    let rows: Vec<Vec<usize>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        assert!(row[1] >= 1);
        assert_eq!(row[1], row[2..].iter().sum::<usize>());
    }
    assert_eq!(rows.iter().map(|r| r[1]).sum::<usize>(), 4 * 40);
}
