use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mckd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mckd"))
        .current_dir(dir)
        .args(args)
        .env("MCKD_TEST_TOKEN", "tok-from-env-42")
        .output()
        .expect("running mckd")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path) {
    let o = mckd(
        dir,
        &["synth", "--seed", "4", "--size", "300", "--test-size", "60", "--out-dir", "task"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn dry_run_prints_the_stage_plan() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let task = tmp.path().join("task");
    let cfg = fs::read_to_string(task.join("mckd.toml")).unwrap();
    fs::write(task.join("four.toml"), cfg.replace("stages = 3", "stages = 4")).unwrap();
    let o = mckd(&task, &["run", "--config", "four.toml", "--dry-run"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for s in 1..=3 {
        assert!(out.contains(&format!("train stage{s}-A on A")), "{out}");
    }
    assert!(out.contains("stage 4: train final"), "{out}");
    assert!(!out.contains("stage4-A"));
    assert!(!task.join("run").exists());
}

#[test]
fn single_stage_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let task = tmp.path().join("task");
    let cfg = fs::read_to_string(task.join("mckd.toml")).unwrap();
    fs::write(task.join("one.toml"), cfg.replace("stages = 3", "stages = 1")).unwrap();
    let o = mckd(&task, &["run", "--config", "one.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 2"));
    assert_eq!(mckd(&task, &["run"]).status.code(), Some(2));
}

#[test]
fn synth_run_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let task = tmp.path().join("task");
    let o = mckd(&task, &["run", "--config", "mckd.toml"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("stage2-B"));
    assert!(task.join("run/predictions/final.jsonl").exists());

    let o = mckd(&task, &["resume", "--run", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = mckd(&task, &["evaluate", "--run", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(task.join("run/evaluation.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert_eq!(row["model"], "final");
    let f1 = row["corpus_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(row["examples"], 60);

    let o = mckd(
        &task,
        &[
            "evaluate",
            "--predictions",
            "run/predictions/final.jsonl",
            "--gold",
            "test.jsonl",
            "--metric",
            "token-accuracy",
            "--out",
            "direct.jsonl",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let direct: serde_json::Value =
        serde_json::from_str(fs::read_to_string(task.join("direct.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(direct["corpus_f1"].as_f64().unwrap(), f1);
}

#[test]
fn run_snapshot_holds_no_secrets() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let task = tmp.path().join("task");
    let cfg = r#"output_dir = "secret-run"

[data]
format = "slot-jsonl"
unlabeled = "train.jsonl"
labeled = "test.jsonl"
demos = 2

[run]
stages = 2
seed = 1
metric = "slot-f1"

[teacher]
kind = "llm-teacher"
endpoint = "http://127.0.0.1:9/v1/chat/completions"
[teacher.parameters]
api_key = "sk-literal-should-not-leak"
auth_token = "${MCKD_TEST_TOKEN}"
max_retries = 0
timeout_ms = 500

[student]
kind = "context-tagger"
"#;
    fs::write(task.join("secret.toml"), cfg).unwrap();
    let o = mckd(&task, &["pseudolabel", "--config", "secret.toml"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let snap = fs::read_to_string(task.join("secret-run/config.toml")).unwrap();
    assert!(!snap.contains("sk-literal-should-not-leak"));
    assert!(!snap.contains("tok-from-env-42"));
    assert!(snap.contains("${MCKD_TEST_TOKEN}"));
}
