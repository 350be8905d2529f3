use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn melemad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melemad"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env_remove("MELEMAD_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = melemad(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn files(dir: &Path) -> Vec<String> {
    if !dir.exists() {
        return Vec::new();
    }
    let mut v: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// The deterministic columns of a training log (everything but wall time).
fn log_without_time(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

const SYNTH: &[&str] = &["synth", "--n", "600", "--m", "30", "--informative", "4", "--noise-sigma", "0.1"];

fn pipeline(dir: &Path, threads: &str) {
    let t = ["--seed", "7", "--threads", threads];
    ok(dir, &[&t[..], SYNTH].concat());
    let input = dir.join("synthetic.csv");
    ok(dir, &[&t[..], &["--input", input.to_str().unwrap(), "--top-k", "8", "select"]].concat());
    ok(dir, &[&t[..], &["--iterations", "20", "meta-train"]].concat());
    ok(dir, &[&t[..], &["evaluate"]].concat());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &[&["--seed", "3"], SYNTH].concat());
    ok(b.path(), &[&["--seed", "3"], SYNTH].concat());
    ok(c.path(), &[&["--seed", "4"], SYNTH].concat());
    let read = |d: &Path| fs::read(d.join("synthetic.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
    assert_eq!(json(&a.path().join("informative.json"))["informative"].as_array().unwrap().len(), 4);

    ok(a.path(), &["--seed", "3", "synth", "--n", "50", "--m", "5", "--informative", "2", "--format", "bin"]);
    assert_eq!(&fs::read(a.path().join("synthetic.bin")).unwrap()[..4], b"MLMD");
}

#[test]
fn invalid_synth_exits_two_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let bad = melemad(&out_dir, &["--seed", "1", "synth", "--m", "3", "--informative", "5"]);
    assert_eq!(code(&bad), 2);
    let no_seed = melemad(&out_dir, &["synth"]);
    assert_eq!(code(&no_seed), 2);
    assert!(files(&out_dir).is_empty());
}

#[test]
fn select_validation_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = melemad(dir.path(), &["--seed", "1", "--input", missing.to_str().unwrap(), "--tau", "0.01", "select"]);
    assert_eq!(code(&out), 2);
    assert!(files(dir.path()).is_empty());

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[feature_selection]\nchunk_sise = 0.3\n").unwrap();
    let out = melemad(dir.path(), &["--config", cfg.to_str().unwrap(), "select"]);
    assert_eq!(code(&out), 2);

    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, b"not a dataset").unwrap();
    let out = melemad(dir.path(), &["--seed", "1", "--input", garbage.to_str().unwrap(), "--tau", "0", "select"]);
    assert_eq!(code(&out), 2);
    assert_eq!(files(dir.path()), ["bad.toml", "garbage.bin"]);
}

#[test]
fn select_top_k_keeps_at_least_k_features() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &[&["--seed", "5"], SYNTH].concat());
    let input = dir.path().join("synthetic.csv");
    ok(dir.path(), &["--seed", "5", "--input", input.to_str().unwrap(), "--top-k", "8", "select"]);
    let selected = json(&dir.path().join("selected_features.json"));
    let kept = selected["global_indices"].as_array().unwrap().len();
    assert!(kept >= 8, "kept {kept}");
    let report = json(&dir.path().join("cfsgb_report.json"));
    assert_eq!(report["selected"], kept);
    assert_eq!(report["top_k"], 8);
    assert!(report.get("timings").is_none());
    assert!(json(&dir.path().join("cfsgb_timings.json"))["importance_secs"].is_f64());

    // A threshold no feature can reach is a runtime failure, not a validation one.
    let out = melemad(dir.path(), &["--seed", "5", "--input", input.to_str().unwrap(), "--tau", "2", "select"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn meta_train_logs_every_iteration_and_resumes_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &[&["--seed", "9"], SYNTH].concat());
    let input = d.join("synthetic.csv");
    ok(d, &["--seed", "9", "--input", input.to_str().unwrap(), "--tau", "0.01", "select"]);

    ok(d, &["--seed", "9", "--iterations", "50", "meta-train"]);
    let full_ck = fs::read(d.join("checkpoint.bin")).unwrap();
    let full_log = log_without_time(&d.join("train_log.csv"));
    assert_eq!(full_log.len(), 51);
    assert_eq!(full_log[0], "iteration,meta_loss,query_accuracy");
    for (i, row) in full_log[1..].iter().enumerate() {
        assert!(row.starts_with(&format!("{i},")), "{row}");
    }

    ok(d, &["--seed", "9", "--iterations", "20", "meta-train", "--checkpoint-every", "10"]);
    assert_eq!(log_without_time(&d.join("train_log.csv")), full_log[..21]);
    let ck = d.join("checkpoint.bin");
    let ck20 = d.join("checkpoint_20.bin");
    fs::copy(&ck, &ck20).unwrap();
    let log20 = fs::read(d.join("train_log.csv")).unwrap();

    let resume = |d: &Path| {
        ok(d, &["--seed", "9", "--iterations", "50", "meta-train", "--resume", ck20.to_str().unwrap()]);
        (fs::read(d.join("checkpoint.bin")).unwrap(), log_without_time(&d.join("train_log.csv")))
    };
    let (resumed_ck, resumed_log) = resume(d);
    assert_eq!(resumed_log.len(), 51);
    assert_eq!(resumed_log[..21], full_log[..21]);
    // Checkpoints hold f32 weights, so a resumed run tracks the uninterrupted
    // one up to that rounding rather than bit for bit.
    for (r, f) in resumed_log[21..].iter().zip(&full_log[21..]) {
        let fields = |s: &str| s.split(',').map(str::to_string).collect::<Vec<_>>();
        let (r, f) = (fields(r), fields(f));
        assert_eq!(r[0], f[0]);
        let gap = (r[1].parse::<f64>().unwrap() - f[1].parse::<f64>().unwrap()).abs();
        assert!(gap < 1e-6, "iteration {}: loss gap {gap}", r[0]);
    }
    assert_eq!(resumed_ck.len(), full_ck.len());

    // Resuming from the same checkpoint is deterministic.
    fs::write(d.join("train_log.csv"), &log20).unwrap();
    assert_eq!(resume(d), (resumed_ck, resumed_log));

    // Resuming under a different configuration is refused.
    let out = melemad(d, &["--seed", "9", "--iterations", "60", "--beta", "0.01", "meta-train", "--resume", ck20.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn evaluate_writes_metrics_and_roc() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "2");
    let report = json(&dir.path().join("metrics_report.json"));
    for key in ["accuracy", "precision", "recall", "f1", "auc"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!((-1.0..=1.0).contains(&report["mcc"].as_f64().unwrap()));
    let cm = &report["confusion"];
    let total: u64 = ["tp", "tn", "fp", "fn"].iter().map(|k| cm[k].as_u64().unwrap()).sum();
    assert_eq!(total, 20 * 50);

    let roc = fs::read_to_string(dir.path().join("roc.csv")).unwrap();
    let lines: Vec<&str> = roc.lines().collect();
    assert_eq!(lines[0], "fpr,tpr");
    assert_eq!(lines[1], "0,0");
    assert_eq!(*lines.last().unwrap(), "1,1");

    let missing = melemad(dir.path(), &["evaluate", "--checkpoint", "/nonexistent/ck.bin"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "1");
    pipeline(b.path(), "4");
    let names = files(a.path());
    assert_eq!(names, files(b.path()));
    for name in &names {
        let (pa, pb) = (a.path().join(name), b.path().join(name));
        match name.as_str() {
            "cfsgb_timings.json" => {}
            "train_log.csv" => assert_eq!(log_without_time(&pa), log_without_time(&pb)),
            _ => assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap(), "{name} differs"),
        }
    }
}

#[test]
fn config_file_drives_the_run_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipeline.toml");
    fs::write(
        &cfg,
        r#"
seed = 11

[synthetic]
n = 500
m = 20
informative = 3

[feature_selection]
"Chunk Size" = 0.5
"Overlap between Chunks" = 0.2
top_k = 6

[meta_learning]
"Number of Iterations (Outer Loop)" = 10
"Number of Samples per Task" = 60
"Support Set Size" = 30
"Query Set Size" = 30
hidden_dims = [16, 8]
eval_episodes = 5
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    ok(&out_dir, &["--config", cfg.to_str().unwrap(), "run"]);
    let names = files(&out_dir);
    for expected in ["synthetic.csv", "selected_features.json", "checkpoint.bin", "metrics_report.json", "roc.csv"] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }
    assert_eq!(log_without_time(&out_dir.join("train_log.csv")).len(), 11);
}
