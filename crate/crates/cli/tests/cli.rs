use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn sccl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sccl"))
        .args(args)
        .env("SCCL_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Generates a small corpus into `dir/data` and returns a quick experiment config.
fn small_experiment(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, r#"{"dialogues": 24, "min_dialogue_len": 4, "max_dialogue_len": 6}"#).unwrap();
    let data = dir.join("data");
    let o = sccl(&["generate", "--spec", s(&spec), "--seed", "3", "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = data.join("experiment.json");
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg["train"]["epochs"] = json!(1);
    cfg["train"]["seeds"] = json!([0, 1]);
    cfg["encoder"]["d_h"] = json!(8);
    cfg["encoder"]["n_layers"] = json!(1);
    cfg["encoder"]["ff_dim"] = json!(16);
    cfg["encoder"]["max_len"] = json!(32);
    cfg["adapter"]["interactive_layers"] = json!([0]);
    cfg["adapter"]["d_a"] = json!(4);
    cfg["adapter"]["ff_dim"] = json!(8);
    cfg["window"]["max_len"] = json!(32);
    cfg["methods"] = json!(["none", "sccl", "random_sccl"]);
    cfg["batch_sizes"] = json!([2, 4]);
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn generate_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = sccl(&["generate", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seed"));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let o = sccl(&["train", "--config", "x.json", "--out", "y", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(sccl(&["--help"]).status.code(), Some(0));
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        assert!(sccl(&["generate", "--seed", seed, "--out", s(out)]).status.success());
    }
    let read = |d: &Path| std::fs::read(d.join("corpus.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let m = manifest(&a);
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seeds"], json!([7]));
    assert!(m["outputs"].as_array().unwrap().contains(&json!("corpus.jsonl")));
}

#[test]
fn iemocap_labels_resolve_to_builtin_prototypes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(sccl(&["generate", "--seed", "1", "--out", s(dir.path())]).status.success());
    let table = sccl::prototypes::PrototypeTable::load(dir.path().join("prototypes.json")).unwrap();
    assert_eq!(table.len(), 6);
    assert_eq!(table.by_name("happy").unwrap().to_array(), [0.960, 0.732, 0.850]);
}

#[test]
fn invalid_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"vocab_size": 4}"#).unwrap();
    let o = sccl(&["generate", "--spec", s(&spec), "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(&spec, r#"{"no_such_field": 1}"#).unwrap();
    let o = sccl(&["generate", "--spec", s(&spec), "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_evaluate_and_scatter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(dir.path());
    let corpus_before = std::fs::read(cfg.with_file_name("corpus.jsonl")).unwrap();
    let run = dir.path().join("run");
    let o = sccl(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(run.join("summary.csv")).unwrap().lines().count(), 3);
    let m = manifest(&run);
    assert_eq!(m["seeds"], json!([0, 1]));
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(m["inputs"].as_array().unwrap().len() >= 4);
    assert_eq!(corpus_before, std::fs::read(cfg.with_file_name("corpus.jsonl")).unwrap());

    let ckpt = run.join("checkpoint_seed0.json");
    let eval = dir.path().join("eval");
    let o = sccl(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    let run0: Value = serde_json::from_str(&std::fs::read_to_string(run.join("run_seed0.json")).unwrap()).unwrap();
    assert_eq!(report["weighted_f1"], run0["final_report"]["weighted_f1"]);

    let scatter = dir.path().join("scatter");
    let o = sccl(&["scatter", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&scatter)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(scatter.join("scatter.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(sccl::metrics::SCATTER_HEADER));
    let rows = sccl::metrics::read_vad_scatter(csv.as_bytes()).unwrap();
    assert_eq!(rows.len(), report["vad_scatter"].as_array().unwrap().len());
}

#[test]
fn evaluate_rejects_a_mismatched_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(dir.path());
    let run = dir.path().join("run");
    assert!(sccl(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let vocab_path = cfg.with_file_name("vocab.json");
    let mut vocab: Value = serde_json::from_str(&std::fs::read_to_string(&vocab_path).unwrap()).unwrap();
    vocab["vocab_size"] = json!(80);
    std::fs::write(&vocab_path, vocab.to_string()).unwrap();
    let o = sccl(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&run.join("checkpoint_seed0.json")),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tok_emb"), "{}", stderr(&o));
}

#[test]
fn compare_and_stability_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(dir.path());
    let out = dir.path().join("compare");
    let o = sccl(&["compare", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("weighted_f1_mean") && lines[0].contains("micro_f1_excl_mean"));
    assert!(lines[3].starts_with("random_sccl,2,") && lines[3].ends_with(",0 1"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 6);

    let out = dir.path().join("stability");
    let o = sccl(&["stability", "--config", s(&cfg), "--out", s(&out), "--sequential"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("stability.csv")).unwrap().lines().count(), 5);
}

#[test]
fn missing_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sccl(&["train", "--config", s(&dir.path().join("absent.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_prints_a_pass_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = sccl(&["gradcheck", "--max-entries", "3", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("PASS gradcheck: max rel err"), "{stdout}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["check"]["methods"].as_array().unwrap().len(), 5);
    assert!(report["check"]["max_rel_err"].as_f64().unwrap() < 1e-4);

    let o = sccl(&["gradcheck", "--max-entries", "2", "--tol", "1e-30", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("FAIL"));
}
