use std::path::Path;

use assert_cmd::Command;

const TINY: &str = r#"{
    // small enough for a test run
    "model": {
        "lm": {"embed_dim": 32, "layers": 1, "heads": 2, "ffn_dim": 64, "max_context": 320},
        "connector": {"lm_dim": 32}
    },
    "synth": {"n_dialogues": 4},
    "lm_pretrain": {"max_steps": 4, "eval_interval": 2, "batch_size": 2, "warmup_steps": 1},
    "stage1": {"max_steps": 4, "eval_interval": 2, "batch_size": 4, "warmup_steps": 1},
    "stage2": {"max_steps": 4, "eval_interval": 2, "batch_size": 4, "warmup_steps": 1, "lora": {"rank": 4}},
    "final_ft": {"batch_size": 8, "lora": {"rank": 4}},
    "max_new_tokens": 24
}"#;

fn speechdst(dir: &Path) -> Command {
    let mut cmd = Command::cargo_bin("speechdst").unwrap();
    cmd.current_dir(dir).env_remove("SPEECHDST_HOME").env("RUST_LOG", "warn");
    cmd
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.jsonc"), TINY).unwrap();
    speechdst(dir.path()).args(["--config", "tiny.jsonc", "synth", "--out", "data"]).assert().success();
    dir
}

#[test]
fn synth_is_deterministic() {
    let a = setup();
    let b = setup();
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "lm_text.jsonl", "ontology.json"] {
        let x = std::fs::read(a.path().join("data").join(f)).unwrap();
        let y = std::fs::read(b.path().join("data").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn invalid_config_exits_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = speechdst(dir.path()).args(["--set", "stage2.batch_size=0", "synth", "--out", "x"]).assert().code(2).get_output().clone();
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("stage2.batch_size"), "{err}");
    let out = speechdst(dir.path()).args(["--set", "model.lm.layers=\"two\"", "synth", "--out", "x"]).assert().code(2).get_output().clone();
    assert!(String::from_utf8(out.stderr).unwrap().contains("model.lm.layers"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn missing_checkpoint_fails_without_output() {
    let dir = setup();
    speechdst(dir.path())
        .args(["--config", "tiny.jsonc", "infer", "--checkpoint", "nowhere", "--corpus", "data/test.jsonl", "--out", "preds.jsonl"])
        .assert()
        .failure();
    assert!(!dir.path().join("preds.jsonl").exists());
    assert!(!dir.path().join("preds.partial").exists());
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = setup();
    let p = dir.path();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "tiny.jsonc"];
        all.extend_from_slice(args);
        speechdst(p).args(&all).assert().success();
    };
    run(&["pretrain-lm", "--corpus", "data/lm_text.jsonl", "--dev", "data/lm_dev.jsonl", "--out", "ck/lm"]);
    run(&["pretrain-asr", "--init", "ck/lm", "--corpus", "data/asr_train.jsonl", "--dev", "data/asr_dev.jsonl", "--limit", "20", "--out", "ck/asr"]);
    run(&["train-dst", "--init", "ck/asr/manifest.json", "--corpus", "data/train.jsonl", "--dev", "data/dev.jsonl", "--out", "ck/dst"]);
    run(&["finetune", "--init", "ck/dst", "--corpus", "data/train.jsonl", "--dev", "data/dev.jsonl", "--out", "ck/ft"]);
    run(&["infer", "--checkpoint", "ck/ft", "--corpus", "data/test.jsonl", "--workers", "2", "--out", "preds.jsonl"]);
    run(&["infer", "--checkpoint", "ck/ft", "--corpus", "data/test.jsonl", "--history-mode", "oracle-user", "--user-only", "--out", "oracle.jsonl"]);
    run(&["evaluate", "--predictions", "preds.jsonl", "--corpus", "data/test.jsonl"]);
    run(&["evaluate", "--predictions", "preds.jsonl", "--corpus", "data/test.jsonl", "--ontology", "data/ontology.json", "--fuzzy", "--fuzzy-threshold", "70"]);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("ck/dst/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stage"], "joint_dst");
    assert!(manifest["run_config"]["stage2"].is_object());
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let preds = std::fs::read_to_string(p.join("preds.jsonl")).unwrap();
    let test_turns: usize = std::fs::read_to_string(p.join("data/test.jsonl")).unwrap().lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["turns"].as_array().unwrap().len()).sum();
    assert_eq!(preds.lines().count(), test_turns);
    let first: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    let hash = first["config_hash"].as_str().unwrap().to_string();
    assert!(preds.lines().all(|l| l.contains(&hash)));

    let raw = std::fs::read_to_string(p.join("preds.report.json")).unwrap();
    let fuzzy = std::fs::read_to_string(p.join("preds.report.fuzzy.json")).unwrap();
    let raw: serde_json::Value = serde_json::from_str(&raw).unwrap();
    let fuzzy: serde_json::Value = serde_json::from_str(&fuzzy).unwrap();
    assert_eq!(raw["fuzzy"], false);
    assert_eq!(fuzzy["fuzzy"], true);
    assert_eq!(fuzzy["fuzzy_threshold"], 70);
    assert_eq!(raw["config_hash"], hash.as_str());

    let home = tempfile::tempdir().unwrap();
    std::fs::rename(p.join("ck/ft"), home.path().join("ft")).unwrap();
    speechdst(p)
        .env("SPEECHDST_HOME", home.path())
        .args(["--config", "tiny.jsonc", "infer", "--checkpoint", "ft", "--corpus", "data/test.jsonl", "--workers", "2", "--out", "again.jsonl"])
        .assert()
        .success();
    assert_eq!(std::fs::read_to_string(p.join("again.jsonl")).unwrap(), preds);
}
