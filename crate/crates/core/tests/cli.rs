use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tagi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("TAGI_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "model": {"d_model": 16, "n_heads": 2, "d_ff": 32, "n_enc_layers": 1, "n_dec_layers": 1,
            "lora_rank": 2, "generator_hidden": 16, "id_embed_dim": 8},
  "train": {"pretrain_steps": 10, "teacher_steps": 5, "finetune_steps": 10, "log_every": 5},
  "suite": {"n_train_tasks": 2}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn flops_prints_table() {
    let o = tagi(&["flops", "100", "10", "20", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("25000") && out.contains("7000") && out.contains("0.2800"), "{out}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&tagi(&["flops", "0", "10", "20", "5"])), 2);
    assert_eq!(code(&tagi(&["flops", "100", "10", "20"])), 2);
    assert_eq!(code(&tagi(&["no-such-command"])), 2);
    assert_eq!(code(&tagi(&[])), 2);
    assert_eq!(code(&tagi(&["--help"])), 0);
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = write_config(dir.path(), "a.json", "{\n  \"train\": {\n    \"lr\": ,\n  }\n}");
    let o = tagi(&["--config", &bad_json, "pretrain"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let unknown = write_config(dir.path(), "b.json", r#"{"train": {"learning_rate": 0.1}}"#);
    let o = tagi(&["--config", &unknown, "pretrain"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let invalid = write_config(dir.path(), "c.json", r#"{"train": {"lr": -1.0}}"#);
    assert_eq!(code(&tagi(&["--config", &invalid, "pretrain"])), 3);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&tagi(&["--config", missing.to_str().unwrap(), "pretrain"])), 5);
}

#[test]
fn bad_seed_variable_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_tagi"))
        .args(["flops", "1", "1", "1", "1"])
        .env("TAGI_SEED", "abc")
        .output()
        .unwrap();
    // flops ignores the run configuration.
    assert_eq!(code(&o), 0);
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tagi"))
        .args(["--out-dir", dir.path().to_str().unwrap(), "pretrain"])
        .env("TAGI_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_without_checkpoint_is_io() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", SMALL);
    let o = tagi(&["--config", &cfg, "--out-dir", dir.path().to_str().unwrap(), "evaluate"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn finetune_without_teachers_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", SMALL);
    let out = dir.path().to_str().unwrap();
    let o = tagi(&["--config", &cfg, "--out-dir", out, "finetune", "--no-pretrain"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("train-teachers"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", SMALL);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg.as_str(), "--out-dir", out_s];
        all.extend_from_slice(args);
        tagi(&all)
    };
    for step in [&["pretrain"][..], &["train-teachers"], &["finetune"], &["evaluate", "--max-instances", "3"]] {
        let o = run(step);
        assert_eq!(code(&o), 0, "{step:?}: {}", stderr(&o));
    }
    for f in ["pretrain.ckpt", "tagi.ckpt", "metrics.csv", "eval_test_student.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval_test_student.json")).unwrap()).unwrap();
    assert_eq!(report["per_task"].as_array().unwrap().len(), 2);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,stage,task_id,l_pred,l_kl,l_ins,lambda2,l_total,grad_norm,lr,wall_ms"));

    // Teachers are reused when nothing relevant changed.
    assert_eq!(code(&run(&["train-teachers"])), 0);

    // Different teacher settings: refused without --force.
    let changed = write_config(dir.path(), "changed.json", &SMALL.replace("\"teacher_steps\": 5", "\"teacher_steps\": 6"));
    let with = |c: &str, args: &[&str]| {
        let mut all = vec!["--config", c, "--out-dir", out_s];
        all.extend_from_slice(args);
        tagi(&all)
    };
    assert_eq!(code(&with(&changed, &["train-teachers"])), 3);
    assert_eq!(code(&with(&changed, &["finetune"])), 3);
    assert_eq!(code(&with(&changed, &["train-teachers", "--force"])), 0);

    // A checkpoint from a different model section is refused.
    let other_model = write_config(dir.path(), "model.json", &SMALL.replace("\"lora_rank\": 2", "\"lora_rank\": 3"));
    let o = with(&other_model, &["evaluate"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("--allow-mismatch"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", SMALL);
    let run = |out: &str, args: &[&str]| {
        let mut all = vec!["--config", cfg.as_str(), "--out-dir", out];
        all.extend_from_slice(args);
        let o = tagi(&all);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    for out in [a, b] {
        run(out, &["pretrain"]);
        run(out, &["train-teachers"]);
    }
    run(a, &["finetune"]);
    run(b, &["finetune", "--stop-after", "4"]);
    assert!(!Path::new(b).join("tagi.ckpt").exists());
    run(b, &["finetune", "--resume"]);
    for f in ["tagi.ckpt", "metrics.csv"] {
        assert_eq!(fs::read(Path::new(a).join(f)).unwrap(), fs::read(Path::new(b).join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_passes() {
    let o = tagi(&["gradcheck", "--coords", "50"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("objective") && !out.contains("FAIL"), "{out}");
}
