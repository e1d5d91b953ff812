use super::*;
use proptest::prelude::*;

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("tagi").chain(args.iter().copied())).unwrap()
}

#[test]
fn empty_config_is_the_default() {
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    RunConfig::default().validate().unwrap();
}

#[test]
fn partial_sections_keep_other_defaults() {
    let c = RunConfig::from_json(r#"{"train": {"lambda1": 2.5}, "suite": {"mode": "def_2pos"}}"#).unwrap();
    assert_eq!(c.train.lambda1, 2.5);
    assert_eq!(c.train.lr, TrainConfig::default().lr);
    assert_eq!(c.suite.mode, FormatMode::Def2Pos);
    assert_eq!(c.model, ModelConfig::default());
}

#[test]
fn unknown_key_names_its_path() {
    let err = RunConfig::from_json(r#"{"train": {"lamda1": 1.0}}"#).unwrap_err();
    assert_eq!(err.exit_code(), exit::USAGE);
    let msg = err.to_string();
    assert!(msg.contains("train"), "{msg}");
    assert!(msg.contains("lamda1"), "{msg}");
}

#[test]
fn wrong_type_names_its_path() {
    let err = RunConfig::from_json(r#"{"model": {"d_model": "big"}}"#).unwrap_err();
    assert!(err.to_string().contains("model.d_model"), "{err}");
}

#[test]
fn syntax_error_reports_the_line() {
    let err = RunConfig::from_json("{\n  \"train\": {\n    \"lr\": ,\n  }\n}").unwrap_err();
    assert_eq!(err.exit_code(), exit::USAGE);
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn invalid_values_are_config_errors() {
    let c = RunConfig::from_json(r#"{"train": {"lr": -1.0}}"#).unwrap();
    assert_eq!(c.validate().unwrap_err().exit_code(), exit::CONFIG);
    let c = RunConfig::from_json(r#"{"model": {"d_model": 30, "n_heads": 4}}"#).unwrap();
    assert_eq!(c.validate().unwrap_err().exit_code(), exit::CONFIG);
}

#[test]
fn config_hash_ignores_key_order_and_float_noise() {
    let a = RunConfig::from_json(r#"{"train": {"lr": 0.001, "lambda1": 5.0}}"#).unwrap();
    let b = RunConfig::from_json(r#"{"train": {"lambda1": 5.0, "lr": 0.0010000000000001}}"#).unwrap();
    assert_eq!(a.config_hash(), b.config_hash());
    assert_eq!(a.config_hash(), RunConfig::default().config_hash());
    let c = RunConfig::from_json(r#"{"train": {"lr": 0.0002}}"#).unwrap();
    assert_ne!(a.config_hash(), c.config_hash());
    assert_eq!(a.model_hash(), c.model_hash());
    assert_eq!(a.config_hash().len(), 64);
    let mut moved = a.clone();
    moved.paths.out_dir = PathBuf::from("/elsewhere");
    assert_eq!(moved.config_hash(), a.config_hash());
    moved.paths.corpus_seed = 1;
    assert_ne!(moved.config_hash(), a.config_hash());
}

#[test]
fn canonical_rounding_keeps_integers_exact() {
    let v = serde_json::json!({"b": 1, "a": [1.5, 2], "c": 0.1});
    assert_eq!(
        serde_json::to_string(&canonicalize(&v)).unwrap(),
        r#"{"a":["1.50000000000e0",2],"b":1,"c":"1.00000000000e-1"}"#
    );
}

#[test]
fn environment_seed_overrides_train_seed() {
    let cli = parse(&["pretrain"]);
    assert_eq!(resolve_config(&cli, None).unwrap().train.seed, 0);
    assert_eq!(resolve_config(&cli, Some("7")).unwrap().train.seed, 7);
    assert_eq!(resolve_config(&cli, Some("x")).unwrap_err().exit_code(), exit::USAGE);
}

#[test]
fn out_dir_flag_overrides_config() {
    let cli = parse(&["--out-dir", "/tmp/elsewhere", "pretrain"]);
    assert_eq!(resolve_config(&cli, None).unwrap().paths.out_dir, PathBuf::from("/tmp/elsewhere"));
}

#[test]
fn fusion_layers_flag_overrides_model() {
    let cli = parse(&["--fusion-layers", "last", "pretrain"]);
    let cfg = resolve_config(&cli, None).unwrap();
    assert_eq!(cfg.model.fusion_layers, FusionLayers::Last);
    assert_ne!(cfg.model_hash(), RunConfig::default().model_hash());
    assert!(Cli::try_parse_from(["tagi", "--fusion-layers", "first", "pretrain"]).is_err());
}

#[test]
fn missing_config_file_is_io() {
    let cli = parse(&["--config", "/nonexistent/run.json", "pretrain"]);
    assert_eq!(resolve_config(&cli, None).unwrap_err().exit_code(), exit::IO);
}

#[test]
fn finetune_flags_toggle_terms() {
    let cli = parse(&["finetune", "--no-kl", "--no-fusion", "--lambda1", "2", "--no-pretrain"]);
    let Command::Finetune(a) = &cli.command else { panic!() };
    let mut cfg = RunConfig::default();
    apply_finetune_flags(&mut cfg, a).unwrap();
    assert!(!cfg.train.use_kl && cfg.train.use_ins && cfg.train.use_pred);
    assert!(!cfg.train.fusion_enabled && !cfg.train.pretrain_enabled);
    assert_eq!(cfg.train.lambda1, 2.0);
    assert_ne!(cfg.config_hash(), RunConfig::default().config_hash());

    let all = parse(&["finetune", "--no-kl", "--no-ins", "--no-pred"]);
    let Command::Finetune(a) = &all.command else { panic!() };
    let mut cfg = RunConfig::default();
    apply_finetune_flags(&mut cfg, a).unwrap();
    assert_eq!(cfg.validate().unwrap_err().exit_code(), exit::CONFIG);
}

#[test]
fn flops_arguments_must_be_positive() {
    assert!(Cli::try_parse_from(["tagi", "flops", "0", "10", "20", "5"]).is_err());
    assert!(Cli::try_parse_from(["tagi", "flops", "100", "-1", "20", "5"]).is_err());
    assert!(Cli::try_parse_from(["tagi", "flops", "100", "10", "20"]).is_err());
    let cli = parse(&["flops", "100", "10", "20", "5"]);
    let Command::Flops(a) = &cli.command else { panic!() };
    let (t, text) = cmd_flops(a).unwrap();
    assert_eq!((t.standard, t.tagi), (25_000, 7_000));
    assert!((t.ratio - 0.28).abs() < 1e-15);
    assert!(text.contains("25000") && text.contains("7000"));
}

#[test]
fn flops_json_output() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.json");
    let cli = parse(&["flops", "100", "10", "20", "5", "--json", p.to_str().unwrap()]);
    let Command::Flops(a) = &cli.command else { panic!() };
    cmd_flops(a).unwrap();
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(v["query"]["N"], 100);
    assert_eq!(v["standard"], 25_000);
    assert_eq!(v["tagi"], 7_000);
}

#[test]
fn evaluate_flag_parsing() {
    let cli = parse(&["evaluate", "--split", "valid", "--variant", "zero_adapters", "--mode", "def_2pos"]);
    let Command::Evaluate(a) = &cli.command else { panic!() };
    assert_eq!((a.split, a.variant, a.mode), (Split::Valid, Variant::ZeroAdapters, Some(FormatMode::Def2Pos)));
    assert!(Cli::try_parse_from(["tagi", "evaluate", "--split", "dev"]).is_err());
    assert!(Cli::try_parse_from(["tagi", "evaluate", "--variant", "oracle"]).is_err());
}

#[test]
fn error_exit_codes() {
    assert_eq!(CliError::from(TrainError::Config("x".into())).exit_code(), exit::CONFIG);
    let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
    assert_eq!(CliError::from(TrainError::Io(io)).exit_code(), exit::IO);
    let nf = TensorError::NonFinite { op: "exp" };
    assert_eq!(CliError::from(TrainError::from(nf)).exit_code(), exit::NUMERICAL);
    let div = TrainError::Diverged {
        task: "t".into(),
        initial: 1.0,
        loss: 20.0,
    };
    assert_eq!(CliError::from(div).exit_code(), exit::NUMERICAL);
    assert_eq!(CliError::from(ModelError::Format("bad".into())).exit_code(), exit::IO);
}

#[test]
fn gradcheck_rejects_nonpositive_tolerance() {
    let a = GradcheckArgs {
        tol: 0.0,
        step: 1e-5,
        coords: 4,
        seed: 0,
    };
    assert_eq!(cmd_gradcheck(&a).unwrap_err().exit_code(), exit::USAGE);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_through_json(lambda1 in 0.0f64..100.0, steps in 1usize..100_000, seed in any::<u64>()) {
        let mut c = RunConfig::default();
        c.train.lambda1 = lambda1;
        c.train.finetune_steps = steps;
        c.suite.seed = seed;
        let text = serde_json::to_string(&c).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        prop_assert_eq!(back.config_hash(), c.config_hash());
        prop_assert_eq!(back, c);
    }
}
