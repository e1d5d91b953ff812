use super::*;
use crate::model::{ModelConfig, ParamSet};
use crate::tasks::build_suite;
use crate::tensor::SeededRng;
use crate::training::{initial_models, TeacherEntry};
use proptest::prelude::*;

/// Textbook full-table LCS.
fn lcs_table(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn oracle_rouge(r: &str, h: &str) -> f64 {
    let r: Vec<&str> = r.split_whitespace().collect();
    let h: Vec<&str> = h.split_whitespace().collect();
    let l = lcs_table(&r, &h) as f64;
    if l == 0.0 {
        0.0
    } else {
        let (p, q) = (l / h.len() as f64, l / r.len() as f64);
        2.0 * p * q / (p + q)
    }
}

#[test]
fn rouge_examples() {
    assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
    assert_eq!(rouge_l("a b c", "d e"), 0.0);
    assert!((rouge_l("the cat sat", "the cat") - 0.8).abs() < 1e-15);
    assert_eq!(rouge_l("", "x"), 0.0);
    assert_eq!(rouge_l("", ""), 0.0);
    assert_eq!(rouge_l("  spaced\tout  ", "spaced out"), 1.0);
}

#[test]
fn rouge_matches_table_oracle_on_random_pairs() {
    let mut rng = SeededRng::new(42);
    let words = ["a", "b", "c", "d", "e", "f"];
    let draw = |rng: &mut SeededRng| {
        let n = rng.index(9);
        (0..n).map(|_| words[rng.index(words.len())]).collect::<Vec<_>>().join(" ")
    };
    for _ in 0..200 {
        let (r, h) = (draw(&mut rng), draw(&mut rng));
        assert_eq!(rouge_l(&r, &h), oracle_rouge(&r, &h), "{r:?} / {h:?}");
    }
}

#[test]
fn exact_match_trims_trailing_whitespace() {
    assert_eq!(exact_match("abc", "abc"), 1.0);
    assert_eq!(exact_match("abc", "abd"), 0.0);
    assert_eq!(exact_match("abc ", "abc"), 1.0);
    assert_eq!(exact_match("abc", "abc\n"), 1.0);
    assert_eq!(exact_match("abc", " abc"), 0.0);
}

#[test]
fn flops_formulas() {
    let q = FlopsQuery { n_params: 100, n: 10, t: 20, i: 5 };
    assert_eq!(flops_standard(&q), 25_000);
    assert_eq!(flops_tagi(&q), 7_000);
    assert_eq!(flops_tagi(&q) as f64 / flops_standard(&q) as f64, 0.28);
    let one = FlopsQuery { n: 1, ..q };
    assert_eq!(flops_standard(&one), 100 * 25);
    assert_eq!(flops_standard(&one), flops_tagi(&one));
    let no_instr = FlopsQuery { t: 0, ..q };
    assert_eq!(flops_standard(&no_instr), 100 * 10 * 5);
    let big = FlopsQuery { n: 1_000_000, ..q };
    let ratio = flops_tagi(&big) as f64 / flops_standard(&big) as f64;
    assert!((ratio - 5.0 / 25.0).abs() < 1e-5);
}

#[test]
fn param_count_closed_form_matches_census() {
    for cfg in [
        ModelConfig::default(),
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 40,
            n_enc_layers: 3,
            n_dec_layers: 1,
            max_len: 50,
            ..ModelConfig::default()
        },
    ] {
        let (w, _) = initial_models(&cfg, 0).unwrap();
        let census: usize = w.named_params().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(backbone_param_count(&cfg), census);
        let generated = crate::model::TaskAdapterSet::zeros("x", &cfg).param_count();
        assert_eq!(param_ratio(&cfg), generated as f64 / census as f64);
    }
}

#[test]
fn param_ratio_scales_with_rank() {
    let c = ModelConfig::default();
    let r = param_ratio(&c);
    let double = param_ratio(&ModelConfig { lora_rank: 2 * c.lora_rank, ..c.clone() });
    assert_eq!(double, 2.0 * r);
    assert_eq!(param_ratio(&ModelConfig { lora_rank: 0, ..c.clone() }), 0.0);
    // 4 blocks · 2 · 4 · (64 + 64) over 182208 backbone parameters.
    assert_eq!(r, 4096.0 / 182_208.0);
}

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        d_ff: 32,
        lora_rank: 2,
        generator_hidden: 16,
        id_embed_dim: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn instruction_processed_once_per_task() {
    let (w, h) = initial_models(&small(), 0).unwrap();
    let suite = build_suite(0, 2).unwrap();
    let models = EvalModels { backbone: &w, hyper: &h, teachers: None };
    let task = &suite.meta_test[0];
    let inst = task.instance(0);
    let opts = EvalOptions { max_new_tokens: 4, ..EvalOptions::default() };
    let mut per_instance = Vec::new();
    for n in [1usize, 10, 100] {
        let insts = vec![inst.clone(); n];
        let r = evaluate_instances(models, task, &insts, &opts).unwrap();
        assert_eq!(r.instruction_encodings_performed, 1);
        assert_eq!(r.adapter_generations_performed, 1);
        assert_eq!(r.n_instances, n);
        assert!(r.counted_flops.instruction_encode > 0 && r.counted_flops.adapter_generate > 0);
        per_instance.push((r.counted_flops.instruction_encode, r.counted_flops.per_instance));
    }
    assert!(per_instance.iter().all(|p| p.0 == per_instance[0].0));
    assert_eq!(per_instance[2].1, 10 * per_instance[1].1);
    assert_eq!(per_instance[1].1, 10 * per_instance[0].1);
}

#[test]
fn zero_adapter_variant_skips_generation() {
    let (w, h) = initial_models(&small(), 1).unwrap();
    let suite = build_suite(0, 2).unwrap();
    let models = EvalModels { backbone: &w, hyper: &h, teachers: None };
    let opts = EvalOptions {
        variant: Variant::ZeroAdapters,
        max_new_tokens: 3,
        max_instances: Some(3),
        ..EvalOptions::default()
    };
    let r = evaluate_task(models, &suite.meta_test[1], &opts).unwrap();
    assert_eq!((r.instruction_encodings_performed, r.adapter_generations_performed), (1, 0));
    // The fresh generator emits zero B, so the student decodes identically.
    let s = evaluate_task(models, &suite.meta_test[1], &EvalOptions { variant: Variant::Student, ..opts }).unwrap();
    assert_eq!(r.predictions, s.predictions);
}

#[test]
fn teacher_variant_needs_a_teacher() {
    let cfg = small();
    let (w, h) = initial_models(&cfg, 2).unwrap();
    let suite = build_suite(0, 2).unwrap();
    let task = &suite.meta_train[0];
    let opts = EvalOptions {
        variant: Variant::Teacher,
        max_new_tokens: 3,
        max_instances: Some(2),
        ..EvalOptions::default()
    };
    let none = EvalModels { backbone: &w, hyper: &h, teachers: None };
    assert!(matches!(evaluate_task(none, task, &opts), Err(EvalError::MissingTeacher(_))));
    let mut reg = TeacherRegistry::default();
    reg.insert(TeacherEntry {
        adapters: crate::model::TaskAdapterSet::zeros(task.id(), &cfg),
        final_loss: 0.0,
        steps: 0,
    });
    let with = EvalModels { teachers: Some(&reg), ..none };
    let r = evaluate_task(with, task, &opts).unwrap();
    assert_eq!((r.instruction_encodings_performed, r.adapter_generations_performed), (0, 0));
    assert_eq!(r.counted_flops.instruction_encode, 0);
}

#[test]
fn overlong_input_names_the_instance() {
    let cfg = ModelConfig { max_len: 10, ..small() };
    let (w, h) = initial_models(&cfg, 3).unwrap();
    let suite = build_suite(0, 2).unwrap();
    let models = EvalModels { backbone: &w, hyper: &h, teachers: None };
    let task = &suite.meta_test[0];
    let long = Instance {
        source: "a".into(),
        target: "a".into(),
    };
    // The instruction alone exceeds 10 tokens.
    let err = evaluate_instances(models, task, &[long], &EvalOptions::default()).unwrap_err();
    match err {
        EvalError::Length { task: t, instance, what, .. } => {
            assert_eq!(t, task.id());
            assert_eq!(instance, "a");
            assert_eq!(what, "instruction");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn report_aggregates_are_means() {
    let (w, h) = initial_models(&small(), 4).unwrap();
    let suite = build_suite(0, 2).unwrap();
    let models = EvalModels { backbone: &w, hyper: &h, teachers: None };
    let opts = EvalOptions {
        max_new_tokens: 3,
        max_instances: Some(4),
        ..EvalOptions::default()
    };
    let rep = evaluate_split(models, &suite.meta_test, Split::Test, &opts, "abc").unwrap();
    assert_eq!(rep.per_task.len(), 2);
    let mean = |f: fn(&TaskReport) -> f64| rep.per_task.iter().map(f).sum::<f64>() / 2.0;
    assert_eq!(rep.aggregate.rouge_l, mean(|t| t.rouge_l));
    assert_eq!(rep.aggregate.exact_match, mean(|t| t.exact_match));
    let b = rep.flops.counted_buckets;
    assert_eq!(
        b.total(),
        rep.per_task.iter().map(|t| t.counted_flops.total()).sum::<u64>()
    );
    let json = serde_json::to_value(&rep).unwrap();
    for key in ["config_hash", "per_task", "aggregate", "flops"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(json["flops"].get("analytical_standard").is_some());
    assert!(json["flops"]["counted_buckets"].get("per_instance").is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rouge_is_symmetric_and_bounded(
        r in proptest::collection::vec(0u8..5, 0..10),
        h in proptest::collection::vec(0u8..5, 0..10),
    ) {
        let r = r.iter().map(|c| format!("w{c}")).collect::<Vec<_>>().join(" ");
        let h = h.iter().map(|c| format!("w{c}")).collect::<Vec<_>>().join(" ");
        let a = rouge_l(&r, &h);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - rouge_l(&h, &r)).abs() < 1e-15);
        prop_assert_eq!(a, oracle_rouge(&r, &h));
    }

    #[test]
    fn tagi_never_costs_more(n_params in 1u64..10_000, n in 1u64..1000, t in 0u64..500, i in 1u64..500) {
        let q = FlopsQuery { n_params, n, t, i };
        let (s, g) = (flops_standard(&q), flops_tagi(&q));
        prop_assert!(g <= s);
        prop_assert_eq!(g == s, n == 1 || t == 0);
    }
}
