use super::*;
use crate::tasks::{BOS, EOS};

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len: 24,
        lora_rank: 2,
        ..ModelConfig::default()
    }
}

fn model(seed: u64) -> TransformerWeights {
    TransformerWeights::init(&small(), &mut SeededRng::new(seed)).unwrap()
}

fn logits(
    w: &TransformerWeights,
    src: &[Token],
    prefix: &[Token],
    adapters: Option<&TaskAdapterSet>,
) -> Vec<f64> {
    let mut tape = Tape::no_grad();
    let bound = adapters.map(|a| a.bind(&mut tape));
    let enc = w.encode(&mut tape, src, bound.as_ref(), None).unwrap();
    let out = w.decode_logits(&mut tape, prefix, enc.hidden, bound.as_ref()).unwrap();
    tape.value(out).to_vec()
}

const SRC: [Token; 6] = [10, 20, 30, 40, 50, 60];
const PREFIX: [Token; 4] = [BOS, 12, 13, 14];

#[test]
fn default_config_is_valid() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.injection_points().len(), 8);
    assert_eq!(cfg.lora_param_count(), 4 * 2 * 4 * 128);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { n_heads: 3, ..small() },
        ModelConfig { lora_rank: 0, ..small() },
        ModelConfig { lora_rank: 16, ..small() },
        ModelConfig { d_ff: 0, ..small() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))), "{cfg:?}");
    }
}

#[test]
fn injection_indices_are_dense_and_encoder_first() {
    let cfg = small();
    for (i, p) in cfg.injection_points().iter().enumerate() {
        assert_eq!(p.index(&cfg), i);
        assert_eq!(p.block(&cfg), i / 2);
    }
    assert_eq!(cfg.injection_points()[0].path(), "encoder/0/Q");
    assert_eq!(cfg.injection_points()[7].path(), "decoder/1/V");
}

#[test]
fn output_shape() {
    let w = model(0);
    let l = logits(&w, &SRC, &PREFIX, None);
    assert_eq!(l.len(), PREFIX.len() * w.config.vocab_size);
    assert!(l.iter().all(|v| v.is_finite()));
}

#[test]
fn zero_b_adapters_are_bitwise_identity() {
    let w = model(1);
    let base = logits(&w, &SRC, &PREFIX, None);
    let ad = TaskAdapterSet::init("t", &w.config, &mut SeededRng::new(9));
    assert_eq!(logits(&w, &SRC, &PREFIX, Some(&ad)), base);
    let z = TaskAdapterSet::zeros("t", &w.config);
    assert_eq!(logits(&w, &SRC, &PREFIX, Some(&z)), base);
}

#[test]
fn rescaled_factors_give_the_same_output() {
    let w = model(2);
    let cfg = &w.config;
    let mut rng = SeededRng::new(4);
    let mut ad = TaskAdapterSet::init("t", cfg, &mut rng);
    for m in &mut ad.modules {
        m.b = Tensor::randn(&[cfg.lora_rank, cfg.d_model], 0.1, &mut rng);
    }
    let mut scaled = ad.clone();
    for m in &mut scaled.modules {
        m.a.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        m.b.data_mut().iter_mut().for_each(|v| *v *= 0.5);
    }
    let a = logits(&w, &SRC, &PREFIX, Some(&ad));
    let b = logits(&w, &SRC, &PREFIX, Some(&scaled));
    let base = logits(&w, &SRC, &PREFIX, None);
    assert!(a.iter().zip(&base).any(|(x, y)| (x - y).abs() > 1e-6));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn decoder_is_causal() {
    let w = model(3);
    let v = w.config.vocab_size;
    let a = logits(&w, &SRC, &PREFIX, None);
    let mut changed = PREFIX;
    changed[3] = 77;
    let b = logits(&w, &SRC, &changed, None);
    assert_eq!(a[..3 * v], b[..3 * v]);
    assert_ne!(a[3 * v..], b[3 * v..]);
}

#[test]
fn adapter_on_one_point_only_changes_output_through_that_point() {
    let w = model(4);
    let cfg = &w.config;
    let mut rng = SeededRng::new(6);
    let mut ad = TaskAdapterSet::zeros("t", cfg);
    let last = cfg.injection_points().len() - 1;
    ad.modules[last].a = Tensor::randn(&[cfg.d_model, cfg.lora_rank], 0.3, &mut rng);
    ad.modules[last].b = Tensor::randn(&[cfg.lora_rank, cfg.d_model], 0.3, &mut rng);
    // Decoder-only adapter: the encoder output must be untouched.
    let enc = |adapters: Option<&TaskAdapterSet>| {
        let mut tape = Tape::no_grad();
        let bound = adapters.map(|a| a.bind(&mut tape));
        let e = w.encode(&mut tape, &SRC, bound.as_ref(), None).unwrap();
        tape.value(e.hidden).to_vec()
    };
    assert_eq!(enc(Some(&ad)), enc(None));
    assert_ne!(logits(&w, &SRC, &PREFIX, Some(&ad)), logits(&w, &SRC, &PREFIX, None));
}

#[test]
fn param_counts() {
    let cfg = small();
    let ad = TaskAdapterSet::zeros("t", &cfg);
    assert_eq!(ad.param_count(), cfg.lora_param_count());
    assert_eq!(ad.flatten().len(), cfg.lora_param_count());
    let w = model(0);
    let (d, f, v, l) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_len);
    let attn = 4 * (d * d + d);
    let ff = d * f + f + f * d + d;
    let ln = 2 * d;
    let expected = v * d + l * d + 2 * (2 * ln + attn + ff) + ln + 2 * (3 * ln + 2 * attn + ff) + ln;
    assert_eq!(w.param_count(), expected);
}

#[test]
fn adapter_flatten_on_tape_matches_host_layout() {
    let cfg = small();
    let ad = TaskAdapterSet::init("t", &cfg, &mut SeededRng::new(2));
    let mut tape = Tape::no_grad();
    let bound = ad.bind(&mut tape);
    let flat = bound.flatten(&mut tape).unwrap();
    assert_eq!(tape.value(flat), ad.flatten().as_slice());
}

#[test]
fn adapter_set_rejects_bad_shapes() {
    let cfg = small();
    let mut modules = TaskAdapterSet::zeros("t", &cfg).modules;
    modules[0].a = Tensor::zeros(&[3, 3]);
    assert!(TaskAdapterSet::from_modules("t", &cfg, modules.clone()).is_err());
    modules.pop();
    assert!(TaskAdapterSet::from_modules("t", &cfg, modules).is_err());
}

#[test]
fn greedy_decode_is_deterministic_and_bounded() {
    let w = model(5);
    let mut tape = Tape::no_grad();
    let enc = w.encode(&mut tape, &SRC, None, None).unwrap();
    let mem = tape.to_tensor(enc.hidden);
    let a = w.greedy_decode(&mem, None, BOS, EOS, 10).unwrap();
    let b = w.greedy_decode(&mem, None, BOS, EOS, 10).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty() && a.len() <= 10);
    assert!(a[..a.len() - 1].iter().all(|&t| t != EOS));
    let one = w.greedy_decode(&mem, None, BOS, EOS, 1).unwrap();
    assert_eq!(one, a[..1]);
    assert!(w.greedy_decode(&mem, None, BOS, EOS, 0).is_err());
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0]), 0);
}

#[test]
fn token_errors() {
    let w = model(0);
    let mut tape = Tape::no_grad();
    assert!(matches!(
        w.encode(&mut tape, &[5, 999], None, None),
        Err(ModelError::Vocabulary { id: 999, .. })
    ));
    let long = vec![5; w.config.max_len + 1];
    assert!(matches!(w.encode(&mut tape, &long, None, None), Err(ModelError::Length { .. })));
    assert!(matches!(w.encode(&mut tape, &[], None, None), Err(ModelError::Empty(_))));
}

#[test]
fn gradients_reach_every_backbone_parameter() {
    let mut w = model(6);
    w.set_trainable(true);
    let mut tape = Tape::new();
    let enc = w.encode(&mut tape, &SRC, None, None).unwrap();
    let out = w.decode_logits(&mut tape, &PREFIX, enc.hidden, None).unwrap();
    let loss = tape.cross_entropy(out, &[12, 13, 14, EOS as usize], None).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (name, t) in w.named_params() {
        let g = grads.for_param(t).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(g.iter().any(|v| *v != 0.0), "zero gradient for {name}");
    }
}

#[test]
fn param_names_are_unique() {
    let w = model(0);
    let names: std::collections::HashSet<String> = w.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), w.named_params().len());
    assert!(names.contains("enc/0/attn/q/w"));
    assert!(names.contains("dec/1/cross_attn/o/b"));
}
