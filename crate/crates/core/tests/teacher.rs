mod common;

use common::{max_abs_diff, mha_oracle_logits, to_rows, toy_config};
use hylo_core::checkpoint::{gen_toy_teacher, TransformerConfig};
use hylo_core::numerics::{repeat_kv, AllocProbe};
use hylo_core::rng::SeededRng;
use hylo_core::teacher::teacher_forward;

#[test]
fn gqa_matches_expanded_multi_head_oracle() {
    let cfg = toy_config();
    for seed in 0..10 {
        let t = gen_toy_teacher::<f64>(&cfg, seed).unwrap();
        let tokens = SeededRng::new(seed + 100).tokens(20, cfg.vocab);
        let z = teacher_forward(&t, &tokens, true, false).unwrap().logits.unwrap();
        let oracle = mha_oracle_logits(&t, &tokens);
        let diff = max_abs_diff(&to_rows(&z), &oracle);
        assert!(diff < 1e-6, "seed {seed}: {diff}");
    }
}

#[test]
fn gqa_equals_the_same_model_stored_as_full_multi_head() {
    let cfg = toy_config();
    let t = gen_toy_teacher::<f64>(&cfg, 4).unwrap();
    let mha_cfg = TransformerConfig { n_kv_heads: cfg.n_q_heads, ..cfg.clone() };
    let mut mha = t.clone();
    mha.config = mha_cfg;
    for layer in &mut mha.layers {
        layer.attn.wk = repeat_kv(&layer.attn.wk, cfg.head_dim, cfg.group()).unwrap();
        layer.attn.wv = repeat_kv(&layer.attn.wv, cfg.head_dim, cfg.group()).unwrap();
    }
    mha.validate().unwrap();
    let tokens = SeededRng::new(1).tokens(33, cfg.vocab);
    let a = teacher_forward(&t, &tokens, true, true).unwrap();
    let b = teacher_forward(&mha, &tokens, true, true).unwrap();
    assert!(a.logits.unwrap().max_abs_diff(&b.logits.unwrap()).unwrap() < 1e-12);
    for (x, y) in a.hidden_states.iter().zip(&b.hidden_states) {
        assert!(x.max_abs_diff(y).unwrap() < 1e-12);
    }
}

#[test]
fn teacher_is_causal_and_handles_one_token() {
    let cfg = toy_config();
    let t = gen_toy_teacher::<f64>(&cfg, 2).unwrap();
    let mut tokens = SeededRng::new(3).tokens(16, cfg.vocab);
    let before = teacher_forward(&t, &tokens, true, false).unwrap().logits.unwrap();
    tokens[10] = (tokens[10] + 1) % cfg.vocab as u32;
    let after = teacher_forward(&t, &tokens, true, false).unwrap().logits.unwrap();
    for r in 0..10 {
        assert_eq!(before.row(r), after.row(r), "row {r} changed");
    }
    assert_ne!(before.row(10), after.row(10));

    let one = teacher_forward(&t, &tokens[..1], true, true).unwrap();
    assert_eq!(one.logits.as_ref().unwrap().shape(), &[1, cfg.vocab]);
    assert_eq!(one.hidden_states.len(), cfg.n_layers);
    let prefix = teacher_forward(&t, &tokens[..1], true, false).unwrap().logits.unwrap();
    assert!(prefix.max_abs_diff(&before.slice_rows(0, 1)).unwrap() < 1e-12);
}

#[test]
fn logit_free_forward_never_allocates_tokens_by_vocab() {
    let cfg = TransformerConfig { vocab: 512, ..toy_config() };
    let t = gen_toy_teacher::<f64>(&cfg, 0).unwrap();
    let tokens = SeededRng::new(0).tokens(24, cfg.vocab);
    let probe = AllocProbe::start();
    let out = teacher_forward(&t, &tokens, false, true).unwrap();
    assert!(out.logits.is_none());
    assert!(probe.max_elements() < tokens.len() * cfg.vocab, "{}", probe.max_elements());
    drop(probe);
    let probe = AllocProbe::start();
    teacher_forward(&t, &tokens, true, false).unwrap();
    assert!(probe.max_elements() >= tokens.len() * cfg.vocab);
}

#[test]
fn out_of_range_tokens_are_rejected() {
    let cfg = toy_config();
    let t = gen_toy_teacher::<f64>(&cfg, 0).unwrap();
    assert!(teacher_forward(&t, &[0, cfg.vocab as u32], true, false).is_err());
    assert!(teacher_forward(&t, &[], true, false).is_err());
}
