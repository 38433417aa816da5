mod common;

use common::toy_config;
use hylo_core::checkpoint::{
    gen_toy_teacher, load_teacher, save_teacher, TensorContainer, TransformerConfig,
};
use hylo_core::gdn::GdnConfig;
use hylo_core::hybrid::{
    assemble_hybrid, kv_cache_report, load_hybrid, save_hybrid, Donor, HybridLayout, HybridModel, LinearKind, Mixer,
};
use hylo_core::losses::LossConfig;
use hylo_core::mla::MlaConfig;
use hylo_core::numerics::AllocProbe;
use hylo_core::params::Params;
use hylo_core::rng::SeededRng;
use hylo_core::teacher::TeacherCheckpoint;
use hylo_core::train::{kd_step, train_stage1_ild, train_stage2_sft, BigramCorpus, LossPath, TrainConfig};
use hylo_core::Tensor;
use proptest::prelude::*;
use serde_json::{json, Value};

fn split_container(bytes: &[u8]) -> (Value, Vec<u8>) {
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    (serde_json::from_slice(&bytes[8..8 + n]).unwrap(), bytes[8 + n..].to_vec())
}

fn join_container(header: &Value, payload: &[u8]) -> Vec<u8> {
    let h = serde_json::to_vec(header).unwrap();
    let mut out = (h.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn containers_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5), seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let mut c = TensorContainer::new(json!({ "kind": "test", "seed": seed }));
        for (i, s) in shapes.iter().enumerate() {
            c.push(format!("t{i}"), rng.normal_tensor::<f32>(s, 1.0));
        }
        let back = TensorContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn loader_rejects_lengths_that_disagree_with_shapes() {
    let mut c = TensorContainer::new(Value::Null);
    c.push("a", Tensor::<f32>::zeros([2, 3]));
    c.push("b", Tensor::<f32>::zeros([4]));
    let bytes = c.to_bytes().unwrap();
    let (header, payload) = split_container(&bytes);
    assert!(TensorContainer::from_bytes(&join_container(&header, &payload)).is_ok());
    for (name, delta) in [("a", 4i64), ("a", -4), ("b", 8)] {
        let mut h = header.clone();
        let len = h[name]["byte_length"].as_i64().unwrap();
        h[name]["byte_length"] = json!(len + delta);
        assert!(TensorContainer::from_bytes(&join_container(&h, &payload)).is_err(), "{name} {delta}");
    }
}

#[test]
fn teacher_and_hybrid_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let teacher = gen_toy_teacher::<f32>(&cfg, 5).unwrap();
    save_teacher(&teacher, dir.path().join("t.ckpt")).unwrap();
    let (back, extra) = load_teacher::<f32>(dir.path().join("t.ckpt")).unwrap();
    assert!(extra.is_empty());
    assert_eq!(back, teacher);

    let mla = MlaConfig::for_teacher(&cfg, 12).unwrap();
    let gdn = GdnConfig::new(cfg.d_model, 2).unwrap();
    let layout = HybridLayout::new(cfg.n_layers, vec![0, 3]).unwrap();
    let h = HybridModel::from_teacher(&teacher, &layout, &mla, &gdn, 1).unwrap();
    save_hybrid(&h, dir.path().join("h.ckpt")).unwrap();
    let (hb, _) = load_hybrid::<f32>(dir.path().join("h.ckpt")).unwrap();
    assert_eq!(hb, h);
}

fn reference_config(layers: usize, kv_heads: usize) -> TransformerConfig {
    TransformerConfig {
        d_model: 2048,
        n_layers: layers,
        n_q_heads: 32,
        n_kv_heads: kv_heads,
        head_dim: 64,
        vocab: 128_256,
        mlp_hidden: 8192,
        rope_theta: 500_000.0,
        eps: 1e-5,
        max_position: 131_072,
        qk_norm: false,
    }
}

#[test]
fn kv_ratio_is_additive_in_latent_layer_count() {
    let cfg = reference_config(16, 8);
    let mla = MlaConfig::for_teacher(&cfg, 160).unwrap();
    let one = kv_cache_report(&HybridLayout::new(16, vec![1, 5, 10, 14]).unwrap(), &cfg, &mla).unwrap();
    let two = kv_cache_report(&HybridLayout::new(16, vec![1, 3, 5, 7, 9, 10, 12, 14]).unwrap(), &cfg, &mla).unwrap();
    assert_eq!(two.hybrid_per_token, 2 * one.hybrid_per_token);
    assert_eq!((one.percent(), two.percent()), ("3.9%".to_string(), "7.8%".to_string()));
    let attn = HybridLayout::all_linear(16, LinearKind::Attention);
    assert_eq!(kv_cache_report(&attn, &cfg, &mla).unwrap().percent(), "100.0%");
}

fn pair() -> (TeacherCheckpoint<f64>, HybridModel<f64>, HybridModel<f64>) {
    let cfg = toy_config();
    let teacher = gen_toy_teacher::<f64>(&cfg, 2).unwrap();
    let mla = MlaConfig::for_teacher(&cfg, 12).unwrap();
    let gdn = GdnConfig::new(cfg.d_model, 2).unwrap();
    let pure_mla = HybridModel::from_teacher(&teacher, &HybridLayout::all_mla(cfg.n_layers), &mla, &gdn, 3).unwrap();
    let pure_gdn =
        HybridModel::from_teacher(&teacher, &HybridLayout::all_linear(cfg.n_layers, LinearKind::Gdn), &mla, &gdn, 3)
            .unwrap();
    (teacher, pure_mla, pure_gdn)
}

#[test]
fn assembly_is_lossless() {
    let (_, pure_mla, pure_gdn) = pair();
    let layout = HybridLayout::new(4, vec![1, 2]).unwrap();
    let h = assemble_hybrid(&pure_mla, &pure_gdn, &layout, Donor::Gdn).unwrap();
    for (i, layer) in h.layers.iter().enumerate() {
        let source = if [1, 2].contains(&i) { &pure_mla } else { &pure_gdn };
        assert_eq!(layer, &source.layers[i], "layer {i}");
        match (&layer.mixer, i) {
            (Mixer::Mla(_), 1 | 2) | (Mixer::Gdn(_), 0 | 3) => {}
            _ => panic!("layer {i} has the wrong mixer"),
        }
    }
    assert_eq!(h.lm_head, pure_gdn.lm_head);
    assert_eq!(h.embed, pure_gdn.embed);
}

fn fingerprint(t: &TeacherCheckpoint<f64>) -> Vec<u64> {
    t.tensors().iter().flat_map(|(_, x)| x.data().iter().map(|v| v.to_bits())).collect()
}

fn corpus(vocab: usize, n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let c = BigramCorpus::new(vocab, seed).unwrap();
    let mut rng = SeededRng::new(seed);
    (0..n).map(|_| c.sample(len, &mut rng)).collect()
}

#[test]
fn training_is_deterministic_and_never_touches_the_teacher() {
    let (teacher, _, pure_gdn) = pair();
    let before = fingerprint(&teacher);
    let data = corpus(64, 6, 24, 1);
    let mut cfg = TrainConfig::stage1();
    cfg.steps = 6;
    cfg.lr = 1e-3;
    cfg.context_len = 24;
    let mut a = pure_gdn.clone();
    let mut b = pure_gdn.clone();
    let ra = train_stage1_ild(&mut a, &teacher, &data, &cfg).unwrap();
    let rb = train_stage1_ild(&mut b, &teacher, &data, &cfg).unwrap();
    let bits = |r: &hylo_core::train::TrainReport| r.losses().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ra), bits(&rb));
    assert_eq!(a, b);

    let mut cfg2 = TrainConfig::stage2();
    cfg2.steps = 4;
    cfg2.lr = 1e-3;
    cfg2.context_len = 24;
    train_stage2_sft(&mut a, &teacher, &data, &data[..2], &cfg2).unwrap();
    assert_eq!(fingerprint(&teacher), before);
}

#[test]
fn hidden_path_never_materializes_teacher_logits() {
    let cfg = TransformerConfig { vocab: 400, ..toy_config() };
    let teacher = gen_toy_teacher::<f64>(&cfg, 0).unwrap();
    let mla = MlaConfig::for_teacher(&cfg, 12).unwrap();
    let gdn = GdnConfig::new(cfg.d_model, 2).unwrap();
    let student = HybridModel::from_teacher(&teacher, &HybridLayout::new(4, vec![2]).unwrap(), &mla, &gdn, 0).unwrap();
    let tokens = SeededRng::new(1).tokens(80, cfg.vocab);
    let loss = LossConfig { kl_chunk: 16, ..LossConfig::default() };
    let mut grad = student.zeros_like();
    let probe = AllocProbe::start();
    kd_step(&student, &teacher, &tokens, LossPath::Hidden, &loss, 1.0, &mut grad).unwrap();
    let hidden_peak = probe.max_elements();
    drop(probe);
    assert!(hidden_peak < tokens.len() * cfg.vocab, "{hidden_peak}");
    let mut grad = student.zeros_like();
    let probe = AllocProbe::start();
    kd_step(&student, &teacher, &tokens, LossPath::Naive, &loss, 1.0, &mut grad).unwrap();
    assert!(probe.max_elements() >= tokens.len() * cfg.vocab);
}
