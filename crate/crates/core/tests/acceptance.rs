//! Acceptance suite: one line per criterion with its measured values and
//! wall-clock time. Exits non-zero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{max_abs_diff, mha_oracle_logits, to_rows, toy_config};
use hylo_core::checkpoint::{gen_toy_teacher, TransformerConfig};
use hylo_core::gdn::{gdn_forward_chunked, gdn_forward_sequential, gdn_param_count, GdnBlockWeights, GdnConfig};
use hylo_core::hybrid::{
    assemble_hybrid, format_bytes_approx, kv_cache_report, memory_plan, DecodeSession, Donor, HybridLayout,
    HybridModel, LayerCache, LinearKind,
};
use hylo_core::losses::{kl_chunked, kl_hidden, kl_naive, kl_online, LossConfig};
use hylo_core::mla::{factor_reconstruction_errors, init_mla_from_teacher, MlaConfig};
use hylo_core::numerics::{linear, linear_backward};
use hylo_core::rng::SeededRng;
use hylo_core::teacher::teacher_forward;
use hylo_core::train::{
    niah_generate, recall_curriculum, train_niah, train_stage1_ild, train_stage2_sft, BigramCorpus, TrainConfig,
};
use hylo_core::verify::{check_gradients, AUDIT_PROBES};
use hylo_core::{Result, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { passed, detail: detail.into() })
}

/// Evenly spread `count` latent-attention layers over `n` layers.
fn spread(n: usize, count: usize) -> HybridLayout {
    HybridLayout::new(n, (0..count).map(|i| i * n / count).collect::<Vec<_>>()).unwrap()
}

fn kv_accounting() -> Result<Outcome> {
    let cases = [
        ("llama-1b", TransformerConfig::llama_1b(), 160, 4, "3.9%"),
        ("llama-1b", TransformerConfig::llama_1b(), 160, 8, "7.8%"),
        ("llama-3b", TransformerConfig::llama_3b(), 192, 6, "2.0%"),
        ("llama-3b", TransformerConfig::llama_3b(), 192, 14, "4.7%"),
        ("qwen3-1.7b", TransformerConfig::qwen3_1_7b(), 320, 7, "3.9%"),
        ("qwen3-1.7b", TransformerConfig::qwen3_1_7b(), 320, 14, "7.8%"),
    ];
    let mut ok = true;
    let mut cells = Vec::new();
    for (name, cfg, budget, mla_layers, expect) in cases {
        let mla = MlaConfig::for_teacher(&cfg, budget)?;
        let r = kv_cache_report(&spread(cfg.n_layers, mla_layers), &cfg, &mla)?;
        ok &= r.percent() == expect;
        cells.push(format!("{name} {mla_layers}x{budget}={}", r.percent()));
    }
    outcome(ok, cells.join(", "))
}

fn logit_memory() -> Result<Outcome> {
    let plan = memory_plan(65_536, 128_256, &[])?;
    let expect = 65_536u64 * 128_256 * 2;
    let approx = format_bytes_approx(plan.logit_tensor_bytes);
    let stated = 16_810_934_272u64;
    outcome(
        plan.logit_tensor_bytes == expect && approx == "≈16 GiB",
        format!(
            "{} bytes ({approx}); stated figure {stated} differs from T*V*2 by {} bytes",
            plan.logit_tensor_bytes,
            stated - expect
        ),
    )
}

fn gdn_params() -> Result<Outcome> {
    let n = gdn_param_count(&GdnConfig::new(2048, 6)?);
    let m = n as f64 / 1e6;
    outcome((m - 25.19).abs() <= 0.05, format!("{n} parameters ({m:.3}M, target 25.19M +- 0.05M)"))
}

fn gdn_scan() -> Result<Outcome> {
    let cfg = GdnConfig::new(32, 2)?;
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let w = GdnBlockWeights::<f64>::random(&cfg, seed);
        for t in [64, 70, 256, 512] {
            let x: Tensor<f64> = SeededRng::derive(seed, t as u64).normal_tensor(&[t, 32], 1.0);
            let (a, _) = gdn_forward_sequential(&w, &cfg, &x, None)?;
            let (b, _) = gdn_forward_chunked(&w, &cfg, &x, None)?;
            worst = worst.max(b.max_rel_diff(&a)?);
        }
    }
    outcome(worst < 1e-4, format!("max rel err {worst:.2e} over 400 runs"))
}

fn kl_paths() -> Result<Outcome> {
    let mut rng = SeededRng::new(2024);
    let d = 16;
    let (mut value_gap, mut grad_gap): (f64, f64) = (0.0, 0.0);
    let mut peak_ok = true;
    let mut long = 0;
    for _ in 0..50 {
        let t = 1 + rng.below(2048);
        let v = 2 + rng.below(511);
        let cfg = LossConfig { kl_chunk: 128, vocab_tile: 1 + rng.below(96), ..LossConfig::default() };
        let scale = 3.0 / (d as f64).sqrt();
        let hs: Tensor<f64> = rng.normal_tensor(&[t, d], 1.0);
        let ws: Tensor<f64> = rng.normal_tensor(&[v, d], scale);
        let ht: Tensor<f64> = rng.normal_tensor(&[t, d], 1.0);
        let wt: Tensor<f64> = rng.normal_tensor(&[v, d], scale);
        let zs = linear(&hs, &ws)?;
        let zt = linear(&ht, &wt)?;
        let naive = kl_naive(&zs, &zt, cfg.direction)?;
        let dz = naive.grad.as_ref().expect("gradient");
        let mut dw = Tensor::zeros(ws.shape().to_vec());
        let dh = linear_backward(&hs, &ws, dz, &mut dw)?;
        let chunked = kl_chunked(&zs, &zt, &cfg)?;
        let online = kl_online(&zs, &zt, &cfg)?;
        let hidden = kl_hidden(&hs, &ws, &ht, &wt, &cfg)?;
        for r in [&chunked, &online, &hidden] {
            value_gap = value_gap.max((r.value - naive.value).abs());
        }
        for r in [&chunked, &online] {
            grad_gap = grad_gap.max(r.grad.as_ref().expect("gradient").max_abs_diff(dz)?);
        }
        grad_gap = grad_gap.max(hidden.grad.as_ref().expect("gradient").max_abs_diff(&dh)?);
        grad_gap = grad_gap.max(hidden.grad_weight.as_ref().expect("weight gradient").max_abs_diff(&dw)?);
        if t > cfg.kl_chunk {
            long += 1;
            peak_ok &= [&chunked, &online, &hidden].iter().all(|r| r.peak_elements < t * v);
        }
    }
    outcome(
        value_gap < 1e-5 && grad_gap < 1e-4 && peak_ok && long > 0,
        format!("value gap {value_gap:.2e}, grad gap {grad_gap:.2e}, peaks below T*V on {long} long instances: {peak_ok}"),
    )
}

fn toy_hybrid(teacher_seed: u64, mla_layers: Vec<usize>) -> Result<(hylo_core::teacher::TeacherCheckpoint<f64>, HybridModel<f64>)> {
    let cfg = toy_config();
    let teacher = gen_toy_teacher::<f64>(&cfg, teacher_seed)?;
    let mla = MlaConfig::for_teacher(&cfg, 12)?;
    let gdn = GdnConfig::new(cfg.d_model, 2)?;
    let model = HybridModel::from_teacher(&teacher, &HybridLayout::new(cfg.n_layers, mla_layers)?, &mla, &gdn, 2)?;
    Ok((teacher, model))
}

fn grad_audits() -> Result<Outcome> {
    let (teacher, model) = toy_hybrid(1, vec![1])?;
    let checks = check_gradients(&model, &teacher, 11)?;
    let names = ["kl_naive", "fused_linear_ce", "mla block", "gdn block"];
    let all_present = names.iter().all(|n| checks.iter().any(|c| c.name.contains(n)));
    let detail = checks.iter().map(|c| format!("{} {:.1e}", c.name.trim_start_matches("grad audit, "), c.value)).collect::<Vec<_>>();
    outcome(
        all_present && AUDIT_PROBES >= 32 && checks.iter().all(|c| c.passed),
        format!("{} probes each: {}", AUDIT_PROBES, detail.join(", ")),
    )
}

fn svd_init() -> Result<Outcome> {
    let cfg = toy_config();
    let mut mla = MlaConfig::for_teacher(&cfg, cfg.head_dim)?;
    mla.r_q = cfg.q_dim().min(cfg.d_model);
    mla.r_kv = (2 * cfg.q_dim()).min(cfg.d_model);
    let full = mla.d_qk_nope + mla.d_qk_rope == cfg.head_dim;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let teacher = gen_toy_teacher::<f64>(&cfg, 1000 + seed)?;
        for layer in &teacher.layers {
            let w = init_mla_from_teacher(&layer.attn, &cfg, &mla)?;
            let (q, kv) = factor_reconstruction_errors(&w, &layer.attn, &cfg, &mla)?;
            worst = worst.max(q).max(kv);
        }
    }
    outcome(full && worst < 1e-5, format!("max rel Frobenius err {worst:.2e} over 20 teachers x 4 layers"))
}

fn gqa_fidelity() -> Result<Outcome> {
    let cfg = toy_config();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let teacher = gen_toy_teacher::<f64>(&cfg, 500 + seed)?;
        let tokens = SeededRng::new(seed).tokens(32, cfg.vocab);
        let z = teacher_forward(&teacher, &tokens, true, false)?.logits.expect("logits");
        worst = worst.max(max_abs_diff(&to_rows(&z), &mha_oracle_logits(&teacher, &tokens)));
    }
    outcome(worst < 1e-6, format!("max abs diff {worst:.2e} over 10 seeds"))
}

fn decode_consistency() -> Result<Outcome> {
    let (_, model) = toy_hybrid(3, vec![1])?;
    let tokens = SeededRng::new(9).tokens(16 + 64, model.teacher_config.vocab);
    let full = model.forward(&tokens, false, true)?.logits.expect("logits");
    let mut session = DecodeSession::new(&model)?;
    let prefill = session.logits(&tokens[..16])?;
    let mut worst = prefill.max_abs_diff(&full.slice_rows(0, 16))?;
    for (i, &tok) in tokens[16..].iter().enumerate() {
        let step = session.logits(&[tok])?;
        worst = worst.max(step.max_abs_diff(&full.slice_rows(16 + i, 17 + i))?);
    }
    let per_token = model.mla_config.r_kv + model.mla_config.d_qk_rope;
    let mut cache_ok = false;
    for c in session.caches() {
        if let LayerCache::Mla(c) = c {
            cache_ok = c.elements_per_token() == per_token && c.elements() == tokens.len() * per_token;
        }
    }
    outcome(worst < 1e-5 && cache_ok, format!("max abs diff {worst:.2e}; mla cache {per_token} elements/token: {cache_ok}"))
}

fn desk_training() -> Result<Outcome> {
    let cfg = toy_config();
    let teacher = gen_toy_teacher::<f64>(&cfg, 1)?;
    let mla = MlaConfig::for_teacher(&cfg, 12)?;
    let gdn = GdnConfig::new(cfg.d_model, 2)?;
    let corpus = BigramCorpus::new(cfg.vocab, 1)?;
    let mut rng = SeededRng::new(5);
    let data: Vec<Vec<u32>> = (0..64).map(|_| corpus.sample(512, &mut rng)).collect();
    let heldout: Vec<Vec<u32>> = (0..8).map(|_| corpus.sample(512, &mut rng)).collect();
    let short: Vec<Vec<u32>> = data.iter().map(|d| d[..128].to_vec()).collect();

    let mut s1 = TrainConfig::stage1();
    s1.context_len = 128;
    s1.steps = 200;
    s1.lr = 3e-3;
    let mut pure_gdn =
        HybridModel::from_teacher(&teacher, &HybridLayout::all_linear(cfg.n_layers, LinearKind::Gdn), &mla, &gdn, 2)?;
    let mut pure_mla = HybridModel::from_teacher(&teacher, &HybridLayout::all_mla(cfg.n_layers), &mla, &gdn, 2)?;
    let r1 = train_stage1_ild(&mut pure_gdn, &teacher, &short, &s1)?;
    train_stage1_ild(&mut pure_mla, &teacher, &short, &s1)?;
    let ild_drop = r1.reduction().unwrap_or(0.0);

    let mut hybrid = assemble_hybrid(&pure_mla, &pure_gdn, &HybridLayout::new(cfg.n_layers, vec![1])?, Donor::Mla)?;
    let mut s2 = TrainConfig::stage2();
    s2.context_len = 512;
    s2.steps = 500;
    s2.lr = 3e-3;
    let r2 = train_stage2_sft(&mut hybrid, &teacher, &data, &heldout, &s2)?;
    let kd_drop = r2.reduction().unwrap_or(0.0);
    let agree = r2.metrics.get("agreement_after").copied().unwrap_or(0.0);

    let mla_niah = MlaConfig::for_teacher(&cfg, 20)?;
    let gdn_niah = GdnConfig::new(cfg.d_model, 1)?;
    let mut student = HybridModel::from_teacher(&teacher, &HybridLayout::new(cfg.n_layers, vec![0])?, &mla_niah, &gdn_niah, 2)?;
    let mut s3 = TrainConfig::stage2();
    s3.context_len = 128;
    s3.steps = 2000;
    s3.batch = 16;
    s3.lr = 1e-2;
    let train = recall_curriculum(128, 2, s3.steps, s3.batch, 1)?;
    let held = niah_generate(128, 1, 200, 2)?;
    let r3 = train_niah(&mut student, &train, &held, &s3)?;
    let acc = r3.metrics.get("accuracy_after").copied().unwrap_or(0.0);

    outcome(
        ild_drop >= 0.5 && kd_drop >= 0.6 && agree >= 0.8 && acc >= 0.9,
        format!(
            "stage I ILD drop {:.0}%, stage II KL drop {:.0}%, agreement {:.0}%, retrieval at 128 tokens {:.1}%",
            ild_drop * 100.0,
            kd_drop * 100.0,
            agree * 100.0,
            acc * 100.0
        ),
    )
}

type Criterion = (&'static str, Duration, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("kv-cache accounting", Duration::from_secs(1), kv_accounting),
        ("logit memory plan", Duration::from_secs(1), logit_memory),
        ("gdn parameter count", Duration::from_secs(1), gdn_params),
        ("gdn chunked vs sequential", Duration::from_secs(60), gdn_scan),
        ("kl path agreement", Duration::from_secs(120), kl_paths),
        ("gradient audits", Duration::from_secs(120), grad_audits),
        ("svd init reconstruction", Duration::from_secs(60), svd_init),
        ("gqa fidelity", Duration::from_secs(30), gqa_fidelity),
        ("decode consistency", Duration::from_secs(60), decode_consistency),
        ("desk training", Duration::from_secs(900), desk_training),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (passed, detail) = match result {
            Ok(o) => (o.passed && elapsed <= *limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<27} {}  [{:.2}s / {}s]  {detail}",
            i + 1,
            name,
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
