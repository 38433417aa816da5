//! Invariant suite run against a converted hybrid and its teacher.
//!
//! Each check produces a measured value and the threshold it must stay
//! under; the table is what `verify` prints.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gdn::{gdn_forward_chunked, gdn_forward_sequential};
use crate::hybrid::{HybridModel, Mixer};
use crate::losses::{fused_linear_ce, kl_chunked, kl_hidden, kl_naive, kl_online, LossConfig};
use crate::mla::factor_reconstruction_errors;
use crate::numerics::{linear, linear_backward, svd, Tensor};
use crate::params::Params;
use crate::rng::SeededRng;
use crate::teacher::{teacher_forward, TeacherCheckpoint};
use crate::train::{grad_audit, kd_step, LossPath};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value.is_finite() && value < threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>10}  {:>10}  result", "check", "value", "limit")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<width$}  {:>10.3e}  {:>10.1e}  {}",
                c.name,
                c.value,
                c.threshold,
                if c.passed { "pass" } else { "FAIL" }
            )?;
        }
        write!(f, "{} of {} checks passed", self.checks.len() - self.failures(), self.checks.len())
    }
}

pub const RECONSTRUCTION_SLACK: f64 = 1e-6;
pub const SCAN_TOL: f64 = 1e-4;
pub const KL_VALUE_TOL: f64 = 1e-5;
pub const KL_GRAD_TOL: f64 = 1e-4;
pub const LOSS_AUDIT_TOL: f64 = 1e-3;
pub const BLOCK_AUDIT_TOL: f64 = 1e-2;
pub const AUDIT_PROBES: usize = 32;

/// Relative Frobenius error of the best rank-`r` approximation of `a`.
fn truncation_floor(a: &Tensor<f64>, r: usize) -> Result<f64> {
    let full = svd(a, a.rows().min(a.cols()))?;
    let s = full.sigma.data();
    let total: f64 = s.iter().map(|x| x * x).sum();
    let tail: f64 = s.iter().skip(r).map(|x| x * x).sum();
    Ok(if total > 0.0 { (tail / total).sqrt() } else { 0.0 })
}

fn rel_diff(a: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64> {
    let scale = reference.max_abs().max(1e-12);
    Ok(a.max_abs_diff(reference)? / scale)
}

/// Checks that every MLA layer's factors are as good as the optimal
/// truncation of the matching teacher matrices allows.
pub fn check_reconstruction(model: &HybridModel<f64>, teacher: &TeacherCheckpoint<f64>) -> Result<Vec<Check>> {
    let cfg = &model.mla_config;
    let tc = &model.teacher_config;
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let Mixer::Mla(w) = &layer.mixer else { continue };
        let attn = &teacher.layers[i].attn;
        let (q_err, kv_err) = factor_reconstruction_errors(w, attn, tc, cfg)?;
        let q_floor = truncation_floor(&attn.wq, cfg.r_q)?;
        let k_full = crate::numerics::repeat_kv(&attn.wk, tc.head_dim, tc.group())?;
        let v_full = crate::numerics::repeat_kv(&attn.wv, tc.head_dim, tc.group())?;
        let kv_floor = truncation_floor(&Tensor::vstack(&[&k_full, &v_full])?, cfg.r_kv)?;
        // The checked rows are a subset of the factored matrix, so their
        // error can only be smaller than the optimum over all rows.
        let excess = (q_err - q_floor).max(kv_err - kv_floor).max(0.0);
        out.push(Check::new(format!("svd reconstruction, layer {i}"), excess, RECONSTRUCTION_SLACK));
    }
    Ok(out)
}

/// Chunked and sequential GDN forwards agree on every GDN layer.
pub fn check_gdn_scan(model: &HybridModel<f64>, seed: u64) -> Result<Vec<Check>> {
    let mut rng = SeededRng::derive(seed, 0x7363);
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let Mixer::Gdn(w) = &layer.mixer else { continue };
        let mut worst: f64 = 0.0;
        for t in [model.gdn_config.chunk + 6, 2 * model.gdn_config.chunk + 1] {
            let x: Tensor<f64> = rng.normal_tensor(&[t, model.gdn_config.d_model], 1.0);
            let (seq, _) = gdn_forward_sequential(w, &model.gdn_config, &x, None)?;
            let (chunk, _) = gdn_forward_chunked(w, &model.gdn_config, &x, None)?;
            worst = worst.max(rel_diff(&chunk, &seq)?);
        }
        out.push(Check::new(format!("gdn chunked vs sequential, layer {i}"), worst, SCAN_TOL));
    }
    Ok(out)
}

/// All KL paths give the naive value and gradient on the model's own hidden
/// states and the teacher's logits.
pub fn check_kl_paths(model: &HybridModel<f64>, teacher: &TeacherCheckpoint<f64>, seed: u64) -> Result<Vec<Check>> {
    let vocab = model.teacher_config.vocab;
    let tokens = SeededRng::derive(seed, 0x6b6c).tokens(48, vocab);
    let hs = model.forward(&tokens, false, false)?.final_hidden;
    let target = teacher_forward(teacher, &tokens, true, false)?;
    let zt = target.logits.as_ref().expect("logits requested");
    let zs = linear(&hs, &model.lm_head)?;
    let cfg = LossConfig {
        kl_chunk: 16,
        vocab_tile: 16,
        ..LossConfig::default()
    };
    let reference = kl_naive(&zs, zt, cfg.direction)?;
    let ref_dz = reference.grad.expect("naive KL returns a gradient");
    let mut scratch = model.lm_head.zeros_like();
    let ref_dh = linear_backward(&hs, &model.lm_head, &ref_dz, &mut scratch)?;

    let mut value_gap: f64 = 0.0;
    let mut grad_gap: f64 = 0.0;
    for r in [kl_chunked(&zs, zt, &cfg)?, kl_online(&zs, zt, &cfg)?] {
        value_gap = value_gap.max((r.value - reference.value).abs());
        grad_gap = grad_gap.max(rel_diff(r.grad.as_ref().expect("gradient"), &ref_dz)?);
    }
    let hidden = kl_hidden(&hs, &model.lm_head, &target.final_hidden, &teacher.lm_head, &cfg)?;
    value_gap = value_gap.max((hidden.value - reference.value).abs());
    grad_gap = grad_gap.max(rel_diff(hidden.grad.as_ref().expect("gradient"), &ref_dh)?);
    Ok(vec![
        Check::new("kl paths, value", value_gap, KL_VALUE_TOL),
        Check::new("kl paths, gradient", grad_gap, KL_GRAD_TOL),
    ])
}

/// Finite-difference audits of the losses and of the first MLA and GDN
/// blocks trained through the distillation loss.
pub fn check_gradients(model: &HybridModel<f64>, teacher: &TeacherCheckpoint<f64>, seed: u64) -> Result<Vec<Check>> {
    let mut rng = SeededRng::derive(seed, 0x6761);
    let cfg = LossConfig::default();
    let mut out = Vec::new();

    let zs: Tensor<f64> = rng.normal_tensor(&[6, 40], 1.0);
    let zt: Tensor<f64> = rng.normal_tensor(&[6, 40], 1.0);
    let g = kl_naive(&zs, &zt, cfg.direction)?.grad.expect("gradient");
    let audit = grad_audit(&zs, |z| Ok(kl_naive(z, &zt, cfg.direction)?.value), &g, AUDIT_PROBES, seed)?;
    out.push(Check::new("grad audit, kl_naive", audit.max_rel_err, LOSS_AUDIT_TOL));

    let h: Tensor<f64> = rng.normal_tensor(&[6, 12], 1.0);
    let w: Tensor<f64> = rng.normal_tensor(&[40, 12], 0.5);
    let targets: Vec<u32> = rng.tokens(6, 40);
    let g = fused_linear_ce(&h, &w, &targets, &cfg)?.grad_weight.expect("weight gradient");
    let audit = grad_audit(&w, |w| Ok(fused_linear_ce(&h, w, &targets, &cfg)?.value), &g, AUDIT_PROBES, seed)?;
    out.push(Check::new("grad audit, fused_linear_ce", audit.max_rel_err, LOSS_AUDIT_TOL));

    let tokens = rng.tokens(12, model.teacher_config.vocab);
    let mut grad = model.zeros_like();
    kd_step(model, teacher, &tokens, LossPath::Naive, &cfg, 1.0, &mut grad)?;
    let kd = |m: &HybridModel<f64>| -> Result<f64> {
        let mut scratch = m.zeros_like();
        kd_step(m, teacher, &tokens, LossPath::Naive, &cfg, 1.0, &mut scratch)
    };
    let with_mixer = |i: usize, mixer: Mixer<f64>| {
        let mut m = model.clone();
        m.layers[i].mixer = mixer;
        m
    };
    if let Some(i) = model.layers.iter().position(|l| matches!(l.mixer, Mixer::Mla(_))) {
        let (Mixer::Mla(w), Mixer::Mla(g)) = (&model.layers[i].mixer, &grad.layers[i].mixer) else { unreachable!() };
        let audit = grad_audit(w, |w| kd(&with_mixer(i, Mixer::Mla(w.clone()))), g, AUDIT_PROBES, seed)?;
        out.push(Check::new(format!("grad audit, mla block {i}"), audit.max_rel_err, BLOCK_AUDIT_TOL));
    }
    if let Some(i) = model.layers.iter().position(|l| matches!(l.mixer, Mixer::Gdn(_))) {
        let (Mixer::Gdn(w), Mixer::Gdn(g)) = (&model.layers[i].mixer, &grad.layers[i].mixer) else { unreachable!() };
        let audit = grad_audit(w, |w| kd(&with_mixer(i, Mixer::Gdn(w.clone()))), g, AUDIT_PROBES, seed)?;
        out.push(Check::new(format!("grad audit, gdn block {i}"), audit.max_rel_err, BLOCK_AUDIT_TOL));
    }
    Ok(out)
}

/// Runs every check. The model and teacher must share a configuration.
pub fn verify_suite(model: &HybridModel<f64>, teacher: &TeacherCheckpoint<f64>, seed: u64) -> Result<VerifyReport> {
    model.validate()?;
    teacher.validate()?;
    if model.teacher_config != teacher.config {
        return Err(Error::Config("hybrid was not converted from this teacher configuration".into()));
    }
    let mut checks = check_reconstruction(model, teacher)?;
    checks.extend(check_gdn_scan(model, seed)?);
    checks.extend(check_kl_paths(model, teacher, seed)?);
    checks.extend(check_gradients(model, teacher, seed)?);
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{gen_toy_teacher, TransformerConfig};
    use crate::gdn::GdnConfig;
    use crate::hybrid::HybridLayout;
    use crate::mla::MlaConfig;

    fn toy() -> (HybridModel<f64>, TeacherCheckpoint<f64>) {
        let cfg = TransformerConfig::toy();
        let teacher = gen_toy_teacher::<f64>(&cfg, 3).unwrap();
        let mla = MlaConfig::for_teacher(&cfg, 12).unwrap();
        let gdn = GdnConfig::new(cfg.d_model, 2).unwrap();
        let layout = HybridLayout::new(cfg.n_layers, vec![1]).unwrap();
        (HybridModel::from_teacher(&teacher, &layout, &mla, &gdn, 5).unwrap(), teacher)
    }

    #[test]
    fn fresh_conversion_passes() {
        let (model, teacher) = toy();
        let report = verify_suite(&model, &teacher, 0).unwrap();
        assert!(report.all_passed(), "{report}");
        assert!(report.checks.len() >= 9);
    }

    #[test]
    fn perturbed_factors_fail_reconstruction() {
        let (mut model, teacher) = toy();
        if let Mixer::Mla(w) = &mut model.layers[1].mixer {
            w.wkva.data_mut()[0] += 1.0;
        }
        let checks = check_reconstruction(&model, &teacher).unwrap();
        assert!(!checks[0].passed);
    }
}
