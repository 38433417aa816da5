//! Desk-scale training: Stage I intermediate-layer distillation on pure
//! student models, Stage II end-to-end knowledge distillation of the
//! assembled hybrid, retrieval fine-tuning on synthetic haystacks, and
//! finite-difference gradient audits.

mod audit;
mod data;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use audit::{grad_audit, GradAudit, Probe, AUDIT_STEP};
pub use data::{
    niah_accuracy, niah_generate, recall_curriculum, recall_generate, BigramCorpus, NiahSample, RecallSample, NIAH_FILLER, NIAH_KEYS, NIAH_QUERY, NIAH_VALUES,
    NIAH_VOCAB,
};
pub use optim::{Adam, CosineSchedule};

use crate::error::{Error, Result};
use crate::hybrid::{is_mixer_param, HybridModel, TraceGrad};
use crate::losses::{fused_linear_ce, ild_loss, kl_chunked, kl_hidden, kl_naive, kl_online, LossConfig, LossValueAndGrad};
use crate::numerics::{linear, linear_backward, AllocProbe, Tensor};
use crate::params::Params;
use crate::scalar::Scalar;
use crate::teacher::{teacher_forward, TeacherCheckpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Hidden-state and mixer-output alignment of pure students.
    #[serde(rename = "1")]
    Ild,
    /// Output-level distillation of the hybrid.
    #[serde(rename = "2")]
    Sft,
}

/// How the Stage II KL is evaluated. All paths give the same value and
/// gradient; they differ in the buffers they materialize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossPath {
    Naive,
    Chunked,
    Online,
    #[default]
    Hidden,
}

impl LossPath {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "chunked" => Ok(Self::Chunked),
            "online" => Ok(Self::Online),
            "hidden" => Ok(Self::Hidden),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss path `{other}` (expected naive, chunked, online or hidden)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub context_len: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub loss_path: LossPath,
    pub loss: LossConfig,
    /// Global-norm gradient clipping; off by default.
    pub clip: Option<f64>,
    /// Stage I normally updates mixer weights only.
    pub train_all: bool,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Ild,
            context_len: 2048,
            steps: 100,
            batch: 1,
            lr: 2e-4,
            warmup_ratio: 0.01,
            seed: 0,
            loss_path: LossPath::Hidden,
            loss: LossConfig::default(),
            clip: None,
            train_all: false,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Sft,
            context_len: 512,
            train_all: true,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio must be in [0, 1), got {}", self.warmup_ratio)));
        }
        if self.context_len == 0 || self.batch == 0 {
            return Err(Error::Config("context_len and batch must be at least 1".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config("clip must be positive".into()));
            }
        }
        self.loss.validate()
    }

    fn schedule(&self) -> CosineSchedule {
        CosineSchedule::new(self.lr, self.warmup_ratio, self.steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: Vec<StepRecord>,
    pub metrics: BTreeMap<String, f64>,
    pub grad_audit: Option<f64>,
    pub wall_clock_s: f64,
    /// Largest single tensor (elements) allocated inside a training step.
    pub peak_elements: usize,
}

/// Window of the smoothed start/end losses.
pub const SMOOTHING: usize = 5;

impl TrainReport {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            steps: Vec::new(),
            metrics: BTreeMap::new(),
            grad_audit: None,
            wall_clock_s: 0.0,
            peak_elements: 0,
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean loss over the first [`SMOOTHING`] steps.
    pub fn start_loss(&self) -> Option<f64> {
        mean(self.steps.iter().take(SMOOTHING).map(|s| s.loss))
    }

    /// Mean loss over the last [`SMOOTHING`] steps.
    pub fn end_loss(&self) -> Option<f64> {
        mean(self.steps.iter().rev().take(SMOOTHING).map(|s| s.loss))
    }

    /// Fractional drop from the smoothed start to the smoothed end loss.
    pub fn reduction(&self) -> Option<f64> {
        match (self.start_loss(), self.end_loss()) {
            (Some(a), Some(b)) if a > 0.0 => Some(1.0 - b / a),
            _ => None,
        }
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("step records serialize"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "stage": self.stage,
            "steps": self.steps.len(),
            "start_loss": self.start_loss(),
            "end_loss": self.end_loss(),
            "reduction": self.reduction(),
            "metrics": self.metrics,
            "grad_audit": self.grad_audit,
            "wall_clock_s": self.wall_clock_s,
            "peak_elements": self.peak_elements,
        })
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(s) = self.steps.iter().find(|s| !s.loss.is_finite()) {
            return Err(Error::NonFinite(format!("training loss at step {}", s.step)));
        }
        for (k, v) in [("start_loss", self.start_loss()), ("end_loss", self.end_loss()), ("reduction", self.reduction())] {
            if let Some(v) = v {
                self.metrics.insert(k.to_string(), v);
            }
        }
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn batch_of<'a, D>(data: &'a [D], step: usize, batch: usize) -> impl Iterator<Item = &'a D> {
    (0..batch).map(move |b| &data[(step * batch + b) % data.len()])
}

fn check_pair<T: Scalar>(student: &HybridModel<T>, teacher: &TeacherCheckpoint<T>) -> Result<()> {
    let (s, t) = (&student.teacher_config, &teacher.config);
    if student.layers.len() != teacher.layers.len() || s.d_model != t.d_model {
        return Err(Error::Shape(format!(
            "student has {} layers of width {}, teacher {} of width {}",
            student.layers.len(),
            s.d_model,
            teacher.layers.len(),
            t.d_model
        )));
    }
    if student.lm_head.rows() != teacher.lm_head.rows() {
        return Err(Error::Shape(format!(
            "vocabulary mismatch: student {}, teacher {}",
            student.lm_head.rows(),
            teacher.lm_head.rows()
        )));
    }
    Ok(())
}

fn check_data(data: &[Vec<u32>], what: &str) -> Result<()> {
    if data.is_empty() || data.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("{what} needs at least one non-empty sequence")));
    }
    Ok(())
}

/// Optimizer mask: Stage I touches mixer weights only unless `train_all`.
fn param_mask<T: Scalar>(model: &HybridModel<T>, mixers_only: bool) -> Vec<bool> {
    model
        .tensors()
        .iter()
        .map(|(n, _)| !mixers_only || is_mixer_param(n))
        .collect()
}

/// Shared step loop: `step_loss` returns the batch loss and fills the
/// gradient buffer.
fn run<T: Scalar>(
    model: &mut HybridModel<T>,
    cfg: &TrainConfig,
    mask: Vec<bool>,
    report: &mut TrainReport,
    mut step_loss: impl FnMut(&HybridModel<T>, usize, &mut HybridModel<T>) -> Result<f64>,
) -> Result<()> {
    let schedule = cfg.schedule();
    let mut opt = Adam::new(model, mask, cfg.clip)?;
    let mut grad = model.zeros_like();
    for step in 0..cfg.steps {
        for (_, g) in grad.tensors_mut() {
            g.fill(T::zero());
        }
        let probe = AllocProbe::start();
        let loss = step_loss(model, step, &mut grad)?;
        report.peak_elements = report.peak_elements.max(probe.max_elements());
        drop(probe);
        let lr = schedule.at(step);
        let grad_norm = opt.grad_norm(&grad);
        opt.step(model, &grad, lr)?;
        report.steps.push(StepRecord {
            step,
            loss,
            lr,
            grad_norm,
        });
    }
    Ok(())
}

/// Loss of one student on one sequence against the teacher trace.
pub fn ild_step<T: Scalar>(
    student: &HybridModel<T>,
    teacher: &TeacherCheckpoint<T>,
    tokens: &[u32],
    weight: T,
    grad: &mut HybridModel<T>,
) -> Result<T> {
    let target = teacher_forward(teacher, tokens, false, true)?;
    let (trace, tape) = student.forward_tape(tokens)?;
    let ild = ild_loss(
        &trace.hidden_states,
        &trace.mixer_outputs,
        &target.hidden_states,
        &target.mixer_outputs,
    )?;
    let up = TraceGrad {
        hidden: ild.grad_hidden.into_iter().map(|g| Some(g.scale(weight))).collect(),
        mixer: ild.grad_mixer.into_iter().map(|g| Some(g.scale(weight))).collect(),
        final_hidden: None,
    };
    student.backward(&tape, &up, grad)?;
    Ok(ild.value)
}

/// Stage I: aligns every layer's hidden state and mixer output with the
/// teacher's. Only mixer weights move unless `cfg.train_all`.
pub fn train_stage1_ild<T: Scalar>(
    student: &mut HybridModel<T>,
    teacher: &TeacherCheckpoint<T>,
    data: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_pair(student, teacher)?;
    check_data(data, "stage I")?;
    let started = Instant::now();
    let mut report = TrainReport::new(Stage::Ild);
    let mask = param_mask(student, !cfg.train_all);
    let weight = T::of(1.0 / cfg.batch as f64);
    run(student, cfg, mask, &mut report, |model, step, grad| {
        let mut total = 0.0;
        for seq in batch_of(data, step, cfg.batch) {
            total += ild_step(model, teacher, &seq[..seq.len().min(cfg.context_len)], weight, grad)?.f64();
        }
        Ok(total / cfg.batch as f64)
    })?;
    report.wall_clock_s = started.elapsed().as_secs_f64();
    report.finish()?;
    Ok(report)
}

/// KL between student and teacher next-token distributions on `tokens`
/// along `path`, with gradients pushed into `grad`. The teacher runs without
/// gradients, and without logits on the hidden path.
pub fn kd_step<T: Scalar>(
    student: &HybridModel<T>,
    teacher: &TeacherCheckpoint<T>,
    tokens: &[u32],
    path: LossPath,
    loss_cfg: &LossConfig,
    weight: T,
    grad: &mut HybridModel<T>,
) -> Result<T> {
    let target = teacher_forward(teacher, tokens, path != LossPath::Hidden, false)?;
    let (trace, tape) = student.forward_tape(tokens)?;
    let hs = &trace.final_hidden;
    let (value, dh) = if path == LossPath::Hidden {
        let r = kl_hidden(hs, &student.lm_head, &target.final_hidden, &teacher.lm_head, loss_cfg)?;
        let dw = r.grad_weight.ok_or_else(|| Error::Shape("hidden KL returned no weight gradient".into()))?;
        grad.lm_head.add_assign(&dw.scale(weight))?;
        (r.value, r.grad.expect("hidden KL returns an input gradient"))
    } else {
        let zs = linear(hs, &student.lm_head)?;
        let zt = target.logits.as_ref().expect("teacher logits requested");
        let r: LossValueAndGrad<T> = match path {
            LossPath::Naive => kl_naive(&zs, zt, loss_cfg.direction)?,
            LossPath::Chunked => kl_chunked(&zs, zt, loss_cfg)?,
            LossPath::Online => kl_online(&zs, zt, loss_cfg)?,
            LossPath::Hidden => unreachable!(),
        };
        let dz = r.grad.expect("KL returns a logit gradient").scale(weight);
        let dh = linear_backward(hs, &student.lm_head, &dz, &mut grad.lm_head)?;
        return finish_kd(student, &tape, dh, grad, r.value);
    };
    finish_kd(student, &tape, dh.scale(weight), grad, value)
}

fn finish_kd<T: Scalar>(
    student: &HybridModel<T>,
    tape: &crate::hybrid::HybridTape<T>,
    dh: Tensor<T>,
    grad: &mut HybridModel<T>,
    value: T,
) -> Result<T> {
    let mut up = TraceGrad::empty(student.layers.len());
    up.final_hidden = Some(dh);
    student.backward(tape, &up, grad)?;
    Ok(value)
}

/// Held-out KL and next-token argmax agreement with the teacher.
pub fn kd_eval<T: Scalar>(
    student: &HybridModel<T>,
    teacher: &TeacherCheckpoint<T>,
    heldout: &[Vec<u32>],
    loss_cfg: &LossConfig,
) -> Result<(f64, f64)> {
    check_data(heldout, "evaluation")?;
    let (mut kl, mut agree, mut positions) = (0.0, 0usize, 0usize);
    for seq in heldout {
        let zs = student.forward(seq, false, true)?.logits.expect("logits requested");
        let zt = teacher_forward(teacher, seq, true, false)?.logits.expect("logits requested");
        kl += kl_naive(&zs, &zt, loss_cfg.direction)?.value.f64();
        for t in 0..zs.rows() {
            if crate::hybrid::argmax(zs.row(t)) == crate::hybrid::argmax(zt.row(t)) {
                agree += 1;
            }
        }
        positions += zs.rows();
    }
    Ok((kl / heldout.len() as f64, agree as f64 / positions as f64))
}

/// Stage II: end-to-end output-level distillation of the hybrid. Reports
/// held-out KL and teacher-argmax agreement before and after.
pub fn train_stage2_sft<T: Scalar>(
    model: &mut HybridModel<T>,
    teacher: &TeacherCheckpoint<T>,
    data: &[Vec<u32>],
    heldout: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_pair(model, teacher)?;
    check_data(data, "stage II")?;
    let started = Instant::now();
    let mut report = TrainReport::new(Stage::Sft);
    if !heldout.is_empty() {
        let (kl, agree) = kd_eval(model, teacher, heldout, &cfg.loss)?;
        report.metrics.insert("heldout_kl_before".into(), kl);
        report.metrics.insert("agreement_before".into(), agree);
    }
    let mask = param_mask(model, !cfg.train_all);
    let weight = T::of(1.0 / cfg.batch as f64);
    run(model, cfg, mask, &mut report, |m, step, grad| {
        let mut total = 0.0;
        for seq in batch_of(data, step, cfg.batch) {
            let seq = &seq[..seq.len().min(cfg.context_len)];
            total += kd_step(m, teacher, seq, cfg.loss_path, &cfg.loss, weight, grad)?.f64();
        }
        Ok(total / cfg.batch as f64)
    })?;
    if !heldout.is_empty() {
        let (kl, agree) = kd_eval(model, teacher, heldout, &cfg.loss)?;
        report.metrics.insert("heldout_kl_after".into(), kl);
        report.metrics.insert("agreement_after".into(), agree);
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    report.finish()?;
    Ok(report)
}

/// Value decoded at the last position: argmax of the logits restricted to
/// the value range.
pub fn niah_predict<T: Scalar>(model: &HybridModel<T>, tokens: &[u32]) -> Result<u32> {
    let h = model.forward(tokens, false, false)?.final_hidden;
    let last = h.slice_rows(h.rows() - 1, h.rows());
    let heads = model.lm_head.slice_rows(NIAH_VALUES.start as usize, NIAH_VALUES.end as usize);
    let z = linear(&last, &heads)?;
    Ok(NIAH_VALUES.start + crate::hybrid::argmax(z.row(0)) as u32)
}

/// Retrieval accuracy of `model` on `samples`.
pub fn niah_eval<T: Scalar>(model: &HybridModel<T>, samples: &[NiahSample]) -> Result<f64> {
    if model.lm_head.rows() < NIAH_VOCAB {
        return Err(Error::Config(format!("retrieval task needs a vocabulary of {NIAH_VOCAB}")));
    }
    niah_accuracy(samples, |t| niah_predict(model, t))
}

/// Cross-entropy fine-tuning on retrieval sequences (loss on the target
/// positions only), consumed in order. Only mixers move unless
/// `cfg.train_all`. Reports held-out single-query accuracy before and after.
pub fn train_niah<T: Scalar>(
    model: &mut HybridModel<T>,
    data: &[RecallSample],
    heldout: &[NiahSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() || data.iter().any(|s| s.targets.is_empty()) {
        return Err(Error::InvalidArgument("retrieval training needs samples with targets".into()));
    }
    let started = Instant::now();
    let mut report = TrainReport::new(Stage::Sft);
    if !heldout.is_empty() {
        report.metrics.insert("accuracy_before".into(), niah_eval(model, heldout)?);
    }
    let mask = param_mask(model, !cfg.train_all);
    let weight = T::of(1.0 / cfg.batch as f64);
    run(model, cfg, mask, &mut report, |m, step, grad| {
        let mut total = 0.0;
        for s in batch_of(data, step, cfg.batch) {
            let (trace, tape) = m.forward_tape(&s.tokens)?;
            let h = &trace.final_hidden;
            let rows: Vec<&[T]> = s.targets.iter().map(|&(at, _)| h.row(at)).collect();
            let picked = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
            let answers: Vec<u32> = s.targets.iter().map(|&(_, v)| v).collect();
            let r = fused_linear_ce(&picked, &m.lm_head, &answers, &cfg.loss)?;
            grad.lm_head.add_assign(&r.grad_weight.expect("ce weight gradient").scale(weight))?;
            let dpicked = r.grad.expect("ce input gradient").scale(weight);
            let mut dh = Tensor::zeros(h.shape().to_vec());
            for (i, &(at, _)) in s.targets.iter().enumerate() {
                for (a, &b) in dh.row_mut(at).iter_mut().zip(dpicked.row(i)) {
                    *a += b;
                }
            }
            let mut up = TraceGrad::empty(m.layers.len());
            up.final_hidden = Some(dh);
            m.backward(&tape, &up, grad)?;
            total += r.value.f64();
        }
        Ok(total / cfg.batch as f64)
    })?;
    if !heldout.is_empty() {
        report.metrics.insert("accuracy_after".into(), niah_eval(model, heldout)?);
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    report.finish()?;
    Ok(report)
}
