//! Multi-head latent attention: queries and keys/values pass through low-rank
//! latents, and only the KV latent plus one shared rotary key is cached.

use serde::{Deserialize, Serialize};

use crate::attention::{causal_attention, causal_attention_backward, AttnDims, AttnProbs};
use crate::checkpoint::TransformerConfig;
use crate::error::{Error, Result};
use crate::numerics::{
    linear, linear_backward, matmul, repeat_kv, rmsnorm, rmsnorm_backward, sigmoid_scalar, svd, Tensor,
};
use crate::params::impl_params;
use crate::rope::Rope;
use crate::scalar::Scalar;
use crate::teacher::GqaWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlaConfig {
    pub r_q: usize,
    pub r_kv: usize,
    pub d_qk_nope: usize,
    pub d_qk_rope: usize,
    pub d_v: usize,
    pub n_heads: usize,
    /// Skip rotary embedding entirely.
    #[serde(default)]
    pub nope_mode: bool,
    /// Multiply the output by `sigmoid(W_gate x)`.
    #[serde(default)]
    pub gate_mode: bool,
    #[serde(default = "one")]
    pub yarn_factor: f64,
    pub rope_theta: f64,
    /// Rotary table length before YaRN scaling.
    pub max_position: usize,
    pub eps: f64,
}

fn one() -> f64 {
    1.0
}

impl MlaConfig {
    /// Default derivation from a teacher: half the head dimension is rotary,
    /// `d_v = d_h`, `r_q = 2·r_kv`, and `r_kv` fills the per-token cache budget
    /// `r_kv + d_qk_rope = cache_per_token`. Ranks are clipped to what the
    /// teacher matrices can supply.
    pub fn for_teacher(teacher: &TransformerConfig, cache_per_token: usize) -> Result<Self> {
        let d_qk_rope = teacher.head_dim / 2;
        if cache_per_token <= d_qk_rope {
            return Err(Error::Config(format!(
                "cache budget {cache_per_token} must exceed the rotary key width {d_qk_rope}"
            )));
        }
        let r_kv = cache_per_token - d_qk_rope;
        let cfg = Self {
            r_q: (2 * r_kv).min(teacher.q_dim().min(teacher.d_model)),
            r_kv,
            d_qk_nope: teacher.head_dim - d_qk_rope,
            d_qk_rope,
            d_v: teacher.head_dim,
            n_heads: teacher.n_q_heads,
            nope_mode: false,
            gate_mode: false,
            yarn_factor: 1.0,
            rope_theta: teacher.rope_theta,
            max_position: teacher.max_position,
            eps: teacher.eps,
        };
        cfg.validate_for(teacher)?;
        Ok(cfg)
    }

    /// Copy of `self` with a YaRN-scaled rotary table (`factor ≥ 1`).
    pub fn yarn_scale(&self, factor: f64) -> Result<Self> {
        if !(factor >= 1.0) {
            return Err(Error::InvalidArgument(format!("yarn factor {factor} < 1")));
        }
        Ok(Self {
            yarn_factor: factor,
            ..self.clone()
        })
    }

    pub fn qk_dim(&self) -> usize {
        self.d_qk_nope + self.d_qk_rope
    }

    /// Elements cached per token: the KV latent and the shared rotary key.
    pub fn cache_per_token(&self) -> usize {
        self.r_kv + self.d_qk_rope
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("r_q", self.r_q),
            ("r_kv", self.r_kv),
            ("d_qk_rope", self.d_qk_rope),
            ("d_v", self.d_v),
            ("n_heads", self.n_heads),
            ("max_position", self.max_position),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("mla {name} must be positive")));
            }
        }
        if self.d_qk_rope % 2 != 0 {
            return Err(Error::Config("mla d_qk_rope must be even".into()));
        }
        if !(self.yarn_factor >= 1.0) || !(self.eps > 0.0) || !(self.rope_theta > 0.0) {
            return Err(Error::Config("mla yarn_factor, eps and rope_theta out of range".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, teacher: &TransformerConfig) -> Result<()> {
        self.validate()?;
        if self.qk_dim() > teacher.head_dim {
            return Err(Error::Config(format!(
                "d_qk_nope + d_qk_rope = {} exceeds teacher head_dim {}",
                self.qk_dim(),
                teacher.head_dim
            )));
        }
        if self.d_v != teacher.head_dim || self.n_heads != teacher.n_q_heads {
            return Err(Error::Config("mla d_v and n_heads must match the teacher".into()));
        }
        let q_cap = teacher.q_dim().min(teacher.d_model);
        let kv_cap = (2 * teacher.q_dim()).min(teacher.d_model);
        if self.r_q > q_cap {
            return Err(Error::Rank { rank: self.r_q, rows: teacher.q_dim(), cols: teacher.d_model });
        }
        if self.r_kv > kv_cap {
            return Err(Error::Rank { rank: self.r_kv, rows: 2 * teacher.q_dim(), cols: teacher.d_model });
        }
        Ok(())
    }

    pub fn rope<T: Scalar>(&self) -> Result<Rope<T>> {
        Rope::yarn(self.d_qk_rope, self.rope_theta, self.max_position, self.yarn_factor)
    }

    fn dims(&self) -> AttnDims {
        AttnDims {
            n_heads: self.n_heads,
            n_kv_heads: self.n_heads,
            qk_dim: self.qk_dim(),
            v_dim: self.d_v,
        }
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / T::of(self.qk_dim() as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlaBlockWeights<T> {
    /// `r_q x d`
    pub wqa: Tensor<T>,
    pub norm_q: Tensor<T>,
    /// `H·d_qk_nope x r_q`
    pub wqb: Tensor<T>,
    /// `H·d_qk_rope x r_q`
    pub wqr: Tensor<T>,
    /// `r_kv x d`
    pub wkva: Tensor<T>,
    pub norm_kv: Tensor<T>,
    /// `H·d_qk_nope x r_kv`
    pub wkb: Tensor<T>,
    /// `H·d_v x r_kv`
    pub wvb: Tensor<T>,
    /// `d_qk_rope x d`
    pub wkr: Tensor<T>,
    /// `d x H·d_v`
    pub wo: Tensor<T>,
    /// `d x d`, present in gate mode.
    pub wgate: Option<Tensor<T>>,
}

impl_params!(MlaBlockWeights { wqa, norm_q, wqb, wqr, wkva, norm_kv, wkb, wvb, wkr, wo } optional { wgate });

impl<T: Scalar> MlaBlockWeights<T> {
    pub fn zeros(cfg: &MlaConfig, d: usize) -> Self {
        let h = cfg.n_heads;
        Self {
            wqa: Tensor::zeros([cfg.r_q, d]),
            norm_q: Tensor::full([cfg.r_q], T::one()),
            wqb: Tensor::zeros([h * cfg.d_qk_nope, cfg.r_q]),
            wqr: Tensor::zeros([h * cfg.d_qk_rope, cfg.r_q]),
            wkva: Tensor::zeros([cfg.r_kv, d]),
            norm_kv: Tensor::full([cfg.r_kv], T::one()),
            wkb: Tensor::zeros([h * cfg.d_qk_nope, cfg.r_kv]),
            wvb: Tensor::zeros([h * cfg.d_v, cfg.r_kv]),
            wkr: Tensor::zeros([cfg.d_qk_rope, d]),
            wo: Tensor::zeros([d, h * cfg.d_v]),
            wgate: cfg.gate_mode.then(|| Tensor::zeros([d, d])),
        }
    }
}

/// Compressed decode cache: one KV latent and one rotated shared key per token.
#[derive(Clone, Debug)]
pub struct MlaCache<T> {
    pub latents: Tensor<T>,
    pub rope_keys: Tensor<T>,
}

impl<T: Scalar> MlaCache<T> {
    pub fn new(cfg: &MlaConfig) -> Self {
        Self {
            latents: Tensor::zeros([0, cfg.r_kv]),
            rope_keys: Tensor::zeros([0, cfg.d_qk_rope]),
        }
    }

    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored elements per cached token.
    pub fn elements_per_token(&self) -> usize {
        self.latents.cols() + self.rope_keys.cols()
    }

    pub fn elements(&self) -> usize {
        self.latents.len() + self.rope_keys.len()
    }
}

/// Copies `width` columns starting at `start` out of every `stride`-wide
/// head block.
fn gather_heads<T: Scalar>(x: &Tensor<T>, heads: usize, stride: usize, start: usize, width: usize) -> Tensor<T> {
    let mut out = Tensor::zeros([x.rows(), heads * width]);
    for r in 0..x.rows() {
        let src = x.row(r);
        let dst = out.row_mut(r);
        for h in 0..heads {
            dst[h * width..(h + 1) * width]
                .copy_from_slice(&src[h * stride + start..h * stride + start + width]);
        }
    }
    out
}

/// Inverse of [`gather_heads`]: writes `src` blocks into `out`.
fn scatter_heads<T: Scalar>(src: &Tensor<T>, out: &mut Tensor<T>, heads: usize, stride: usize, start: usize, width: usize) {
    for r in 0..src.rows() {
        for h in 0..heads {
            out.row_mut(r)[h * stride + start..h * stride + start + width]
                .copy_from_slice(&src.row(r)[h * width..(h + 1) * width]);
        }
    }
}

pub struct MlaTape<T> {
    x: Tensor<T>,
    cq_pre: Tensor<T>,
    cq: Tensor<T>,
    ckv_pre: Tensor<T>,
    ckv: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: Tensor<T>,
    probs: AttnProbs<T>,
    /// Pre-gate output and gate logits in gate mode.
    gated: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> MlaTape<T> {
    pub fn probs(&self) -> &AttnProbs<T> {
        &self.probs
    }
}

struct Projected<T> {
    cq_pre: Tensor<T>,
    cq: Tensor<T>,
    q: Tensor<T>,
    ckv_pre: Tensor<T>,
    ckv: Tensor<T>,
    k_rope: Tensor<T>,
}

fn project<T: Scalar>(
    w: &MlaBlockWeights<T>,
    cfg: &MlaConfig,
    rope: &Rope<T>,
    x: &Tensor<T>,
    offset: usize,
) -> Result<Projected<T>> {
    let eps = T::of(cfg.eps);
    let (h, nope, rd, qk) = (cfg.n_heads, cfg.d_qk_nope, cfg.d_qk_rope, cfg.qk_dim());
    if !cfg.nope_mode {
        rope.check_position(offset + x.rows() - 1)?;
    }
    let cq_pre = linear(x, &w.wqa)?;
    let cq = rmsnorm(&cq_pre, &w.norm_q, eps)?;
    let mut q = Tensor::zeros([x.rows(), h * qk]);
    scatter_heads(&linear(&cq, &w.wqb)?, &mut q, h, qk, 0, nope);
    scatter_heads(&linear(&cq, &w.wqr)?, &mut q, h, qk, nope, rd);
    let mut k_rope = linear(x, &w.wkr)?;
    if !cfg.nope_mode {
        rope.apply(&mut q, offset, qk, nope);
        rope.apply(&mut k_rope, offset, rd, 0);
    }
    let ckv_pre = linear(x, &w.wkva)?;
    let ckv = rmsnorm(&ckv_pre, &w.norm_kv, eps)?;
    Ok(Projected {
        cq_pre,
        cq,
        q,
        ckv_pre,
        ckv,
        k_rope,
    })
}

/// Expands cached latents and rotary keys into per-head keys and values.
fn expand_kv<T: Scalar>(
    w: &MlaBlockWeights<T>,
    cfg: &MlaConfig,
    latents: &Tensor<T>,
    rope_keys: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, nope, rd, qk) = (cfg.n_heads, cfg.d_qk_nope, cfg.d_qk_rope, cfg.qk_dim());
    let mut k = Tensor::zeros([latents.rows(), h * qk]);
    scatter_heads(&linear(latents, &w.wkb)?, &mut k, h, qk, 0, nope);
    for r in 0..k.rows() {
        let kr = rope_keys.row(r).to_vec();
        let row = k.row_mut(r);
        for head in 0..h {
            row[head * qk + nope..head * qk + nope + rd].copy_from_slice(&kr);
        }
    }
    let v = linear(latents, &w.wvb)?;
    Ok((k, v))
}

fn output<T: Scalar>(w: &MlaBlockWeights<T>, x: &Tensor<T>, attn: &Tensor<T>) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    let o = linear(attn, &w.wo)?;
    match &w.wgate {
        Some(g) => {
            let logits = linear(x, g)?;
            let y = o.zip_map(&logits, |o, l| o * sigmoid_scalar(l))?;
            Ok((y, Some((o, logits))))
        }
        None => Ok((o, None)),
    }
}

/// Forward over `x` whose first row sits at position `cache.len()` (or 0
/// without a cache). The cache, when given, is extended by `x.rows()`
/// entries and keys/values are rebuilt from it.
pub fn mla_forward<T: Scalar>(
    w: &MlaBlockWeights<T>,
    cfg: &MlaConfig,
    rope: &Rope<T>,
    x: &Tensor<T>,
    cache: Option<&mut MlaCache<T>>,
) -> Result<Tensor<T>> {
    let offset = cache.as_ref().map_or(0, |c| c.len());
    let p = project(w, cfg, rope, x, offset)?;
    let (latents, rope_keys) = match cache {
        Some(c) => {
            c.latents = Tensor::vstack(&[&c.latents, &p.ckv])?;
            c.rope_keys = Tensor::vstack(&[&c.rope_keys, &p.k_rope])?;
            (c.latents.clone(), c.rope_keys.clone())
        }
        None => (p.ckv, p.k_rope),
    };
    let (k, v) = expand_kv(w, cfg, &latents, &rope_keys)?;
    let (attn, _) = causal_attention(&p.q, &k, &v, cfg.dims(), cfg.scale(), offset)?;
    Ok(output(w, x, &attn)?.0)
}

/// Full-sequence forward from position 0 keeping activations for backward.
pub fn mla_forward_tape<T: Scalar>(
    w: &MlaBlockWeights<T>,
    cfg: &MlaConfig,
    rope: &Rope<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, MlaTape<T>)> {
    let p = project(w, cfg, rope, x, 0)?;
    let (k, v) = expand_kv(w, cfg, &p.ckv, &p.k_rope)?;
    let (attn, probs) = causal_attention(&p.q, &k, &v, cfg.dims(), cfg.scale(), 0)?;
    let (y, gated) = output(w, x, &attn)?;
    Ok((
        y,
        MlaTape {
            x: x.clone(),
            cq_pre: p.cq_pre,
            cq: p.cq,
            ckv_pre: p.ckv_pre,
            ckv: p.ckv,
            q: p.q,
            k,
            v,
            attn,
            probs,
            gated,
        },
    ))
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub fn mla_backward<T: Scalar>(
    w: &MlaBlockWeights<T>,
    cfg: &MlaConfig,
    rope: &Rope<T>,
    tape: &MlaTape<T>,
    dy: &Tensor<T>,
    grad: &mut MlaBlockWeights<T>,
) -> Result<Tensor<T>> {
    let eps = T::of(cfg.eps);
    let (h, nope, rd, qk) = (cfg.n_heads, cfg.d_qk_nope, cfg.d_qk_rope, cfg.qk_dim());
    let mut dx = Tensor::zeros(tape.x.shape().to_vec());
    let d_o = match (&tape.gated, &w.wgate, grad.wgate.as_mut()) {
        (Some((o, logits)), Some(g), Some(dg)) => {
            let dlogits = Tensor::from_fn(dy.shape().to_vec(), |i| {
                let s = sigmoid_scalar(logits.data()[i]);
                dy.data()[i] * o.data()[i] * s * (T::one() - s)
            });
            dx.add_assign(&linear_backward(&tape.x, g, &dlogits, dg)?)?;
            dy.zip_map(logits, |d, l| d * sigmoid_scalar(l))?
        }
        _ => dy.clone(),
    };
    let dattn = linear_backward(&tape.attn, &w.wo, &d_o, &mut grad.wo)?;
    let (mut dq, dk, dv) = causal_attention_backward(
        &tape.q,
        &tape.k,
        &tape.v,
        cfg.dims(),
        cfg.scale(),
        0,
        &tape.probs,
        &dattn,
    )?;

    if !cfg.nope_mode {
        rope.apply_transpose(&mut dq, 0, qk, nope);
    }
    let dq_nope = gather_heads(&dq, h, qk, 0, nope);
    let dq_rope = gather_heads(&dq, h, qk, nope, rd);
    let mut dcq = linear_backward(&tape.cq, &w.wqb, &dq_nope, &mut grad.wqb)?;
    dcq.add_assign(&linear_backward(&tape.cq, &w.wqr, &dq_rope, &mut grad.wqr)?)?;
    let dcq_pre = rmsnorm_backward(&tape.cq_pre, &w.norm_q, eps, &dcq, &mut grad.norm_q)?;
    dx.add_assign(&linear_backward(&tape.x, &w.wqa, &dcq_pre, &mut grad.wqa)?)?;

    let dk_nope = gather_heads(&dk, h, qk, 0, nope);
    let mut dk_rope = Tensor::zeros([dk.rows(), rd]);
    for r in 0..dk.rows() {
        let src = dk.row(r).to_vec();
        let dst = dk_rope.row_mut(r);
        for head in 0..h {
            for (a, &b) in dst.iter_mut().zip(&src[head * qk + nope..head * qk + qk]) {
                *a += b;
            }
        }
    }
    if !cfg.nope_mode {
        rope.apply_transpose(&mut dk_rope, 0, rd, 0);
    }
    dx.add_assign(&linear_backward(&tape.x, &w.wkr, &dk_rope, &mut grad.wkr)?)?;

    let mut dckv = linear_backward(&tape.ckv, &w.wkb, &dk_nope, &mut grad.wkb)?;
    dckv.add_assign(&linear_backward(&tape.ckv, &w.wvb, &dv, &mut grad.wvb)?)?;
    let dckv_pre = rmsnorm_backward(&tape.ckv_pre, &w.norm_kv, eps, &dckv, &mut grad.norm_kv)?;
    dx.add_assign(&linear_backward(&tape.x, &w.wkva, &dckv_pre, &mut grad.wkva)?)?;
    Ok(dx)
}

fn select_rows<T: Scalar>(t: &Tensor<T>, rows: impl Iterator<Item = usize>) -> Result<Tensor<T>> {
    let picked: Vec<Vec<T>> = rows.map(|r| t.row(r).to_vec()).collect();
    Tensor::from_rows(&picked)
}

/// Rows kept from a per-head `d_h` block: the first `nope` and the last `rope`.
fn head_rows(heads: usize, head_dim: usize, start: usize, width: usize) -> impl Iterator<Item = usize> {
    (0..heads).flat_map(move |h| (h * head_dim + start)..(h * head_dim + start + width))
}

/// Initializes MLA projections from a teacher attention layer by truncated
/// SVD of the query matrix and of the stacked (head-expanded) key/value
/// matrices.
pub fn init_mla_from_teacher<T: Scalar>(
    attn: &GqaWeights<T>,
    teacher: &TransformerConfig,
    cfg: &MlaConfig,
) -> Result<MlaBlockWeights<T>> {
    cfg.validate_for(teacher)?;
    let (h, dh, nope, rd) = (cfg.n_heads, teacher.head_dim, cfg.d_qk_nope, cfg.d_qk_rope);
    let d = teacher.d_model;

    let q = svd(&attn.wq, cfg.r_q)?;
    let wqa = q.sigma_vt();
    let wqb = select_rows(&q.u, head_rows(h, dh, 0, nope))?;
    let wqr = select_rows(&q.u, head_rows(h, dh, dh - rd, rd))?;

    let group = teacher.group();
    let k_full = repeat_kv(&attn.wk, dh, group)?;
    let v_full = repeat_kv(&attn.wv, dh, group)?;
    let kv = svd(&Tensor::vstack(&[&k_full, &v_full])?, cfg.r_kv)?;
    let wkva = kv.sigma_vt();
    let wkb = select_rows(&kv.u, head_rows(h, dh, 0, nope))?;
    let wvb = select_rows(&kv.u, (h * dh)..(2 * h * dh))?;

    let mut k_mean = Tensor::zeros([dh, d]);
    for kvh in 0..teacher.n_kv_heads {
        k_mean.add_assign(&attn.wk.slice_rows(kvh * dh, (kvh + 1) * dh))?;
    }
    let k_mean = k_mean.scale(T::one() / T::of(teacher.n_kv_heads as f64));
    let wkr = k_mean.slice_rows(dh - rd, dh);

    Ok(MlaBlockWeights {
        wqa,
        norm_q: Tensor::full([cfg.r_q], T::one()),
        wqb,
        wqr,
        wkva,
        norm_kv: Tensor::full([cfg.r_kv], T::one()),
        wkb,
        wvb,
        wkr,
        wo: attn.wo.slice_cols(0, h * cfg.d_v),
        wgate: cfg.gate_mode.then(|| Tensor::zeros([d, d])),
    })
}

/// Relative Frobenius errors with which the latent factor products
/// `W^QB·W^QA`, `W^QR·W^QA` and `[W^KB; W^VB]·W^KVA` reproduce the teacher
/// rows they were cut from (queries, then stacked keys/values).
pub fn factor_reconstruction_errors<T: Scalar>(
    w: &MlaBlockWeights<T>,
    attn: &GqaWeights<T>,
    teacher: &TransformerConfig,
    cfg: &MlaConfig,
) -> Result<(f64, f64)> {
    cfg.validate_for(teacher)?;
    let (h, dh, nope, rd) = (cfg.n_heads, teacher.head_dim, cfg.d_qk_nope, cfg.d_qk_rope);
    let rel = |approx: &Tensor<T>, exact: &Tensor<T>| -> Result<f64> {
        let n = exact.frobenius_norm().f64();
        let e = approx.sub(exact)?.frobenius_norm().f64();
        Ok(if n > 0.0 { e / n } else { e })
    };
    let q_approx = Tensor::vstack(&[&matmul(&w.wqb, &w.wqa)?, &matmul(&w.wqr, &w.wqa)?])?;
    let q_exact = Tensor::vstack(&[
        &select_rows(&attn.wq, head_rows(h, dh, 0, nope))?,
        &select_rows(&attn.wq, head_rows(h, dh, dh - rd, rd))?,
    ])?;
    let group = teacher.group();
    let k_full = repeat_kv(&attn.wk, dh, group)?;
    let v_full = repeat_kv(&attn.wv, dh, group)?;
    let kv_approx = matmul(&Tensor::vstack(&[&w.wkb, &w.wvb])?, &w.wkva)?;
    let kv_exact = Tensor::vstack(&[&select_rows(&k_full, head_rows(h, dh, 0, nope))?, &v_full])?;
    Ok((rel(&q_approx, &q_exact)?, rel(&kv_approx, &kv_exact)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    pub(crate) fn toy_cfg() -> MlaConfig {
        MlaConfig {
            r_q: 12,
            r_kv: 10,
            d_qk_nope: 4,
            d_qk_rope: 4,
            d_v: 8,
            n_heads: 2,
            nope_mode: false,
            gate_mode: false,
            yarn_factor: 1.0,
            rope_theta: 10000.0,
            max_position: 64,
            eps: 1e-6,
        }
    }

    fn random_weights(cfg: &MlaConfig, d: usize, seed: u64) -> MlaBlockWeights<f64> {
        let mut w = MlaBlockWeights::zeros(cfg, d);
        let mut rng = SeededRng::new(seed);
        for (name, t) in crate::params::Params::tensors_mut(&mut w) {
            let scale = if name.starts_with("norm") { 0.3 } else { 0.5 };
            let base = if name.starts_with("norm") { 1.0 } else { 0.0 };
            *t = rng.uniform_tensor::<f64>(t.shape(), scale).map(|x| x + base);
        }
        w
    }

    #[test]
    fn zero_input_gives_zero_output_and_latents() {
        let cfg = toy_cfg();
        let w = random_weights(&cfg, 16, 1);
        let rope = cfg.rope().unwrap();
        let mut cache = MlaCache::new(&cfg);
        let y = mla_forward(&w, &cfg, &rope, &Tensor::zeros([3, 16]), Some(&mut cache)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
        assert_eq!(cache.latents.max_abs(), 0.0);
        assert_eq!(cache.elements_per_token(), cfg.r_kv + cfg.d_qk_rope);
    }

    #[test]
    fn single_token_nope_equals_value_path() {
        let mut cfg = toy_cfg();
        cfg.n_heads = 1;
        cfg.nope_mode = true;
        let w = random_weights(&cfg, 16, 2);
        let x: Tensor<f64> = SeededRng::new(3).uniform_tensor(&[1, 16], 1.0);
        let y = mla_forward(&w, &cfg, &cfg.rope().unwrap(), &x, None).unwrap();
        let c = rmsnorm(&linear(&x, &w.wkva).unwrap(), &w.norm_kv, 1e-6).unwrap();
        let expect = linear(&linear(&c, &w.wvb).unwrap(), &w.wo).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn gate_with_zero_weight_halves_output() {
        let cfg = toy_cfg();
        let w = random_weights(&cfg, 16, 4);
        let mut gated_cfg = cfg.clone();
        gated_cfg.gate_mode = true;
        let mut gw = w.clone();
        gw.wgate = Some(Tensor::zeros([16, 16]));
        let x: Tensor<f64> = SeededRng::new(5).uniform_tensor(&[5, 16], 1.0);
        let rope = cfg.rope().unwrap();
        let y = mla_forward(&w, &cfg, &rope, &x, None).unwrap();
        let yg = mla_forward(&gw, &gated_cfg, &rope, &x, None).unwrap();
        assert!(yg.max_abs_diff(&y.scale(0.5)).unwrap() == 0.0);
    }

    #[test]
    fn position_overflow_is_an_error() {
        let cfg = toy_cfg();
        let w = random_weights(&cfg, 16, 6);
        let x = Tensor::zeros([65, 16]);
        assert!(matches!(
            mla_forward(&w, &cfg, &cfg.rope().unwrap(), &x, None),
            Err(Error::PositionOverflow { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (nope_mode, gate_mode) in [(false, false), (true, true)] {
            let mut cfg = toy_cfg();
            cfg.nope_mode = nope_mode;
            cfg.gate_mode = gate_mode;
            let w = random_weights(&cfg, 16, 7);
            let rope = cfg.rope().unwrap();
            let mut rng = SeededRng::new(8);
            let x: Tensor<f64> = rng.uniform_tensor(&[4, 16], 1.0);
            let probe: Tensor<f64> = rng.uniform_tensor(&[4, 16], 1.0);
            let f = |w: &MlaBlockWeights<f64>, x: &Tensor<f64>| {
                mla_forward(w, &cfg, &rope, x, None).unwrap().mul(&probe).unwrap().sum()
            };
            let (_, tape) = mla_forward_tape(&w, &cfg, &rope, &x).unwrap();
            let mut grad = crate::params::Params::zeros_like(&w);
            let dx = mla_backward(&w, &cfg, &rope, &tape, &probe, &mut grad).unwrap();
            let h = 1e-6;
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let fd = (f(&w, &xp) - f(&w, &xm)) / (2.0 * h);
                assert!((fd - dx.data()[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx.data()[i]);
            }
            let grads = crate::params::Params::tensors(&grad);
            for (gi, (name, g)) in grads.iter().enumerate() {
                for i in (0..g.len()).step_by(7) {
                    let mut wp = w.clone();
                    crate::params::Params::tensors_mut(&mut wp)[gi].1.data_mut()[i] += h;
                    let mut wm = w.clone();
                    crate::params::Params::tensors_mut(&mut wm)[gi].1.data_mut()[i] -= h;
                    let fd = (f(&wp, &x) - f(&wm, &x)) / (2.0 * h);
                    assert!((fd - g.data()[i]).abs() < 1e-6, "{name}[{i}]: {fd} vs {}", g.data()[i]);
                }
            }
        }
    }
}
