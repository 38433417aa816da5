//! Reference GQA transformer: the distillation teacher and the source of all
//! upcycled weights.

use crate::attention::{causal_attention, causal_attention_backward, AttnDims, AttnProbs};
use crate::checkpoint::TransformerConfig;
use crate::error::{Error, Result};
use crate::numerics::{
    linear, linear_backward, rmsnorm, rmsnorm_heads, rmsnorm_heads_backward,
    silu_grad_scalar, silu_scalar, Tensor,
};
use crate::params::{impl_params, Params};
use crate::rope::Rope;
use crate::scalar::Scalar;

/// SwiGLU feed-forward: `down(silu(gate x) ⊙ up x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwiGlu<T> {
    pub gate: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

impl_params!(SwiGlu { gate, up, down });

pub struct SwiGluTape<T> {
    x: Tensor<T>,
    a: Tensor<T>,
    b: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Scalar> SwiGlu<T> {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            gate: Tensor::zeros([hidden, d]),
            up: Tensor::zeros([hidden, d]),
            down: Tensor::zeros([d, hidden]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_tape(x)?.0)
    }

    pub fn forward_tape(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SwiGluTape<T>)> {
        let a = linear(x, &self.gate)?;
        let b = linear(x, &self.up)?;
        let hidden = a.zip_map(&b, |a, b| silu_scalar(a) * b)?;
        let y = linear(&hidden, &self.down)?;
        Ok((
            y,
            SwiGluTape {
                x: x.clone(),
                a,
                b,
                hidden,
            },
        ))
    }

    pub fn backward(&self, tape: &SwiGluTape<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let dhidden = linear_backward(&tape.hidden, &self.down, dy, &mut grad.down)?;
        let da = Tensor::new(
            dhidden.shape().to_vec(),
            dhidden
                .data()
                .iter()
                .zip(tape.a.data().iter().zip(tape.b.data()))
                .map(|(&g, (&a, &b))| g * b * silu_grad_scalar(a))
                .collect(),
        )?;
        let db = dhidden.zip_map(&tape.a, |g, a| g * silu_scalar(a))?;
        let mut dx = linear_backward(&tape.x, &self.gate, &da, &mut grad.gate)?;
        dx.add_assign(&linear_backward(&tape.x, &self.up, &db, &mut grad.up)?)?;
        Ok(dx)
    }
}

/// Grouped-query attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct GqaWeights<T> {
    /// `H_q·d_h x d`
    pub wq: Tensor<T>,
    /// `H_kv·d_h x d`
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// `d x H_q·d_h`
    pub wo: Tensor<T>,
    pub q_norm: Option<Tensor<T>>,
    pub k_norm: Option<Tensor<T>>,
}

impl_params!(GqaWeights { wq, wk, wv, wo } optional { q_norm, k_norm });

/// Cached roped keys and values of a GQA layer during decoding.
#[derive(Clone, Debug)]
pub struct GqaCache<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

impl<T: Scalar> GqaCache<T> {
    pub fn new(kv_dim: usize) -> Self {
        Self {
            keys: Tensor::zeros([0, kv_dim]),
            values: Tensor::zeros([0, kv_dim]),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct GqaTape<T> {
    x: Tensor<T>,
    q_pre: Tensor<T>,
    k_pre: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: Tensor<T>,
    probs: AttnProbs<T>,
}

impl<T: Scalar> GqaTape<T> {
    pub fn probs(&self) -> &AttnProbs<T> {
        &self.probs
    }
}

impl<T: Scalar> GqaWeights<T> {
    pub fn zeros(cfg: &TransformerConfig) -> Self {
        let d = cfg.d_model;
        Self {
            wq: Tensor::zeros([cfg.q_dim(), d]),
            wk: Tensor::zeros([cfg.kv_dim(), d]),
            wv: Tensor::zeros([cfg.kv_dim(), d]),
            wo: Tensor::zeros([d, cfg.q_dim()]),
            q_norm: cfg.qk_norm.then(|| Tensor::full([cfg.head_dim], T::one())),
            k_norm: cfg.qk_norm.then(|| Tensor::full([cfg.head_dim], T::one())),
        }
    }

    fn dims(cfg: &TransformerConfig) -> AttnDims {
        AttnDims {
            n_heads: cfg.n_q_heads,
            n_kv_heads: cfg.n_kv_heads,
            qk_dim: cfg.head_dim,
            v_dim: cfg.head_dim,
        }
    }

    fn project(
        &self,
        cfg: &TransformerConfig,
        rope: &Rope<T>,
        x: &Tensor<T>,
        offset: usize,
    ) -> Result<[Tensor<T>; 5]> {
        let eps = T::of(cfg.eps);
        let q_pre = linear(x, &self.wq)?;
        let k_pre = linear(x, &self.wk)?;
        let v = linear(x, &self.wv)?;
        let mut q = match &self.q_norm {
            Some(g) => rmsnorm_heads(&q_pre, g, eps)?,
            None => q_pre.clone(),
        };
        let mut k = match &self.k_norm {
            Some(g) => rmsnorm_heads(&k_pre, g, eps)?,
            None => k_pre.clone(),
        };
        rope.apply(&mut q, offset, cfg.head_dim, 0);
        rope.apply(&mut k, offset, cfg.head_dim, 0);
        Ok([q_pre, k_pre, q, k, v])
    }

    /// Full-sequence forward keeping what the backward pass needs.
    pub fn forward_tape(
        &self,
        cfg: &TransformerConfig,
        rope: &Rope<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, GqaTape<T>)> {
        let [q_pre, k_pre, q, k, v] = self.project(cfg, rope, x, 0)?;
        let scale = T::one() / T::of(cfg.head_dim as f64).sqrt();
        let (attn, probs) = causal_attention(&q, &k, &v, Self::dims(cfg), scale, 0)?;
        let out = linear(&attn, &self.wo)?;
        Ok((
            out,
            GqaTape {
                x: x.clone(),
                q_pre,
                k_pre,
                q,
                k,
                v,
                attn,
                probs,
            },
        ))
    }

    /// Forward that extends `cache`; positions start at the cache length.
    pub fn forward_cached(
        &self,
        cfg: &TransformerConfig,
        rope: &Rope<T>,
        x: &Tensor<T>,
        cache: &mut GqaCache<T>,
    ) -> Result<Tensor<T>> {
        let offset = cache.len();
        let [_, _, q, k, v] = self.project(cfg, rope, x, offset)?;
        cache.keys = Tensor::vstack(&[&cache.keys, &k])?;
        cache.values = Tensor::vstack(&[&cache.values, &v])?;
        let scale = T::one() / T::of(cfg.head_dim as f64).sqrt();
        let (attn, _) =
            causal_attention(&q, &cache.keys, &cache.values, Self::dims(cfg), scale, offset)?;
        linear(&attn, &self.wo)
    }

    pub fn backward(
        &self,
        cfg: &TransformerConfig,
        rope: &Rope<T>,
        tape: &GqaTape<T>,
        dy: &Tensor<T>,
        grad: &mut Self,
    ) -> Result<Tensor<T>> {
        let eps = T::of(cfg.eps);
        let scale = T::one() / T::of(cfg.head_dim as f64).sqrt();
        let dattn = linear_backward(&tape.attn, &self.wo, dy, &mut grad.wo)?;
        let (mut dq, mut dk, dv) = causal_attention_backward(
            &tape.q,
            &tape.k,
            &tape.v,
            Self::dims(cfg),
            scale,
            0,
            &tape.probs,
            &dattn,
        )?;
        rope.apply_transpose(&mut dq, 0, cfg.head_dim, 0);
        rope.apply_transpose(&mut dk, 0, cfg.head_dim, 0);
        if let (Some(g), Some(dg)) = (&self.q_norm, grad.q_norm.as_mut()) {
            dq = rmsnorm_heads_backward(&tape.q_pre, g, eps, &dq, dg)?;
        }
        if let (Some(g), Some(dg)) = (&self.k_norm, grad.k_norm.as_mut()) {
            dk = rmsnorm_heads_backward(&tape.k_pre, g, eps, &dk, dg)?;
        }
        let mut dx = linear_backward(&tape.x, &self.wq, &dq, &mut grad.wq)?;
        dx.add_assign(&linear_backward(&tape.x, &self.wk, &dk, &mut grad.wk)?)?;
        dx.add_assign(&linear_backward(&tape.x, &self.wv, &dv, &mut grad.wv)?)?;
        Ok(dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLayer<T> {
    pub attn_norm: Tensor<T>,
    pub attn: GqaWeights<T>,
    pub mlp_norm: Tensor<T>,
    pub mlp: SwiGlu<T>,
}

/// Pretrained GQA transformer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCheckpoint<T> {
    pub config: TransformerConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<TeacherLayer<T>>,
    pub final_norm: Tensor<T>,
    /// `V x d`
    pub lm_head: Tensor<T>,
}

impl<T: Scalar> Params<T> for TeacherCheckpoint<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}embed"), &self.embed));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}layers.{i}.attn_norm"), &l.attn_norm));
            l.attn.named(&format!("{prefix}layers.{i}.attn."), out);
            out.push((format!("{prefix}layers.{i}.mlp_norm"), &l.mlp_norm));
            l.mlp.named(&format!("{prefix}layers.{i}.mlp."), out);
        }
        out.push((format!("{prefix}final_norm"), &self.final_norm));
        out.push((format!("{prefix}lm_head"), &self.lm_head));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}embed"), &mut self.embed));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}layers.{i}.attn_norm"), &mut l.attn_norm));
            l.attn.named_mut(&format!("{prefix}layers.{i}.attn."), out);
            out.push((format!("{prefix}layers.{i}.mlp_norm"), &mut l.mlp_norm));
            l.mlp.named_mut(&format!("{prefix}layers.{i}.mlp."), out);
        }
        out.push((format!("{prefix}final_norm"), &mut self.final_norm));
        out.push((format!("{prefix}lm_head"), &mut self.lm_head));
    }
}

impl<T: Scalar> TeacherCheckpoint<T> {
    /// Correctly shaped checkpoint with zero weights and unit norms.
    pub fn zeros(config: &TransformerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| TeacherLayer {
                attn_norm: Tensor::full([d], T::one()),
                attn: GqaWeights::zeros(config),
                mlp_norm: Tensor::full([d], T::one()),
                mlp: SwiGlu::zeros(d, config.mlp_hidden),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed: Tensor::zeros([config.vocab, d]),
            layers,
            final_norm: Tensor::full([d], T::one()),
            lm_head: Tensor::zeros([config.vocab, d]),
        })
    }

    /// Checks every tensor shape against the config and that weights are finite.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(&self.config)?;
        let expected = reference.tensors();
        let actual = self.tensors();
        if expected.len() != actual.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, config implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((name, e), (_, a)) in expected.iter().zip(&actual) {
            a.expect_shape(e.shape(), name)?;
            a.ensure_finite(name)?;
        }
        Ok(())
    }

    pub fn rope(&self) -> Rope<T> {
        Rope::new(self.config.head_dim, self.config.rope_theta)
    }

    pub fn cast<U: Scalar>(&self) -> TeacherCheckpoint<U> {
        let mut out = TeacherCheckpoint::<U>::zeros(&self.config).expect("validated config");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Per-layer activations of a forward pass (teacher or student).
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// Residual stream after each layer, `T x d`.
    pub hidden_states: Vec<Tensor<T>>,
    /// Token-mixer (attention) output of each layer, `T x d`.
    pub mixer_outputs: Vec<Tensor<T>>,
    /// Final hidden state after the output norm.
    pub final_hidden: Tensor<T>,
    pub logits: Option<Tensor<T>>,
}

pub type TeacherTrace<T> = Trace<T>;

pub(crate) fn embed_tokens<T: Scalar>(embed: &Tensor<T>, tokens: &[u32]) -> Result<Tensor<T>> {
    let vocab = embed.rows();
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    let mut x = Tensor::zeros([tokens.len(), embed.cols()]);
    for (t, &id) in tokens.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        x.row_mut(t).copy_from_slice(embed.row(id as usize));
    }
    Ok(x)
}

/// Runs the teacher over `tokens`. With `want_logits = false` the LM head is
/// skipped and no `T x V` tensor is built. With `want_trace = false` the
/// per-layer vectors are left empty.
pub fn teacher_forward<T: Scalar>(
    ckpt: &TeacherCheckpoint<T>,
    tokens: &[u32],
    want_logits: bool,
    want_trace: bool,
) -> Result<TeacherTrace<T>> {
    let cfg = &ckpt.config;
    let eps = T::of(cfg.eps);
    let rope = ckpt.rope();
    let mut h = embed_tokens(&ckpt.embed, tokens)?;
    let mut hidden_states = Vec::new();
    let mut mixer_outputs = Vec::new();
    for layer in &ckpt.layers {
        let normed = rmsnorm(&h, &layer.attn_norm, eps)?;
        let (a, _) = layer.attn.forward_tape(cfg, &rope, &normed)?;
        h.add_assign(&a)?;
        let m = layer.mlp.forward(&rmsnorm(&h, &layer.mlp_norm, eps)?)?;
        h.add_assign(&m)?;
        if want_trace {
            hidden_states.push(h.clone());
            mixer_outputs.push(a);
        }
    }
    let final_hidden = rmsnorm(&h, &ckpt.final_norm, eps)?;
    let logits = if want_logits {
        Some(linear(&final_hidden, &ckpt.lm_head)?)
    } else {
        None
    };
    Ok(Trace {
        hidden_states,
        mixer_outputs,
        final_hidden,
        logits,
    })
}
