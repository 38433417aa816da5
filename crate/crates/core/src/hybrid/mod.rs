//! Hybrid student models: per-layer MLA, GDN (or teacher attention) mixers
//! inside the teacher's residual/MLP skeleton, plus assembly from pure-block
//! checkpoints, incremental decoding and memory accounting.

mod decode;
mod layout;
mod report;

use std::path::Path;

use serde_json::json;

pub use decode::{DecodeSession, LayerCache};
pub(crate) use decode::argmax;
pub use layout::{BlockKind, HybridLayout, LinearKind};
pub use report::{
    format_bytes_approx, kv_cache_report, memory_plan, KvCacheReport, MemTechnique, MemoryPlan,
    MemoryRow,
};

use crate::checkpoint::{TensorContainer, TransformerConfig};
use crate::error::{Error, Result};
use crate::gdn::{
    gdn_backward, gdn_forward_chunked, gdn_forward_tape, init_gdn_from_teacher, GdnBlockWeights,
    GdnConfig, GdnTape,
};
use crate::mla::{
    init_mla_from_teacher, mla_backward, mla_forward, mla_forward_tape, MlaBlockWeights, MlaConfig,
    MlaTape,
};
use crate::numerics::{linear, rmsnorm, rmsnorm_backward, Tensor};
use crate::params::Params;
use crate::rope::Rope;
use crate::scalar::Scalar;
use crate::teacher::{
    embed_tokens, GqaTape, GqaWeights, SwiGlu, SwiGluTape, TeacherCheckpoint, Trace,
};

pub const HYBRID_KIND: &str = "hybrid";

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer<T> {
    Mla(MlaBlockWeights<T>),
    Gdn(GdnBlockWeights<T>),
    Attention(GqaWeights<T>),
}

impl<T> Mixer<T> {
    pub fn kind(&self) -> BlockKind {
        match self {
            Mixer::Mla(_) => BlockKind::Mla,
            Mixer::Gdn(_) => BlockKind::Gdn,
            Mixer::Attention(_) => BlockKind::Attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridLayer<T> {
    pub attn_norm: Tensor<T>,
    pub mixer: Mixer<T>,
    pub mlp_norm: Tensor<T>,
    pub mlp: SwiGlu<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel<T> {
    pub teacher_config: TransformerConfig,
    pub mla_config: MlaConfig,
    pub gdn_config: GdnConfig,
    pub layout: HybridLayout,
    pub embed: Tensor<T>,
    pub layers: Vec<HybridLayer<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
}

/// Checkpoint name prefix of layer `i`'s mixer.
pub fn mixer_prefix(kind: BlockKind, i: usize) -> String {
    match kind {
        BlockKind::Mla => format!("mla.{i}."),
        BlockKind::Gdn => format!("gdn.{i}."),
        BlockKind::Attention => format!("layers.{i}.attn."),
    }
}

impl<T: Scalar> Params<T> for HybridModel<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}embed"), &self.embed));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}layers.{i}.attn_norm"), &l.attn_norm));
            let p = format!("{prefix}{}", mixer_prefix(l.mixer.kind(), i));
            match &l.mixer {
                Mixer::Mla(w) => w.named(&p, out),
                Mixer::Gdn(w) => w.named(&p, out),
                Mixer::Attention(w) => w.named(&p, out),
            }
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
            let p = format!("{prefix}{}", mixer_prefix(l.mixer.kind(), i));
            match &mut l.mixer {
                Mixer::Mla(w) => w.named_mut(&p, out),
                Mixer::Gdn(w) => w.named_mut(&p, out),
                Mixer::Attention(w) => w.named_mut(&p, out),
            }
            out.push((format!("{prefix}layers.{i}.mlp_norm"), &mut l.mlp_norm));
            l.mlp.named_mut(&format!("{prefix}layers.{i}.mlp."), out);
        }
        out.push((format!("{prefix}final_norm"), &mut self.final_norm));
        out.push((format!("{prefix}lm_head"), &mut self.lm_head));
    }
}

/// True for parameters that belong to a token mixer (`mla.*`, `gdn.*` or a
/// retained attention block).
pub fn is_mixer_param(name: &str) -> bool {
    name.starts_with("mla.") || name.starts_with("gdn.") || name.contains(".attn.")
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(layer as u64)
}

/// Ropes used by a forward pass: the teacher's for retained attention
/// layers and the (possibly YaRN-scaled) latent-attention one.
pub(crate) struct Ropes<T> {
    pub teacher: Rope<T>,
    pub mla: Rope<T>,
}

enum MixerTape<T> {
    Mla(MlaTape<T>),
    Gdn(GdnTape<T>),
    Attention(GqaTape<T>),
}

struct LayerTape<T> {
    h_in: Tensor<T>,
    h_mid: Tensor<T>,
    mixer: MixerTape<T>,
    mlp: SwiGluTape<T>,
}

/// Activations recorded by [`HybridModel::forward_tape`].
pub struct HybridTape<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerTape<T>>,
    h_last: Tensor<T>,
}

/// Upstream gradients injected into a backward pass. Entries may be `None`
/// when a loss does not touch that activation.
pub struct TraceGrad<T> {
    pub hidden: Vec<Option<Tensor<T>>>,
    pub mixer: Vec<Option<Tensor<T>>>,
    pub final_hidden: Option<Tensor<T>>,
}

impl<T> TraceGrad<T> {
    pub fn empty(n_layers: usize) -> Self {
        Self {
            hidden: (0..n_layers).map(|_| None).collect(),
            mixer: (0..n_layers).map(|_| None).collect(),
            final_hidden: None,
        }
    }
}

impl<T: Scalar> HybridModel<T> {
    /// Builds a student from the teacher: each layer's mixer is initialized
    /// per the layout (SVD init for MLA, weight transfer for GDN, verbatim
    /// copy for attention); norms, MLPs, embeddings and head are copied.
    pub fn from_teacher(
        teacher: &TeacherCheckpoint<T>,
        layout: &HybridLayout,
        mla_config: &MlaConfig,
        gdn_config: &GdnConfig,
        seed: u64,
    ) -> Result<Self> {
        let tc = &teacher.config;
        layout.validate()?;
        if layout.n_layers != tc.n_layers {
            return Err(Error::Config(format!(
                "layout has {} layers, teacher {}",
                layout.n_layers, tc.n_layers
            )));
        }
        let layers = teacher
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mixer = match layout.kind(i) {
                    BlockKind::Mla => Mixer::Mla(init_mla_from_teacher(&l.attn, tc, mla_config)?),
                    BlockKind::Gdn => Mixer::Gdn(init_gdn_from_teacher(
                        &l.attn,
                        tc,
                        gdn_config,
                        layer_seed(seed, i),
                    )?),
                    BlockKind::Attention => Mixer::Attention(l.attn.clone()),
                };
                Ok(HybridLayer {
                    attn_norm: l.attn_norm.clone(),
                    mixer,
                    mlp_norm: l.mlp_norm.clone(),
                    mlp: l.mlp.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            teacher_config: tc.clone(),
            mla_config: mla_config.clone(),
            gdn_config: gdn_config.clone(),
            layout: layout.clone(),
            embed: teacher.embed.clone(),
            layers,
            final_norm: teacher.final_norm.clone(),
            lm_head: teacher.lm_head.clone(),
        })
    }

    /// Zero-weight model with the shapes implied by the configs.
    pub fn zeros(
        teacher_config: &TransformerConfig,
        mla_config: &MlaConfig,
        gdn_config: &GdnConfig,
        layout: &HybridLayout,
    ) -> Result<Self> {
        let skeleton = TeacherCheckpoint::<T>::zeros(teacher_config)?;
        let d = teacher_config.d_model;
        let layers = skeleton
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| HybridLayer {
                attn_norm: l.attn_norm,
                mixer: match layout.kind(i) {
                    BlockKind::Mla => Mixer::Mla(MlaBlockWeights::zeros(mla_config, d)),
                    BlockKind::Gdn => Mixer::Gdn(GdnBlockWeights::zeros(gdn_config)),
                    BlockKind::Attention => Mixer::Attention(l.attn),
                },
                mlp_norm: l.mlp_norm,
                mlp: l.mlp,
            })
            .collect();
        Ok(Self {
            teacher_config: teacher_config.clone(),
            mla_config: mla_config.clone(),
            gdn_config: gdn_config.clone(),
            layout: layout.clone(),
            embed: skeleton.embed,
            layers,
            final_norm: skeleton.final_norm,
            lm_head: skeleton.lm_head,
        })
    }

    pub(crate) fn ropes(&self) -> Result<Ropes<T>> {
        Ok(Ropes {
            teacher: Rope::new(self.teacher_config.head_dim, self.teacher_config.rope_theta),
            mla: self.mla_config.rope()?,
        })
    }

    pub fn eps(&self) -> T {
        T::of(self.teacher_config.eps)
    }

    /// Elements of decode cache that grow with every token.
    pub fn cache_per_token(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.mixer {
                Mixer::Mla(_) => self.mla_config.cache_per_token(),
                Mixer::Gdn(_) => 0,
                Mixer::Attention(_) => 2 * self.teacher_config.kv_dim(),
            })
            .sum()
    }

    /// Full-sequence forward from position 0. With `want_logits = false` no
    /// `T x V` tensor is created.
    pub fn forward(&self, tokens: &[u32], want_trace: bool, want_logits: bool) -> Result<Trace<T>> {
        let ropes = self.ropes()?;
        let eps = self.eps();
        let cfg = &self.teacher_config;
        let mut h = embed_tokens(&self.embed, tokens)?;
        let mut hidden_states = Vec::new();
        let mut mixer_outputs = Vec::new();
        for layer in &self.layers {
            let normed = rmsnorm(&h, &layer.attn_norm, eps)?;
            let a = match &layer.mixer {
                Mixer::Mla(w) => mla_forward(w, &self.mla_config, &ropes.mla, &normed, None)?,
                Mixer::Gdn(w) => gdn_forward_chunked(w, &self.gdn_config, &normed, None)?.0,
                Mixer::Attention(w) => w.forward_tape(cfg, &ropes.teacher, &normed)?.0,
            };
            h.add_assign(&a)?;
            let m = layer.mlp.forward(&rmsnorm(&h, &layer.mlp_norm, eps)?)?;
            h.add_assign(&m)?;
            if want_trace {
                hidden_states.push(h.clone());
                mixer_outputs.push(a);
            }
        }
        let final_hidden = rmsnorm(&h, &self.final_norm, eps)?;
        let logits = if want_logits {
            Some(linear(&final_hidden, &self.lm_head)?)
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

    /// Forward that records everything [`HybridModel::backward`] needs. The
    /// returned trace carries per-layer activations and no logits.
    pub fn forward_tape(&self, tokens: &[u32]) -> Result<(Trace<T>, HybridTape<T>)> {
        let ropes = self.ropes()?;
        let eps = self.eps();
        let cfg = &self.teacher_config;
        let mut h = embed_tokens(&self.embed, tokens)?;
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut hidden_states = Vec::new();
        let mut mixer_outputs = Vec::new();
        for layer in &self.layers {
            let normed = rmsnorm(&h, &layer.attn_norm, eps)?;
            let (a, mixer) = match &layer.mixer {
                Mixer::Mla(w) => {
                    let (a, t) = mla_forward_tape(w, &self.mla_config, &ropes.mla, &normed)?;
                    (a, MixerTape::Mla(t))
                }
                Mixer::Gdn(w) => {
                    let (a, t) = gdn_forward_tape(w, &self.gdn_config, &normed)?;
                    (a, MixerTape::Gdn(t))
                }
                Mixer::Attention(w) => {
                    let (a, t) = w.forward_tape(cfg, &ropes.teacher, &normed)?;
                    (a, MixerTape::Attention(t))
                }
            };
            let h_in = h.clone();
            h.add_assign(&a)?;
            let h_mid = h.clone();
            let (m, mlp) = layer.mlp.forward_tape(&rmsnorm(&h, &layer.mlp_norm, eps)?)?;
            h.add_assign(&m)?;
            hidden_states.push(h.clone());
            mixer_outputs.push(a);
            tapes.push(LayerTape {
                h_in,
                h_mid,
                mixer,
                mlp,
            });
        }
        let final_hidden = rmsnorm(&h, &self.final_norm, eps)?;
        Ok((
            Trace {
                hidden_states,
                mixer_outputs,
                final_hidden,
                logits: None,
            },
            HybridTape {
                tokens: tokens.to_vec(),
                layers: tapes,
                h_last: h,
            },
        ))
    }

    /// Back-propagates `upstream` through the whole model, accumulating into
    /// `grad` (which must have this model's structure).
    pub fn backward(&self, tape: &HybridTape<T>, upstream: &TraceGrad<T>, grad: &mut Self) -> Result<()> {
        let ropes = self.ropes()?;
        let eps = self.eps();
        let cfg = &self.teacher_config;
        let mut dh = match &upstream.final_hidden {
            Some(d) => rmsnorm_backward(&tape.h_last, &self.final_norm, eps, d, &mut grad.final_norm)?,
            None => Tensor::zeros(tape.h_last.shape().to_vec()),
        };
        for (i, (layer, lt)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            let glayer = &mut grad.layers[i];
            if let Some(d) = upstream.hidden.get(i).and_then(Option::as_ref) {
                dh.add_assign(d)?;
            }
            // MLP branch
            let dnormed2 = layer.mlp.backward(&lt.mlp, &dh, &mut glayer.mlp)?;
            dh.add_assign(&rmsnorm_backward(&lt.h_mid, &layer.mlp_norm, eps, &dnormed2, &mut glayer.mlp_norm)?)?;
            // mixer branch
            let mut da = dh.clone();
            if let Some(d) = upstream.mixer.get(i).and_then(Option::as_ref) {
                da.add_assign(d)?;
            }
            let dnormed1 = match (&layer.mixer, &lt.mixer, &mut glayer.mixer) {
                (Mixer::Mla(w), MixerTape::Mla(t), Mixer::Mla(g)) => {
                    mla_backward(w, &self.mla_config, &ropes.mla, t, &da, g)?
                }
                (Mixer::Gdn(w), MixerTape::Gdn(t), Mixer::Gdn(g)) => gdn_backward(w, &self.gdn_config, t, &da, g)?,
                (Mixer::Attention(w), MixerTape::Attention(t), Mixer::Attention(g)) => {
                    w.backward(cfg, &ropes.teacher, t, &da, g)?
                }
                _ => return Err(Error::Shape("gradient buffer has a different layout".into())),
            };
            dh.add_assign(&rmsnorm_backward(&lt.h_in, &layer.attn_norm, eps, &dnormed1, &mut glayer.attn_norm)?)?;
        }
        for (t, &id) in tape.tokens.iter().enumerate() {
            let row = grad.embed.row_mut(id as usize);
            for (a, &b) in row.iter_mut().zip(dh.row(t)) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let reference = Self::zeros(&self.teacher_config, &self.mla_config, &self.gdn_config, &self.layout)?;
        let expected = reference.tensors();
        let actual = self.tensors();
        if expected.len() != actual.len() {
            return Err(Error::Shape(format!(
                "model has {} tensors, layout implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((en, e), (an, a)) in expected.iter().zip(&actual) {
            if en != an {
                return Err(Error::Shape(format!("expected tensor `{en}`, found `{an}`")));
            }
            a.expect_shape(e.shape(), an)?;
            a.ensure_finite(an)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> HybridModel<U> {
        let mut out = HybridModel::<U>::zeros(&self.teacher_config, &self.mla_config, &self.gdn_config, &self.layout)
            .expect("validated model");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Which pure checkpoint supplies embeddings, final norm and LM head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Donor {
    #[default]
    Mla,
    Gdn,
}

/// Combines a pure-MLA and a pure-GDN student: layers listed in the layout
/// come from the MLA model, the rest from the GDN model.
pub fn assemble_hybrid<T: Scalar>(
    pure_mla: &HybridModel<T>,
    pure_gdn: &HybridModel<T>,
    layout: &HybridLayout,
    donor: Donor,
) -> Result<HybridModel<T>> {
    layout.validate()?;
    if pure_mla.teacher_config != pure_gdn.teacher_config {
        return Err(Error::Config("pure checkpoints were built from different base configs".into()));
    }
    if layout.n_layers != pure_mla.layers.len() {
        return Err(Error::Config(format!(
            "layout has {} layers, checkpoints {}",
            layout.n_layers,
            pure_mla.layers.len()
        )));
    }
    if layout.linear_kind != LinearKind::Gdn {
        return Err(Error::Config("assembly combines MLA and GDN layers only".into()));
    }
    if pure_mla.layout.count(BlockKind::Mla) != pure_mla.layers.len() {
        return Err(Error::Config("first checkpoint is not a pure MLA model".into()));
    }
    if pure_gdn.layout.count(BlockKind::Gdn) != pure_gdn.layers.len() {
        return Err(Error::Config("second checkpoint is not a pure GDN model".into()));
    }
    let layers = (0..layout.n_layers)
        .map(|i| match layout.kind(i) {
            BlockKind::Mla => pure_mla.layers[i].clone(),
            _ => pure_gdn.layers[i].clone(),
        })
        .collect();
    let d = match donor {
        Donor::Mla => pure_mla,
        Donor::Gdn => pure_gdn,
    };
    Ok(HybridModel {
        teacher_config: pure_mla.teacher_config.clone(),
        mla_config: pure_mla.mla_config.clone(),
        gdn_config: pure_gdn.gdn_config.clone(),
        layout: layout.clone(),
        embed: d.embed.clone(),
        layers,
        final_norm: d.final_norm.clone(),
        lm_head: d.lm_head.clone(),
    })
}

/// Convenience wrapper over [`HybridModel::forward`].
pub fn hybrid_forward<T: Scalar>(
    model: &HybridModel<T>,
    tokens: &[u32],
    want_trace: bool,
    want_logits: bool,
) -> Result<Trace<T>> {
    model.forward(tokens, want_trace, want_logits)
}

pub fn save_hybrid<T: Scalar>(model: &HybridModel<T>, path: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    let meta = json!({
        "kind": HYBRID_KIND,
        "teacher_config": model.teacher_config,
        "mla_config": model.mla_config,
        "gdn_config": model.gdn_config,
        "layout": model.layout,
    });
    TensorContainer::from_params(meta, model).write(path)
}

pub fn hybrid_from_container<T: Scalar>(c: &TensorContainer) -> Result<(HybridModel<T>, Vec<String>)> {
    let kind = c.metadata.get("kind").and_then(|k| k.as_str());
    if kind != Some(HYBRID_KIND) {
        return Err(Error::Format(format!("expected a hybrid checkpoint, found kind {kind:?}")));
    }
    let field = |name: &str| {
        c.metadata
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("hybrid metadata lacks `{name}`")))
    };
    let teacher_config: TransformerConfig = serde_json::from_value(field("teacher_config")?)?;
    let mla_config: MlaConfig = serde_json::from_value(field("mla_config")?)?;
    let gdn_config: GdnConfig = serde_json::from_value(field("gdn_config")?)?;
    let layout: HybridLayout = serde_json::from_value(field("layout")?)?;
    let mut model = HybridModel::zeros(&teacher_config, &mla_config, &gdn_config, &layout)?;
    let warnings = c.load_into(&mut model)?;
    Ok((model, warnings))
}

pub fn load_hybrid<T: Scalar>(path: impl AsRef<Path>) -> Result<(HybridModel<T>, Vec<String>)> {
    hybrid_from_container(&TensorContainer::read(path)?)
}
