use crate::error::Result;
use crate::gdn::{gdn_forward_chunked, gdn_forward_sequential, GdnState};
use crate::mla::{mla_forward, MlaCache};
use crate::numerics::{linear, rmsnorm, Tensor};
use crate::scalar::Scalar;
use crate::teacher::{embed_tokens, GqaCache};

use super::{HybridModel, Mixer, Ropes};

/// Per-layer decode state.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Mla(MlaCache<T>),
    Gdn(GdnState<T>),
    Attention(GqaCache<T>),
}

impl<T: Scalar> LayerCache<T> {
    pub fn elements(&self) -> usize {
        match self {
            LayerCache::Mla(c) => c.elements(),
            LayerCache::Gdn(s) => s.elements(),
            LayerCache::Attention(c) => c.keys.len() + c.values.len(),
        }
    }
}

/// Incremental decoding over one sequence. Tokens may be fed in blocks of
/// any size; results match a single forward over the concatenation.
pub struct DecodeSession<'m, T> {
    model: &'m HybridModel<T>,
    ropes: Ropes<T>,
    caches: Vec<LayerCache<T>>,
    position: usize,
}

impl<'m, T: Scalar> DecodeSession<'m, T> {
    pub fn new(model: &'m HybridModel<T>) -> Result<Self> {
        let caches = model
            .layers
            .iter()
            .map(|l| match l.mixer {
                Mixer::Mla(_) => LayerCache::Mla(MlaCache::new(&model.mla_config)),
                Mixer::Gdn(_) => LayerCache::Gdn(GdnState::new(&model.gdn_config)),
                Mixer::Attention(_) => LayerCache::Attention(GqaCache::new(model.teacher_config.kv_dim())),
            })
            .collect();
        Ok(Self {
            model,
            ropes: model.ropes()?,
            caches,
            position: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn caches(&self) -> &[LayerCache<T>] {
        &self.caches
    }

    /// Total cached elements across layers.
    pub fn cache_elements(&self) -> usize {
        self.caches.iter().map(LayerCache::elements).sum()
    }

    /// Runs `tokens` at the next positions and returns their final hidden
    /// states (after the output norm).
    pub fn feed(&mut self, tokens: &[u32]) -> Result<Tensor<T>> {
        let model = self.model;
        let eps = model.eps();
        let mut h = embed_tokens(&model.embed, tokens)?;
        for (layer, cache) in model.layers.iter().zip(self.caches.iter_mut()) {
            let normed = rmsnorm(&h, &layer.attn_norm, eps)?;
            let a = match (&layer.mixer, cache) {
                (Mixer::Mla(w), LayerCache::Mla(c)) => {
                    mla_forward(w, &model.mla_config, &self.ropes.mla, &normed, Some(c))?
                }
                (Mixer::Gdn(w), LayerCache::Gdn(s)) => {
                    let (y, next) = if normed.rows() == 1 {
                        gdn_forward_sequential(w, &model.gdn_config, &normed, Some(s))?
                    } else {
                        gdn_forward_chunked(w, &model.gdn_config, &normed, Some(s))?
                    };
                    *s = next;
                    y
                }
                (Mixer::Attention(w), LayerCache::Attention(c)) => {
                    w.forward_cached(&model.teacher_config, &self.ropes.teacher, &normed, c)?
                }
                _ => unreachable!("caches are built from the model's own layers"),
            };
            h.add_assign(&a)?;
            let m = layer.mlp.forward(&rmsnorm(&h, &layer.mlp_norm, eps)?)?;
            h.add_assign(&m)?;
        }
        self.position += tokens.len();
        rmsnorm(&h, &model.final_norm, eps)
    }

    /// Like [`DecodeSession::feed`] but returns logits.
    pub fn logits(&mut self, tokens: &[u32]) -> Result<Tensor<T>> {
        let h = self.feed(tokens)?;
        linear(&h, &self.model.lm_head)
    }

    /// Greedy continuation of `n` tokens after `prompt`.
    pub fn generate(&mut self, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(n);
        let mut logits = self.logits(prompt)?;
        for _ in 0..n {
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last) as u32;
            out.push(next);
            logits = self.logits(&[next])?;
        }
        Ok(out)
    }
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
