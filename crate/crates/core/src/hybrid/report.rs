use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::checkpoint::TransformerConfig;
use crate::error::{Error, Result};
use crate::mla::MlaConfig;

use super::{BlockKind, HybridLayout};

/// Per-token KV-cache elements of the teacher and of a hybrid layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvCacheReport {
    pub n_layers: usize,
    pub mla_layers: usize,
    pub teacher_per_token: usize,
    pub hybrid_per_token: usize,
    pub ratio: f64,
}

impl KvCacheReport {
    /// Ratio as a percentage with one decimal, e.g. `3.9%`.
    pub fn percent(&self) -> String {
        format!("{:.1}%", self.ratio * 100.0)
    }
}

impl fmt::Display for KvCacheReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layers            {}", self.n_layers)?;
        writeln!(f, "mla layers        {}", self.mla_layers)?;
        writeln!(f, "teacher / token   {}", self.teacher_per_token)?;
        writeln!(f, "hybrid / token    {}", self.hybrid_per_token)?;
        write!(f, "kv cache          {}", self.percent())
    }
}

/// Hybrid cache relative to the full-attention teacher. MLA layers cache
/// `r_kv + d_qk_rope` elements per token, retained attention layers
/// `2·H_kv·d_h`, GDN layers nothing that grows with length.
pub fn kv_cache_report(layout: &HybridLayout, teacher: &TransformerConfig, mla: &MlaConfig) -> Result<KvCacheReport> {
    layout.validate()?;
    if layout.n_layers != teacher.n_layers {
        return Err(Error::Config(format!(
            "layout has {} layers, teacher {}",
            layout.n_layers, teacher.n_layers
        )));
    }
    let teacher_per_token = teacher.kv_cache_per_token();
    let mla_layers = layout.count(BlockKind::Mla);
    let hybrid_per_token = mla_layers * mla.cache_per_token()
        + layout.count(BlockKind::Attention) * 2 * teacher.kv_dim();
    Ok(KvCacheReport {
        n_layers: layout.n_layers,
        mla_layers,
        teacher_per_token,
        hybrid_per_token,
        ratio: hybrid_per_token as f64 / teacher_per_token as f64,
    })
}

/// Memory-saving techniques for the distillation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemTechnique {
    /// Projection fused with cross-entropy: no student logits.
    FusedCe,
    /// KL over sequence chunks: no full softmax tensors.
    ChunkedKl,
    /// Tiled online KL: no softmax or gradient tensors.
    FusedKl,
    /// KL from hidden states: no logit tensors at all.
    HiddenKl,
}

impl MemTechnique {
    pub const ALL: [MemTechnique; 4] = [Self::FusedCe, Self::ChunkedKl, Self::FusedKl, Self::HiddenKl];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fused-ce" | "chunked-ce" => Ok(Self::FusedCe),
            "chunked-kl" => Ok(Self::ChunkedKl),
            "fused-kl" => Ok(Self::FusedKl),
            "hidden-kl" => Ok(Self::HiddenKl),
            other => Err(Error::InvalidArgument(format!(
                "unknown technique `{other}` (expected fused-ce, chunked-kl, fused-kl or hidden-kl)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub name: String,
    pub elements: u64,
    pub bytes: u64,
}

/// Loss-side activation memory at 2 bytes per element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub tokens: u64,
    pub vocab: u64,
    pub bytes_per_element: u64,
    pub techniques: Vec<MemTechnique>,
    /// Bytes of one `T x V` logit tensor.
    pub logit_tensor_bytes: u64,
    /// Buffers that remain with the selected techniques.
    pub rows: Vec<MemoryRow>,
    /// Buffers removed by the selected techniques.
    pub removed: Vec<MemoryRow>,
    pub total_bytes: u64,
    pub baseline_bytes: u64,
}

pub const BYTES_PER_ELEMENT: u64 = 2;

/// Sequence chunk assumed for the chunked-KL working buffer.
pub const PLAN_KL_CHUNK: u64 = 4096;

/// Human form `≈16 GiB` (binary units, rounded to an integer above 10).
pub fn format_bytes_approx(bytes: u64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = bytes as f64;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    if v >= 10.0 {
        format!("≈{:.0} {}", v, UNITS[u])
    } else {
        format!("≈{:.1} {}", v, UNITS[u])
    }
}

/// Loss-side buffers for `tokens x vocab` logits. The baseline holds student
/// and teacher logits, two softmax tensors and a gradient tensor; each
/// technique removes the buffers it avoids.
pub fn memory_plan(tokens: u64, vocab: u64, techniques: &[MemTechnique]) -> Result<MemoryPlan> {
    if tokens == 0 || vocab == 0 {
        return Err(Error::InvalidArgument("tokens and vocab must be at least 1".into()));
    }
    let set: BTreeSet<MemTechnique> = techniques.iter().copied().collect();
    let tv = tokens * vocab;
    let row = |name: &str, elements: u64| MemoryRow {
        name: name.to_string(),
        elements,
        bytes: elements * BYTES_PER_ELEMENT,
    };
    let hidden = set.contains(&MemTechnique::HiddenKl);
    let fused = set.contains(&MemTechnique::FusedKl);
    let chunked = set.contains(&MemTechnique::ChunkedKl);
    let no_student = hidden || set.contains(&MemTechnique::FusedCe);
    let no_softmax = hidden || fused || chunked;
    let no_grad = hidden || fused;

    let mut rows = Vec::new();
    let mut removed = Vec::new();
    let mut place = |keep: bool, r: MemoryRow| if keep { rows.push(r) } else { removed.push(r) };
    place(!no_student, row("student logits", tv));
    place(!hidden, row("teacher logits", tv));
    place(!no_softmax, row("softmax tensors", 2 * tv));
    place(!no_grad, row("logit gradient", tv));
    if chunked && !fused && !hidden {
        rows.push(row("chunked softmax slice", 2 * tokens.min(PLAN_KL_CHUNK) * vocab));
    }
    let total_bytes = rows.iter().map(|r| r.bytes).sum();
    Ok(MemoryPlan {
        tokens,
        vocab,
        bytes_per_element: BYTES_PER_ELEMENT,
        techniques: set.into_iter().collect(),
        logit_tensor_bytes: tv * BYTES_PER_ELEMENT,
        rows,
        removed,
        total_bytes,
        baseline_bytes: 5 * tv * BYTES_PER_ELEMENT,
    })
}

impl fmt::Display for MemoryPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "T={} V={} ({} bytes/element)",
            self.tokens, self.vocab, self.bytes_per_element
        )?;
        writeln!(
            f,
            "one logit tensor: {} bytes ({}, {:.2} GB)",
            self.logit_tensor_bytes,
            format_bytes_approx(self.logit_tensor_bytes),
            self.logit_tensor_bytes as f64 / 1e9
        )?;
        for r in &self.rows {
            writeln!(f, "  {:<24} {:>20} bytes  {}", r.name, r.bytes, format_bytes_approx(r.bytes))?;
        }
        for r in &self.removed {
            writeln!(f, "  {:<24} {:>20}        (removed)", r.name, "-")?;
        }
        write!(
            f,
            "total {} bytes ({}), baseline {} bytes",
            self.total_bytes,
            format_bytes_approx(self.total_bytes),
            self.baseline_bytes
        )
    }
}
