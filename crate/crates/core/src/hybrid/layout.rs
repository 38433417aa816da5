use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block type of every layer not listed in `mla_indices`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    #[default]
    Gdn,
    /// The teacher's own GQA attention; used for reference layouts.
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Mla,
    Gdn,
    Attention,
}

/// Which layers use latent attention; the rest use `linear_kind`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridLayout {
    pub n_layers: usize,
    pub mla_indices: Vec<usize>,
    #[serde(default)]
    pub linear_kind: LinearKind,
}

impl HybridLayout {
    pub fn new(n_layers: usize, mla_indices: impl Into<Vec<usize>>) -> Result<Self> {
        let layout = Self {
            n_layers,
            mla_indices: mla_indices.into(),
            linear_kind: LinearKind::Gdn,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn all_mla(n_layers: usize) -> Self {
        Self {
            n_layers,
            mla_indices: (0..n_layers).collect(),
            linear_kind: LinearKind::Gdn,
        }
    }

    pub fn all_linear(n_layers: usize, kind: LinearKind) -> Self {
        Self {
            n_layers,
            mla_indices: Vec::new(),
            linear_kind: kind,
        }
    }

    /// Indices must be strictly increasing and below `n_layers`.
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("layout needs at least one layer".into()));
        }
        if let Some(&bad) = self.mla_indices.iter().find(|&&i| i >= self.n_layers) {
            return Err(Error::Config(format!(
                "mla index {bad} out of range for {} layers",
                self.n_layers
            )));
        }
        if self.mla_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("mla indices must be sorted and distinct".into()));
        }
        Ok(())
    }

    pub fn kind(&self, layer: usize) -> BlockKind {
        if self.mla_indices.binary_search(&layer).is_ok() {
            BlockKind::Mla
        } else {
            match self.linear_kind {
                LinearKind::Gdn => BlockKind::Gdn,
                LinearKind::Attention => BlockKind::Attention,
            }
        }
    }

    pub fn count(&self, kind: BlockKind) -> usize {
        (0..self.n_layers).filter(|&i| self.kind(i) == kind).count()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let layout: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        layout.validate()?;
        Ok(layout)
    }
}
