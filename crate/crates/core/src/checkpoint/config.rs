use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_max_position() -> usize {
    2048
}

/// Shape and hyperparameters of a GQA transformer teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub mlp_hidden: usize,
    pub rope_theta: f64,
    pub eps: f64,
    /// Positions covered by the pretrained rotary table.
    #[serde(default = "default_max_position")]
    pub max_position: usize,
    /// Per-head RMSNorm on queries and keys after projection (Qwen3 style).
    #[serde(default)]
    pub qk_norm: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
            ("mlp_hidden", self.mlp_hidden),
            ("max_position", self.max_position),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if !(self.rope_theta > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("rope_theta and eps must be positive".into()));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config("head_dim must be even for rotary embedding".into()));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn q_dim(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Per-token KV-cache elements of the full-attention model.
    pub fn kv_cache_per_token(&self) -> usize {
        self.n_layers * 2 * self.kv_dim()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small config used throughout the tests and examples.
    pub fn toy() -> Self {
        Self {
            d_model: 32,
            n_layers: 4,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 8,
            vocab: 64,
            mlp_hidden: 64,
            rope_theta: 10000.0,
            eps: 1e-6,
            max_position: 2048,
            qk_norm: false,
        }
    }

    pub fn llama_1b() -> Self {
        Self {
            d_model: 2048,
            n_layers: 16,
            n_q_heads: 32,
            n_kv_heads: 8,
            head_dim: 64,
            vocab: 128256,
            mlp_hidden: 8192,
            rope_theta: 500000.0,
            eps: 1e-5,
            max_position: 2048,
            qk_norm: false,
        }
    }

    pub fn llama_3b() -> Self {
        Self {
            d_model: 3072,
            n_layers: 28,
            n_q_heads: 24,
            n_kv_heads: 8,
            head_dim: 128,
            vocab: 128256,
            mlp_hidden: 8192,
            rope_theta: 500000.0,
            eps: 1e-5,
            max_position: 2048,
            qk_norm: false,
        }
    }

    pub fn qwen3_1_7b() -> Self {
        Self {
            d_model: 2048,
            n_layers: 28,
            n_q_heads: 16,
            n_kv_heads: 8,
            head_dim: 128,
            vocab: 151936,
            mlp_hidden: 6144,
            rope_theta: 1000000.0,
            eps: 1e-6,
            max_position: 2048,
            qk_norm: true,
        }
    }
}
