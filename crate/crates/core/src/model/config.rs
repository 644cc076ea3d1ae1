use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a decoder-only transformer.
///
/// Projection widths follow the head counts: queries are
/// `query_heads * head_dim` wide, keys and values `kv_heads * head_dim`,
/// independent of `hidden_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub mlp_dim: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub context_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl ModelConfig {
    /// 1 layer, hidden 32.
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 1,
            mlp_dim: 128,
            query_heads: 2,
            kv_heads: 1,
            head_dim: 16,
            vocab_size: 256,
            rope_base: 500_000.0,
            norm_eps: 1e-5,
            context_len: 256,
        }
    }

    /// 2 layers, hidden 64; the default student.
    pub fn small() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 2,
            mlp_dim: 256,
            query_heads: 4,
            kv_heads: 2,
            head_dim: 16,
            vocab_size: 256,
            rope_base: 500_000.0,
            norm_eps: 1e-5,
            context_len: 256,
        }
    }

    /// 4 layers, hidden 96.
    pub fn medium() -> Self {
        Self {
            hidden_dim: 96,
            num_layers: 4,
            mlp_dim: 384,
            query_heads: 6,
            kv_heads: 3,
            head_dim: 16,
            vocab_size: 256,
            rope_base: 500_000.0,
            norm_eps: 1e-5,
            context_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("mlp_dim", self.mlp_dim),
            ("query_heads", self.query_heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "query_heads {} not divisible by kv_heads {}",
                self.query_heads, self.kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::OddHeadDim(self.head_dim));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig("norm_eps must be positive".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::InvalidConfig("rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn q_dim(&self) -> usize {
        self.query_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.query_heads / self.kv_heads
    }
}
