//! Attention traces: the per-(layer, head) Q/K/V streams a replay runs over.

mod format;
mod synthetic;

pub use format::{decode_trace, encode_trace, read_trace, write_trace, TRACE_MAGIC, TRACE_VERSION};
pub use synthetic::{generate_synthetic, SyntheticConfig, DEFAULT_SINK_BIAS};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Header flag: keys were captured after rotary position embedding.
pub const FLAG_POST_ROPE_KEYS: u32 = 1 << 0;
/// Header flag: K/V heads were replicated to match grouped query heads.
pub const FLAG_REPLICATED_KV_HEADS: u32 = 1 << 1;

/// Q, K and V for one attention head, each `total_len x head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub model_name: String,
    pub flags: u32,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub total_len: usize,
    /// Layer-major, head-minor.
    pub heads: Vec<HeadTensors>,
}

impl AttentionTrace {
    pub fn head(&self, layer: usize, head: usize) -> &HeadTensors {
        &self.heads[layer * self.num_heads + head]
    }

    pub fn gen_len(&self) -> usize {
        self.total_len - self.prompt_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::contract("trace dimensions must be nonzero"));
        }
        if self.prompt_len == 0 || self.total_len < self.prompt_len {
            return Err(Error::contract(format!(
                "need total_len >= prompt_len >= 1, got prompt_len={} total_len={}",
                self.prompt_len, self.total_len
            )));
        }
        if self.heads.len() != self.num_layers * self.num_heads {
            return Err(Error::contract(format!(
                "expected {} head blocks, found {}",
                self.num_layers * self.num_heads,
                self.heads.len()
            )));
        }
        for h in &self.heads {
            for m in [&h.q, &h.k, &h.v] {
                if m.rows() != self.total_len || m.cols() != self.head_dim {
                    return Err(Error::contract(format!(
                        "head tensor is {}x{}, expected {}x{}",
                        m.rows(),
                        m.cols(),
                        self.total_len,
                        self.head_dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Causal prompt attention `A_p` for one head.
    pub fn prompt_attention(&self, layer: usize, head: usize) -> Result<Matrix> {
        self.check_layer(layer)?;
        if head >= self.num_heads {
            return Err(Error::contract(format!(
                "head {head} out of range for {} heads",
                self.num_heads
            )));
        }
        let h = self.head(layer, head);
        let q = h.q.head_rows(self.prompt_len);
        let k = h.k.head_rows(self.prompt_len);
        linalg::causal_softmax(&linalg::scaled_scores(&q, &k)?)
    }

    pub(crate) fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.num_layers {
            return Err(Error::contract(format!(
                "layer {layer} out of range for {} layers",
                self.num_layers
            )));
        }
        Ok(())
    }
}
