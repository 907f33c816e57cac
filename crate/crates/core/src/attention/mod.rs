//! Relative self-attention kernels.
//!
//! The relative logits `S^rel[i][j] = q_i · e_{j-i}` are computed either by
//! materializing the `(L, L, D_h)` gather tensor ([`naive_srel_global`]) or by
//! multiplying `Q` with the embedding table directly and skewing the result
//! into place ([`skew_global`], [`skew_local`]). The skewed form needs only
//! `O(L·D_h)` of relative intermediates.

mod global;
mod local;
mod multihead;
mod skew;
mod table;

pub use global::{
    efficient_srel_global, naive_srel_global, relative_attention_global, relative_attention_global_backward,
    relative_attention_global_taped, GlobalTape,
};
pub use local::{
    relative_attention_local, relative_attention_local_backward, relative_attention_local_taped, LocalAttentionConfig,
    LocalAttentionOutput, LocalTape,
};
pub use multihead::{
    multi_head_attention, AttentionMode, HeadTables, LogitBias, MhaGrads, MhaOutput, MhaTape, MultiHeadAttention,
    NoBias, ProjectionWeights,
};
pub use skew::{skew_global, skew_global_backward, skew_local, skew_local_backward};
pub use table::{RelativeEmbeddingTable, TableMode};

use crate::tensor::{Element, Mask, Tensor};

/// Query `i` may attend keys `j <= i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CausalMask {
    len: usize,
}

impl CausalMask {
    pub fn new(len: usize) -> Self {
        Self { len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        key <= query
    }

    pub fn to_mask(&self) -> Mask {
        Mask::causal(self.len)
    }
}

/// Optional inputs shared by the attention kernels.
#[derive(Clone, Copy, Debug)]
pub struct AttentionExtras<'a, T: Element> {
    /// Added to the logits before scaling (e.g. pitch/time relative terms).
    pub extra_logits: Option<&'a Tensor<T>>,
    /// Multiplied into the post-softmax weights; entries are `0` or `1/(1-p)`.
    pub dropout: Option<&'a Tensor<T>>,
}

impl<T: Element> Default for AttentionExtras<'_, T> {
    fn default() -> Self {
        Self { extra_logits: None, dropout: None }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput<T: Element = f64> {
    pub z: Tensor<T>,
    /// Post-softmax weights, before dropout.
    pub weights: Tensor<T>,
}

/// Gradients of one attention head.
#[derive(Clone, Debug)]
pub struct AttentionGrads<T: Element = f64> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    /// Global table, or the current-block table in local mode.
    pub d_table: Option<Tensor<T>>,
    /// Previous-block table (local mode only).
    pub d_table_left: Option<Tensor<T>>,
    /// Gradient with respect to the extra logits, dense `L×L`.
    pub d_extra: Option<Tensor<T>>,
}

pub(crate) fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
