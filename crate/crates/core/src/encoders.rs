//! Stacked pre-normalized self-attention blocks.
//!
//! Each block computes `a = h + Attn(LN(h))` then `h' = a + FFN(LN(a))`; a
//! final layer norm follows the last block.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{
    causal_attention, pointwise_ffn, AttentionParams, BatchLayout, DistanceTable, FfnParams, Forward,
    LayerNormParams,
};
use crate::numerics::{ParamStore, Var};

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn_norm: LayerNormParams,
    pub attention: AttentionParams,
    pub ffn_norm: LayerNormParams,
    pub ffn: FfnParams,
}

/// Shape parameters shared by every block of a stack.
#[derive(Debug, Clone, Copy)]
pub struct StackShape {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub n: usize,
    pub eps: f64,
    pub init_std: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNormParams,
    pub use_local_mask: bool,
    pub distances: Option<DistanceTable>,
}

/// Encoder output with optional per-layer, per-head attention weights.
pub struct Encoded {
    pub out: Var,
    /// `attention[layer][head]` is a `[B, n, n]` post-softmax weight tensor.
    pub attention: Vec<Vec<Var>>,
}

impl EncoderStack {
    /// Builds a stack. With `use_local_mask` every attention head gets its
    /// own `w_l`/`b_l` and the stack owns one distance table, `d/M` wide, or
    /// `d` wide (sliced per head) when `per_head_distance`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        shape: StackShape,
        use_local_mask: bool,
        per_head_distance: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let p = format!("{prefix}.block{l}");
            blocks.push(EncoderBlock {
                attn_norm: LayerNormParams::new(store, &format!("{p}.attn_norm"), shape.d, shape.eps),
                attention: AttentionParams::new(
                    store,
                    &format!("{p}.attn"),
                    shape.d,
                    shape.heads,
                    use_local_mask,
                    shape.init_std,
                    rng,
                )?,
                ffn_norm: LayerNormParams::new(store, &format!("{p}.ffn_norm"), shape.d, shape.eps),
                ffn: FfnParams::new(store, &format!("{p}.ffn"), shape.d, shape.d_ff, shape.init_std, rng),
            });
        }
        let width = if per_head_distance {
            shape.d
        } else {
            shape.d / shape.heads
        };
        let distances = (use_local_mask && shape.layers > 0)
            .then(|| DistanceTable::new(store, &format!("{prefix}.distance"), shape.n, width, shape.init_std, rng));
        let final_norm = LayerNormParams::new(store, &format!("{prefix}.final_norm"), shape.d, shape.eps);
        Ok(Self {
            blocks,
            final_norm,
            use_local_mask,
            distances,
        })
    }

    pub fn encode(&self, fwd: &mut Forward, input: Var, layout: BatchLayout) -> Result<Encoded> {
        let mut h = input;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let x = block.attn_norm.apply(fwd, h)?;
            let att = causal_attention(
                fwd,
                x,
                &block.attention,
                layout,
                self.use_local_mask,
                self.distances.as_ref(),
            )?;
            attention.push(att.weights);
            h = fwd.tape.add(h, att.out)?;
            let x = block.ffn_norm.apply(fwd, h)?;
            let f = pointwise_ffn(fwd, x, &block.ffn)?;
            h = fwd.tape.add(h, f)?;
        }
        let out = self.final_norm.apply(fwd, h)?;
        Ok(Encoded { out, attention })
    }
}
