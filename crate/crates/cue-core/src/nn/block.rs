use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionCache, MultiHeadAttention};
use super::layernorm::{LayerNorm, LayerNormCache};
use super::linear::Linear;
use super::param::{Grads, ParamGroup, ParamStore};

/// Pre-norm transformer block: self-attention, optional cross-attention
/// over an external memory, then a ReLU feed-forward, each wrapped in a
/// residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    a_in: Array2<f32>,
    attn: AttentionCache,
    cross: Option<CrossCache>,
    ln2: LayerNormCache,
    f_in: Array2<f32>,
    f_hidden: Array2<f32>,
}

pub struct CrossCache {
    ln: LayerNormCache,
    c_in: Array2<f32>,
    attn: AttentionCache,
}

impl BlockCache {
    /// Post-softmax self-attention maps, one per head.
    pub fn self_attention(&self) -> &[Array2<f32>] {
        &self.attn.attn
    }
}

impl TransformerBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        with_cross: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), group, dim, rng),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), group, dim, heads, rng),
            cross: with_cross.then(|| {
                (
                    LayerNorm::new(ps, &format!("{name}.lnc"), group, dim, rng),
                    MultiHeadAttention::new(ps, &format!("{name}.cross"), group, dim, heads, rng),
                )
            }),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), group, dim, rng),
            ffn1: Linear::new(ps, &format!("{name}.ffn1"), group, dim, ffn_dim, true, rng),
            ffn2: Linear::new(ps, &format!("{name}.ffn2"), group, ffn_dim, dim, true, rng),
        }
    }

    pub fn has_cross(&self) -> bool {
        self.cross.is_some()
    }

    /// Like [`TransformerBlock::forward`], but a block built with
    /// cross-attention may run without memory: the cross sublayer is then
    /// skipped entirely (the fusion-free path).
    pub fn forward_opt_cross(
        &self,
        ps: &ParamStore,
        x: &Array2<f32>,
        memory: Option<&Array2<f32>>,
        causal: bool,
    ) -> (Array2<f32>, BlockCache) {
        if self.cross.is_some() && memory.is_none() {
            let (a_in, ln1_cache) = self.ln1.forward(ps, x);
            let (a_out, attn_cache) = self.attn.forward(ps, &a_in, &a_in, causal);
            let x1 = x + &a_out;
            let (f_in, ln2_cache) = self.ln2.forward(ps, &x1);
            let mut f_hidden = self.ffn1.forward(ps, &f_in);
            f_hidden.mapv_inplace(|v| v.max(0.0));
            let f_out = self.ffn2.forward(ps, &f_hidden);
            let y = &x1 + &f_out;
            return (
                y,
                BlockCache {
                    ln1: ln1_cache,
                    a_in,
                    attn: attn_cache,
                    cross: None,
                    ln2: ln2_cache,
                    f_in,
                    f_hidden,
                },
            );
        }
        self.forward(ps, x, memory, causal)
    }

    /// `memory` must be `Some` iff the block was built with cross-attention.
    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Array2<f32>,
        memory: Option<&Array2<f32>>,
        causal: bool,
    ) -> (Array2<f32>, BlockCache) {
        let (a_in, ln1_cache) = self.ln1.forward(ps, x);
        let (a_out, attn_cache) = self.attn.forward(ps, &a_in, &a_in, causal);
        let x1 = x + &a_out;

        let (x2, cross_cache) = match (&self.cross, memory) {
            (Some((lnc, cattn)), Some(mem)) => {
                let (c_in, lnc_cache) = lnc.forward(ps, &x1);
                let (c_out, c_attn_cache) = cattn.forward(ps, &c_in, mem, false);
                let x2 = &x1 + &c_out;
                (
                    x2,
                    Some(CrossCache {
                        ln: lnc_cache,
                        c_in,
                        attn: c_attn_cache,
                    }),
                )
            }
            (None, None) => (x1, None),
            _ => panic!("cross-attention memory does not match block configuration"),
        };

        let (f_in, ln2_cache) = self.ln2.forward(ps, &x2);
        let mut f_hidden = self.ffn1.forward(ps, &f_in);
        f_hidden.mapv_inplace(|v| v.max(0.0));
        let f_out = self.ffn2.forward(ps, &f_hidden);
        let y = &x2 + &f_out;

        (
            y,
            BlockCache {
                ln1: ln1_cache,
                a_in,
                attn: attn_cache,
                cross: cross_cache,
                ln2: ln2_cache,
                f_in,
                f_hidden,
            },
        )
    }

    /// Returns (dx, dmemory). `dmemory` is `None` for blocks without
    /// cross-attention.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &BlockCache,
        memory: Option<&Array2<f32>>,
        dy: &Array2<f32>,
        grads: &mut Grads,
    ) -> (Array2<f32>, Option<Array2<f32>>) {
        // FFN sublayer.
        let mut df_hidden = self.ffn2.backward(ps, &cache.f_hidden, dy, grads);
        df_hidden.zip_mut_with(&cache.f_hidden, |d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        let df_in = self.ffn1.backward(ps, &cache.f_in, &df_hidden, grads);
        let mut dx2 = dy + &self.ln2.backward(ps, &cache.ln2, &df_in, grads);

        // Cross-attention sublayer.
        let dmem = if let (Some((lnc, cattn)), Some(cc)) = (&self.cross, &cache.cross) {
            let mem = memory.expect("memory required for cross-attention backward");
            let (dc_in, dmem) = cattn.backward(ps, &cc.c_in, mem, &cc.attn, &dx2, grads);
            dx2 += &lnc.backward(ps, &cc.ln, &dc_in, grads);
            Some(dmem)
        } else {
            None
        };

        // Self-attention sublayer.
        let (dq, dkv) = self
            .attn
            .backward(ps, &cache.a_in, &cache.a_in, &cache.attn, &dx2, grads);
        let da_in = dq + dkv;
        let dx = &dx2 + &self.ln1.backward(ps, &cache.ln1, &da_in, grads);
        (dx, dmem)
    }

    /// Cross-attention weights for profile extraction, if present.
    pub fn cross_attention<'c>(&self, cache: &'c BlockCache) -> Option<&'c [Array2<f32>]> {
        cache.cross.as_ref().map(|c| c.attn.attn.as_slice())
    }
}
