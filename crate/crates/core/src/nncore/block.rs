use serde::{Deserialize, Serialize};

use super::{
    AttentionCache, FeedForward, FfnCache, Gradients, LayerNorm, LnCache, MultiHeadAttention,
    ParameterSet, Result, Scalar, Tensor,
};

/// Where layer normalization sits relative to the residual branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `y = x + Attn(LN(x)); out = y + FFN(LN(y))`
    Pre,
    /// `y = LN(x + Attn(x)); out = LN(y + FFN(y))`
    Post,
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub placement: NormPlacement,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln1: LnCache<T>,
    attn: AttentionCache<T>,
    ln2: LnCache<T>,
    ffn: FfnCache<T>,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
        placement: NormPlacement,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model, seed)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d_model, n_heads, seed)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model, seed)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d_model, d_ff, seed)?,
            placement,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParameterSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        match self.placement {
            NormPlacement::Pre => {
                let (a, ln1) = self.ln1.forward(ps, x)?;
                let (u, attn) = self.attn.forward(ps, &a)?;
                let y1 = x.add(&u)?;
                let (b, ln2) = self.ln2.forward(ps, &y1)?;
                let (f, ffn) = self.ffn.forward(ps, &b)?;
                Ok((
                    y1.add(&f)?,
                    BlockCache {
                        ln1,
                        attn,
                        ln2,
                        ffn,
                    },
                ))
            }
            NormPlacement::Post => {
                let (u, attn) = self.attn.forward(ps, x)?;
                let (y1, ln1) = self.ln1.forward(ps, &x.add(&u)?)?;
                let (f, ffn) = self.ffn.forward(ps, &y1)?;
                let (y, ln2) = self.ln2.forward(ps, &y1.add(&f)?)?;
                Ok((
                    y,
                    BlockCache {
                        ln1,
                        attn,
                        ln2,
                        ffn,
                    },
                ))
            }
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParameterSet<T>,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        match self.placement {
            NormPlacement::Pre => {
                let df = self.ffn.backward(ps, &cache.ffn, dy, grads)?;
                let dy1 = dy.add(&self.ln2.backward(ps, &cache.ln2, &df, grads)?)?;
                let du = self.attn.backward(ps, &cache.attn, &dy1, grads)?;
                dy1.add(&self.ln1.backward(ps, &cache.ln1, &du, grads)?)
            }
            NormPlacement::Post => {
                let dz2 = self.ln2.backward(ps, &cache.ln2, dy, grads)?;
                let dy1 = dz2.add(&self.ffn.backward(ps, &cache.ffn, &dz2, grads)?)?;
                let dz1 = self.ln1.backward(ps, &cache.ln1, &dy1, grads)?;
                dz1.add(&self.attn.backward(ps, &cache.attn, &dz1, grads)?)
            }
        }
    }
}
