use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionMask, AttnCtx, MultiHeadAttention};
use super::ffn::{Activation, FeedForward, FfnCtx};
use super::norm::{LayerNorm, LayerNormCtx};
use super::param::Parameter;
use crate::error::Result;

/// Pre-LayerNorm transformer block:
/// `h = x + MSA(LN(x), mask); y = h + FFN(LN(h))` with a GELU FFN.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug)]
pub struct BlockCtx {
    ln1: LayerNormCtx,
    pub attn: AttnCtx,
    ln2: LayerNormCtx,
    ffn: FfnCtx,
}

impl Block {
    pub fn new(
        name: &str,
        dim: usize,
        n_heads: usize,
        ffn_hidden: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim, trainable),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, n_heads, trainable, rng)?,
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim, trainable),
            ffn: FeedForward::new(
                &format!("{name}.ffn"),
                dim,
                ffn_hidden,
                Activation::Gelu,
                trainable,
                rng,
            ),
        })
    }

    pub fn forward(&self, x: &Array2<f64>, mask: &AttentionMask) -> Result<(Array2<f64>, BlockCtx)> {
        let (normed1, ln1) = self.ln1.forward(x)?;
        let (attended, attn) = self.attn.forward(&normed1, mask)?;
        let h = x + &attended;
        let (normed2, ln2) = self.ln2.forward(&h)?;
        let (ffn_out, ffn) = self.ffn.forward(&normed2)?;
        let y = &h + &ffn_out;
        Ok((y, BlockCtx { ln1, attn, ln2, ffn }))
    }

    pub fn backward(&mut self, ctx: &BlockCtx, dy: &Array2<f64>) -> Array2<f64> {
        // y = h + ffn(ln2(h))
        let dffn_out = dy;
        let dnormed2 = self.ffn.backward(&ctx.ffn, dffn_out);
        let mut dh = self.ln2.backward(&ctx.ln2, &dnormed2);
        dh += dy;
        // h = x + attn(ln1(x))
        let dnormed1 = self.attn.backward(&ctx.attn, &dh);
        let mut dx = self.ln1.backward(&ctx.ln1, &dnormed1);
        dx += &dh;
        dx
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = self.ln1.params();
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.ffn.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.ln1.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ffn.params_mut());
        v
    }
}
