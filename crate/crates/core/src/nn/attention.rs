use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::ops::{softmax_rows, softmax_rows_backward};
use super::param::Parameter;
use crate::error::{Error, Result};

/// Additive surrogate for a blocked attention edge. Large enough that the
/// post-softmax weight underflows to exactly zero, finite so gradients stay
/// defined.
pub const BLOCKED_BIAS: f64 = -1e9;

/// A `T x T` allow matrix realized as an additive logit bias
/// (0 where allowed, [`BLOCKED_BIAS`] where blocked).
#[derive(Debug, Clone)]
pub struct AttentionMask {
    allow: Array2<bool>,
    bias: Array2<f64>,
}

impl AttentionMask {
    /// Every query may attend to every key.
    pub fn all_allowed(t: usize) -> Self {
        Self {
            allow: Array2::from_elem((t, t), true),
            bias: Array2::zeros((t, t)),
        }
    }

    /// Builds from an allow matrix; the diagonal must be allowed.
    pub fn new(allow: Array2<bool>) -> Result<Self> {
        if allow.nrows() != allow.ncols() {
            return Err(Error::ShapeMismatch {
                context: "attention mask",
                expected: vec![allow.nrows(), allow.nrows()],
                actual: vec![allow.nrows(), allow.ncols()],
            });
        }
        for i in 0..allow.nrows() {
            if !allow[[i, i]] {
                return Err(Error::InvalidConfig(format!(
                    "attention mask blocks the diagonal at token {i}"
                )));
            }
        }
        let bias = allow.mapv(|a| if a { 0.0 } else { BLOCKED_BIAS });
        Ok(Self { allow, bias })
    }

    pub fn len(&self) -> usize {
        self.allow.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.allow.is_empty()
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allow[[query, key]]
    }

    pub fn allow(&self) -> &Array2<bool> {
        &self.allow
    }

    pub fn bias(&self) -> &Array2<f64> {
        &self.bias
    }
}

/// Standard multi-head scaled dot-product self-attention with an additive
/// mask applied to the logits of every head.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub n_heads: usize,
}

#[derive(Debug)]
pub struct AttnCtx {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention weights, one `T x T` matrix per head.
    pub att: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, n_heads: usize, trainable: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "head count {n_heads} must divide embedding dim {dim}"
            )));
        }
        let limit = (6.0 / (2 * dim) as f64).sqrt();
        let mk = |suffix: &str, rng: &mut ChaCha8Rng| {
            Parameter::uniform(format!("{name}.{suffix}"), &[dim, dim], limit, trainable, rng)
        };
        Ok(Self {
            wq: mk("wq", rng),
            bq: Parameter::zeros(format!("{name}.bq"), &[dim], trainable),
            wk: mk("wk", rng),
            bk: Parameter::zeros(format!("{name}.bk"), &[dim], trainable),
            wv: mk("wv", rng),
            bv: Parameter::zeros(format!("{name}.bv"), &[dim], trainable),
            wo: mk("wo", rng),
            bo: Parameter::zeros(format!("{name}.bo"), &[dim], trainable),
            n_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn forward(&self, x: &Array2<f64>, mask: &AttentionMask) -> Result<(Array2<f64>, AttnCtx)> {
        let (t, d) = x.dim();
        if d != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "attention input",
                expected: vec![t, self.dim()],
                actual: vec![t, d],
            });
        }
        if mask.len() != t {
            return Err(Error::ShapeMismatch {
                context: "attention mask",
                expected: vec![t, t],
                actual: vec![mask.len(), mask.len()],
            });
        }
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = x.dot(&self.wq.as2()) + &self.bq.as1();
        let k = x.dot(&self.wk.as2()) + &self.bk.as1();
        let v = x.dot(&self.wv.as2()) + &self.bv.as1();

        let mut att = Vec::with_capacity(self.n_heads);
        let mut concat = Array2::<f64>::zeros((t, d));
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut logits = qh.dot(&kh.t());
            logits.mapv_inplace(|l| l * scale);
            logits += mask.bias();
            let weights = softmax_rows(&logits);
            let ctx_h = weights.dot(&vh);
            concat.slice_mut(cols).assign(&ctx_h);
            att.push(weights);
        }

        let y = concat.dot(&self.wo.as2()) + &self.bo.as1();
        Ok((
            y,
            AttnCtx {
                x: x.clone(),
                q,
                k,
                v,
                att,
                concat,
            },
        ))
    }

    pub fn backward(&mut self, ctx: &AttnCtx, dy: &Array2<f64>) -> Array2<f64> {
        let (t, d) = ctx.x.dim();
        debug_assert_eq!(dy.dim(), (t, d));
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // Output projection.
        let dwo = ctx.concat.t().dot(dy);
        let dbo = dy.sum_axis(Axis(0));
        self.wo.accum_grad(dwo.into_dyn().view());
        self.bo.accum_grad(dbo.into_dyn().view());
        let dconcat = dy.dot(&self.wo.as2().t());

        let mut dq = Array2::<f64>::zeros((t, d));
        let mut dk = Array2::<f64>::zeros((t, d));
        let mut dv = Array2::<f64>::zeros((t, d));
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = ctx.q.slice(cols);
            let kh = ctx.k.slice(cols);
            let vh = ctx.v.slice(cols);
            let weights = &ctx.att[h];
            let dctx_h = dconcat.slice(cols);

            let datt = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&weights.t().dot(&dctx_h));
            let mut dlogits = softmax_rows_backward(weights, &datt);
            dlogits.mapv_inplace(|g| g * scale);
            dq.slice_mut(cols).assign(&dlogits.dot(&kh));
            dk.slice_mut(cols).assign(&dlogits.t().dot(&qh));
        }

        let mut dx = dq.dot(&self.wq.as2().t());
        dx += &dk.dot(&self.wk.as2().t());
        dx += &dv.dot(&self.wv.as2().t());

        self.wq.accum_grad(ctx.x.t().dot(&dq).into_dyn().view());
        self.bq.accum_grad(dq.sum_axis(Axis(0)).into_dyn().view());
        self.wk.accum_grad(ctx.x.t().dot(&dk).into_dyn().view());
        self.bk.accum_grad(dk.sum_axis(Axis(0)).into_dyn().view());
        self.wv.accum_grad(ctx.x.t().dot(&dv).into_dyn().view());
        self.bv.accum_grad(dv.sum_axis(Axis(0)).into_dyn().view());

        dx
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }
}
