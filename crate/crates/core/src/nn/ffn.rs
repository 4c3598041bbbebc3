use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::ops::{gelu, gelu_prime};
use super::param::Parameter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }

    fn prime(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_prime(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Two-layer MLP `y = act(x W1 + b1) W2 + b2`. The residual connection, when
/// wanted, is added by the caller.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub act: Activation,
}

#[derive(Debug)]
pub struct FfnCtx {
    x: Array2<f64>,
    /// Pre-activation values of the hidden layer.
    pub pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn new(
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let l1 = (6.0 / (dim + hidden) as f64).sqrt();
        let l2 = (6.0 / (hidden + dim) as f64).sqrt();
        Self {
            w1: Parameter::uniform(format!("{name}.w1"), &[dim, hidden], l1, trainable, rng),
            b1: Parameter::zeros(format!("{name}.b1"), &[hidden], trainable),
            w2: Parameter::uniform(format!("{name}.w2"), &[hidden, dim], l2, trainable, rng),
            b2: Parameter::zeros(format!("{name}.b2"), &[dim], trainable),
            act,
        }
    }

    pub fn dim_in(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, FfnCtx)> {
        if x.ncols() != self.dim_in() {
            return Err(Error::ShapeMismatch {
                context: "ffn input",
                expected: vec![x.nrows(), self.dim_in()],
                actual: vec![x.nrows(), x.ncols()],
            });
        }
        let pre = x.dot(&self.w1.as2()) + &self.b1.as1();
        let hidden = pre.mapv(|v| self.act.apply(v));
        let y = hidden.dot(&self.w2.as2()) + &self.b2.as1();
        Ok((y, FfnCtx { x: x.clone(), pre, hidden }))
    }

    pub fn backward(&mut self, ctx: &FfnCtx, dy: &Array2<f64>) -> Array2<f64> {
        let dw2 = ctx.hidden.t().dot(dy);
        let db2 = dy.sum_axis(Axis(0));
        self.w2.accum_grad(dw2.into_dyn().view());
        self.b2.accum_grad(db2.into_dyn().view());

        let dhidden = dy.dot(&self.w2.as2().t());
        let mut dpre = dhidden;
        dpre.zip_mut_with(&ctx.pre, |g, &p| *g *= self.act.prime(p));

        let dw1 = ctx.x.t().dot(&dpre);
        let db1 = dpre.sum_axis(Axis(0));
        self.w1.accum_grad(dw1.into_dyn().view());
        self.b1.accum_grad(db1.into_dyn().view());
        dpre.dot(&self.w1.as2().t())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}
