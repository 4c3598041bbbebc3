use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::param::Parameter;
use crate::error::{Error, Result};

/// Affine map `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

#[derive(Debug)]
pub struct LinearCtx {
    x: Array2<f64>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, trainable: bool, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            w: Parameter::uniform(format!("{name}.w"), &[fan_in, fan_out], limit, trainable, rng),
            b: Parameter::zeros(format!("{name}.b"), &[fan_out], trainable),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, LinearCtx)> {
        if x.ncols() != self.fan_in() {
            return Err(Error::ShapeMismatch {
                context: "linear input",
                expected: vec![x.nrows(), self.fan_in()],
                actual: vec![x.nrows(), x.ncols()],
            });
        }
        let mut y = x.dot(&self.w.as2());
        y += &self.b.as1();
        Ok((y, LinearCtx { x: x.clone() }))
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    pub fn backward(&mut self, ctx: &LinearCtx, dy: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(dy.ncols(), self.fan_out());
        debug_assert_eq!(dy.nrows(), ctx.x.nrows());
        let dw = ctx.x.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        self.w.accum_grad(dw.into_dyn().view());
        self.b.accum_grad(db.into_dyn().view());
        dy.dot(&self.w.as2().t())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.b]
    }
}
