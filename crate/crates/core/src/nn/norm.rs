use ndarray::{Array1, Array2, Axis};

use super::param::Parameter;
use crate::error::{Error, Result};

/// Per-row layer normalization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

#[derive(Debug)]
pub struct LayerNormCtx {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize, trainable: bool) -> Self {
        let mut gamma = Parameter::zeros(format!("{name}.gamma"), &[dim], trainable);
        gamma.value_mut().fill(1.0);
        Self {
            gamma,
            beta: Parameter::zeros(format!("{name}.beta"), &[dim], trainable),
            // f64 everywhere, so the variance floor can sit far below the
            // f32-conventional 1e-5 without blowing up.
            eps: 1e-8,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, LayerNormCtx)> {
        if x.ncols() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "layer_norm input",
                expected: vec![x.nrows(), self.dim()],
                actual: vec![x.nrows(), x.ncols()],
            });
        }
        let d = x.ncols() as f64;
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[i] = is;
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let gamma = self.gamma.as1();
        let beta = self.beta.as1();
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&gamma, |a, &g| *a *= g);
            row += &beta;
        }
        Ok((y, LayerNormCtx { xhat, inv_std }))
    }

    pub fn backward(&mut self, ctx: &LayerNormCtx, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let dgamma = (dy * &ctx.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        self.gamma.accum_grad(dgamma.into_dyn().view());
        self.beta.accum_grad(dbeta.into_dyn().view());

        let gamma = self.gamma.as1();
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            // dxhat for this row
            let dxhat: Vec<f64> = (0..dy.ncols()).map(|j| dy[[i, j]] * gamma[j]).collect();
            let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d;
            let mean_dxhat_xhat: f64 = dxhat
                .iter()
                .zip(ctx.xhat.row(i))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / d;
            for j in 0..dy.ncols() {
                dx[[i, j]] = ctx.inv_std[i]
                    * (dxhat[j] - mean_dxhat - ctx.xhat[[i, j]] * mean_dxhat_xhat);
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
