//! Dual per-class classifiers, asymmetric loss, and averaged inference.
//!
//! Each mode owns `K` independent linear heads over its label-aware
//! representations; nothing is shared between the modes. Training sums the
//! asymmetric loss of both heads; inference averages the two probability
//! vectors with weight 0.5.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Parameter};

/// Per-class heads of one mode: row `k` of `w` plus `b[k]` score class `k`.
#[derive(Debug, Clone)]
pub struct ModeHeads {
    pub w: Parameter,
    pub b: Parameter,
}

impl ModeHeads {
    pub fn new(mode: &str, n_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (dim + 1) as f64).sqrt();
        Self {
            w: Parameter::uniform(format!("heads.{mode}.w"), &[n_classes, dim], limit, true, rng),
            b: Parameter::zeros(format!("heads.{mode}.b"), &[n_classes], true),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[1]
    }
}

/// The two independent head banks (no parameter sharing across modes).
#[derive(Debug, Clone)]
pub struct DualHeads {
    pub co: ModeHeads,
    pub dc: ModeHeads,
}

impl DualHeads {
    pub fn new(n_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            co: ModeHeads::new("co", n_classes, dim, rng),
            dc: ModeHeads::new("dc", n_classes, dim, rng),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.co.w, &self.co.b, &self.dc.w, &self.dc.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.co.w, &mut self.co.b, &mut self.dc.w, &mut self.dc.b]
    }
}

#[derive(Debug)]
pub struct ClassifyCtx {
    repr: Vec<Array1<f64>>,
    probs: Array1<f64>,
}

/// `y_hat[k] = sigmoid(<w_k, c_k> + b_k)`, one head per class.
pub fn classify(repr: &[Array1<f64>], heads: &ModeHeads) -> Result<(Array1<f64>, ClassifyCtx)> {
    if repr.len() != heads.n_classes() {
        return Err(Error::ShapeMismatch {
            context: "classify representation count",
            expected: vec![heads.n_classes()],
            actual: vec![repr.len()],
        });
    }
    let w = heads.w.as2();
    let b = heads.b.as1();
    let mut probs = Array1::<f64>::zeros(repr.len());
    for (k, c) in repr.iter().enumerate() {
        if c.len() != heads.dim() {
            return Err(Error::ShapeMismatch {
                context: "classify representation dim",
                expected: vec![heads.dim()],
                actual: vec![c.len()],
            });
        }
        probs[k] = sigmoid(w.row(k).dot(c) + b[k]);
    }
    Ok((
        probs.clone(),
        ClassifyCtx {
            repr: repr.to_vec(),
            probs,
        },
    ))
}

/// Backward through sigmoid and the per-class dot products. Returns the
/// gradient for each class representation.
pub fn classify_backward(
    ctx: &ClassifyCtx,
    dprobs: &Array1<f64>,
    heads: &mut ModeHeads,
) -> Vec<Array1<f64>> {
    let k = ctx.repr.len();
    let dim = heads.dim();
    let mut dw = Array2::<f64>::zeros((k, dim));
    let mut db = Array1::<f64>::zeros(k);
    let mut drepr = Vec::with_capacity(k);
    let w = heads.w.as2().to_owned();
    for class in 0..k {
        let p = ctx.probs[class];
        let dlogit = dprobs[class] * p * (1.0 - p);
        db[class] = dlogit;
        let c = &ctx.repr[class];
        for j in 0..dim {
            dw[[class, j]] = dlogit * c[j];
        }
        drepr.push(w.row(class).mapv(|v| v * dlogit));
    }
    heads.w.accum_grad(dw.into_dyn().view());
    heads.b.accum_grad(db.into_dyn().view());
    drepr
}

#[derive(Debug)]
pub struct SharedClassifyCtx {
    repr: Array1<f64>,
    probs: Array1<f64>,
}

/// All classes scored from one shared vector (the cls-token head of the
/// plain-VPT baseline): `y_hat[k] = sigmoid(<w_k, c> + b_k)`.
pub fn classify_shared(repr: &Array1<f64>, heads: &ModeHeads) -> Result<(Array1<f64>, SharedClassifyCtx)> {
    if repr.len() != heads.dim() {
        return Err(Error::ShapeMismatch {
            context: "shared classify input",
            expected: vec![heads.dim()],
            actual: vec![repr.len()],
        });
    }
    let w = heads.w.as2();
    let b = heads.b.as1();
    let probs = Array1::from_shape_fn(heads.n_classes(), |k| sigmoid(w.row(k).dot(repr) + b[k]));
    Ok((
        probs.clone(),
        SharedClassifyCtx {
            repr: repr.clone(),
            probs,
        },
    ))
}

/// Backward of [`classify_shared`]; returns the gradient of the shared vector.
pub fn classify_shared_backward(
    ctx: &SharedClassifyCtx,
    dprobs: &Array1<f64>,
    heads: &mut ModeHeads,
) -> Array1<f64> {
    let k = ctx.probs.len();
    let dim = heads.dim();
    let mut dw = Array2::<f64>::zeros((k, dim));
    let mut db = Array1::<f64>::zeros(k);
    let mut drepr = Array1::<f64>::zeros(dim);
    let w = heads.w.as2().to_owned();
    for class in 0..k {
        let p = ctx.probs[class];
        let dlogit = dprobs[class] * p * (1.0 - p);
        db[class] = dlogit;
        for j in 0..dim {
            dw[[class, j]] = dlogit * ctx.repr[j];
            drepr[j] += dlogit * w[[class, j]];
        }
    }
    heads.w.accum_grad(dw.into_dyn().view());
    heads.b.accum_grad(db.into_dyn().view());
    drepr
}

/// Asymmetric-loss hyperparameters. Defaults: focus exponent 2 on negatives,
/// plain log-loss on positives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AslConfig {
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub prob_clamp_eps: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        Self {
            lambda_pos: 0.0,
            lambda_neg: 2.0,
            prob_clamp_eps: 1e-7,
        }
    }
}

impl AslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pos < 0.0 || self.lambda_neg < 0.0 {
            return Err(Error::InvalidConfig("ASL exponents must be >= 0".into()));
        }
        if !(self.prob_clamp_eps > 0.0 && self.prob_clamp_eps < 0.5) {
            return Err(Error::InvalidConfig("prob_clamp_eps must be in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Asymmetric loss summed over classes for one example:
/// `sum_k [ y_k (1-f_k)^l1 (-log f_k) + (1-y_k) f_k^l0 (-log(1-f_k)) ]`
/// with probabilities clamped into `[eps, 1-eps]`.
pub fn asl(probs: &Array1<f64>, targets: &Array1<f64>, cfg: &AslConfig) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            context: "asl targets",
            expected: vec![probs.len()],
            actual: vec![targets.len()],
        });
    }
    let eps = cfg.prob_clamp_eps;
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(targets.iter()) {
        let f = p.clamp(eps, 1.0 - eps);
        if y > 0.5 {
            total += (1.0 - f).powf(cfg.lambda_pos) * (-f.ln());
        } else {
            total += f.powf(cfg.lambda_neg) * (-(1.0 - f).ln());
        }
    }
    Ok(total)
}

/// `d asl / d probs`. Zero where the clamp is active, matching the exact
/// derivative of the clamped forward.
pub fn asl_grad(probs: &Array1<f64>, targets: &Array1<f64>, cfg: &AslConfig) -> Array1<f64> {
    let eps = cfg.prob_clamp_eps;
    let mut grad = Array1::<f64>::zeros(probs.len());
    for (k, (&p, &y)) in probs.iter().zip(targets.iter()).enumerate() {
        if p < eps || p > 1.0 - eps {
            continue;
        }
        let f = p;
        grad[k] = if y > 0.5 {
            let pow = (1.0 - f).powf(cfg.lambda_pos);
            let dpow = if cfg.lambda_pos == 0.0 {
                0.0
            } else {
                -cfg.lambda_pos * (1.0 - f).powf(cfg.lambda_pos - 1.0)
            };
            dpow * (-f.ln()) + pow * (-1.0 / f)
        } else {
            let pow = f.powf(cfg.lambda_neg);
            let dpow = if cfg.lambda_neg == 0.0 {
                0.0
            } else {
                cfg.lambda_neg * f.powf(cfg.lambda_neg - 1.0)
            };
            dpow * (-(1.0 - f).ln()) + pow / (1.0 - f)
        };
    }
    grad
}

/// Joint objective for one example: `asl(co) + asl(dc)`.
pub fn joint_loss(
    probs_co: &Array1<f64>,
    probs_dc: &Array1<f64>,
    targets: &Array1<f64>,
    cfg: &AslConfig,
) -> Result<f64> {
    Ok(asl(probs_co, targets, cfg)? + asl(probs_dc, targets, cfg)?)
}

/// Inference rule: elementwise average of the two heads with weight 0.5.
pub fn predict(probs_co: &Array1<f64>, probs_dc: &Array1<f64>) -> Array1<f64> {
    (probs_co + probs_dc) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rand_vec(n: usize, salt: u64) -> Array1<f64> {
        let mut rng = substream(51, salt);
        Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_heads_predict_half() {
        let mut rng = substream(51, 0);
        let mut heads = ModeHeads::new("co", 4, 6, &mut rng);
        heads.w.value_mut().fill(0.0);
        let repr: Vec<Array1<f64>> = (0..4).map(|i| rand_vec(6, i as u64)).collect();
        let (probs, _) = classify(&repr, &heads).unwrap();
        for &p in probs.iter() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn large_bias_saturates() {
        let mut rng = substream(51, 1);
        let mut heads = ModeHeads::new("co", 2, 4, &mut rng);
        heads.w.value_mut().fill(0.0);
        heads.b.value_mut().fill(20.0);
        let repr: Vec<Array1<f64>> = (0..2).map(|i| rand_vec(4, 10 + i as u64)).collect();
        let (probs, _) = classify(&repr, &heads).unwrap();
        for &p in probs.iter() {
            assert!(p > 1.0 - 1e-8);
        }
    }

    #[test]
    fn classify_matches_manual_dot_products() {
        let mut rng = substream(51, 2);
        let heads = ModeHeads::new("co", 3, 5, &mut rng);
        let repr: Vec<Array1<f64>> = (0..3).map(|i| rand_vec(5, 20 + i as u64)).collect();
        let (probs, _) = classify(&repr, &heads).unwrap();
        for k in 0..3 {
            let mut logit = heads.b.as1()[k];
            for j in 0..5 {
                logit += heads.w.as2()[[k, j]] * repr[k][j];
            }
            assert!((probs[k] - sigmoid(logit)).abs() < 1e-12);
        }
    }

    #[test]
    fn asl_spot_values() {
        let cfg = AslConfig::default();
        // Positive label, f = 0.5, lambda_pos = 0 -> log 2.
        let l1 = asl(&ndarray::arr1(&[0.5]), &ndarray::arr1(&[1.0]), &cfg).unwrap();
        assert_abs_diff_eq!(l1, std::f64::consts::LN_2, epsilon = 1e-9);
        // Negative label, f = 0.5, lambda_neg = 2 -> 0.25 log 2.
        let l0 = asl(&ndarray::arr1(&[0.5]), &ndarray::arr1(&[0.0]), &cfg).unwrap();
        assert_abs_diff_eq!(l0, 0.25 * std::f64::consts::LN_2, epsilon = 1e-9);
    }

    #[test]
    fn asl_reduces_to_bce_at_zero_exponents() {
        let cfg = AslConfig {
            lambda_pos: 0.0,
            lambda_neg: 0.0,
            ..AslConfig::default()
        };
        let mut rng = substream(51, 3);
        for _ in 0..200 {
            let probs = Array1::from_shape_fn(6, |_| rng.gen_range(1e-4..1.0 - 1e-4));
            let targets = Array1::from_shape_fn(6, |_| f64::from(rng.gen_bool(0.5)));
            let ours = asl(&probs, &targets, &cfg).unwrap();
            let bce: f64 = probs
                .iter()
                .zip(targets.iter())
                .map(|(&f, &y)| -(y * f.ln() + (1.0 - y) * (1.0 - f).ln()))
                .sum();
            assert_abs_diff_eq!(ours, bce, epsilon = 1e-9);
        }
    }

    #[test]
    fn asl_is_nonnegative_and_monotonic() {
        let cfg = AslConfig::default();
        let fs: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let mut prev_pos = f64::INFINITY;
        let mut prev_neg = -f64::INFINITY;
        for &f in &fs {
            let lp = asl(&ndarray::arr1(&[f]), &ndarray::arr1(&[1.0]), &cfg).unwrap();
            let ln = asl(&ndarray::arr1(&[f]), &ndarray::arr1(&[0.0]), &cfg).unwrap();
            assert!(lp >= 0.0 && ln >= 0.0);
            assert!(lp < prev_pos, "positive-label loss must decrease in f");
            assert!(ln > prev_neg, "negative-label loss must increase in f");
            prev_pos = lp;
            prev_neg = ln;
        }
    }

    #[test]
    fn asl_grad_matches_finite_differences() {
        let cfg = AslConfig::default();
        let mut rng = substream(51, 4);
        let probs = Array1::from_shape_fn(8, |_| rng.gen_range(0.05..0.95));
        let targets = Array1::from_shape_fn(8, |_| f64::from(rng.gen_bool(0.5)));
        let grad = asl_grad(&probs, &targets, &cfg);
        let h = 1e-7;
        for k in 0..8 {
            let mut plus = probs.clone();
            plus[k] += h;
            let mut minus = probs.clone();
            minus[k] -= h;
            let numeric = (asl(&plus, &targets, &cfg).unwrap() - asl(&minus, &targets, &cfg).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(grad[k], numeric, epsilon = 1e-5);
        }
    }

    #[test]
    fn joint_loss_composes() {
        let cfg = AslConfig::default();
        let mut rng = substream(51, 5);
        let a = Array1::from_shape_fn(5, |_| rng.gen_range(0.01..0.99));
        let b = Array1::from_shape_fn(5, |_| rng.gen_range(0.01..0.99));
        let y = Array1::from_shape_fn(5, |_| f64::from(rng.gen_bool(0.4)));
        let joint = joint_loss(&a, &b, &y, &cfg).unwrap();
        let split = asl(&a, &y, &cfg).unwrap() + asl(&b, &y, &cfg).unwrap();
        assert!((joint - split).abs() < 1e-12);

        // Identical heads double the single-head loss.
        let twice = joint_loss(&a, &a, &y, &cfg).unwrap();
        assert!((twice - 2.0 * asl(&a, &y, &cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn predict_averages() {
        let co = ndarray::arr1(&[1.0, 0.8, 0.5]);
        let dc = ndarray::arr1(&[0.0, 0.4, 0.5]);
        let avg = predict(&co, &dc);
        assert_eq!(avg, ndarray::arr1(&[0.5, 0.6000000000000001, 0.5]));
        let same = predict(&co, &co);
        assert_eq!(same, co);
    }
}
