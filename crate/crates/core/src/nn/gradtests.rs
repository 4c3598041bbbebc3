//! Finite-difference gradient checks for every layer in the numeric core.
//!
//! Each check wraps a layer plus (where the contract demands it) its input
//! as a trainable parameter, computes a scalar loss as a fixed random
//! weighting of the layer output, and compares analytic gradients from the
//! backward pass against central differences.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::*;
use crate::rng::substream;

const H: f64 = 1e-5;

fn rand_mat(rows: usize, cols: usize, salt: u64) -> Array2<f64> {
    let mut rng = substream(31, salt);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// A layer plus its input lifted into a Parameter so input gradients are
/// checked through the same harness.
#[derive(Clone)]
struct WithInput<Layer: Clone> {
    layer: Layer,
    x: Parameter,
}

fn input_param(rows: usize, cols: usize, salt: u64) -> Parameter {
    Parameter::new(
        "input",
        rand_mat(rows, cols, salt).into_dyn(),
        true,
    )
}

fn as_mat(p: &Parameter) -> Array2<f64> {
    p.value().clone().into_dimensionality().unwrap()
}

#[test]
fn linear_gradcheck() {
    let mut rng = substream(31, 0);
    let layer = Linear::new("lin", 5, 4, true, &mut rng);
    let model = WithInput { layer, x: input_param(3, 5, 1) };
    let weights = rand_mat(3, 4, 2);

    let loss = {
        let weights = weights.clone();
        move |m: &WithInput<Linear>| {
            let (y, _) = m.layer.forward(&as_mat(&m.x)).unwrap();
            (&y * &weights).sum()
        }
    };

    let mut work = model.clone();
    let (y, ctx) = work.layer.forward(&as_mat(&work.x)).unwrap();
    debug_assert_eq!(y.dim(), weights.dim());
    let dx = work.layer.backward(&ctx, &weights);
    work.x.accum_grad(dx.into_dyn().view());

    let analytic = collect_grads(&{
        let mut ps = work.layer.params();
        ps.push(&work.x);
        ps
    });
    let stats = check_against_finite_differences(
        &model,
        loss,
        &analytic,
        |m| {
            let mut ps = m.layer.params_mut();
            ps.push(&mut m.x);
            ps
        },
        H,
    );
    assert!(
        stats.max_rel_err < 1e-6,
        "worst {} err {}",
        stats.worst_param,
        stats.max_rel_err
    );
}

#[test]
fn layer_norm_gradcheck() {
    let layer = LayerNorm::new("ln", 6, true);
    let model = WithInput { layer, x: input_param(4, 6, 3) };
    let weights = rand_mat(4, 6, 4);

    let loss = {
        let weights = weights.clone();
        move |m: &WithInput<LayerNorm>| {
            let (y, _) = m.layer.forward(&as_mat(&m.x)).unwrap();
            (&y * &weights).sum()
        }
    };

    let mut work = model.clone();
    let (_, ctx) = work.layer.forward(&as_mat(&work.x)).unwrap();
    let dx = work.layer.backward(&ctx, &weights);
    work.x.accum_grad(dx.into_dyn().view());

    let analytic = collect_grads(&{
        let mut ps = work.layer.params();
        ps.push(&work.x);
        ps
    });
    let stats = check_against_finite_differences(
        &model,
        loss,
        &analytic,
        |m| {
            let mut ps = m.layer.params_mut();
            ps.push(&mut m.x);
            ps
        },
        H,
    );
    assert!(
        stats.max_rel_err < 1e-5,
        "worst {} err {}",
        stats.worst_param,
        stats.max_rel_err
    );
}

#[test]
fn attention_gradcheck_with_random_mask() {
    let mut rng = substream(31, 5);
    let t = 5;
    let dim = 8;
    let layer = MultiHeadAttention::new("attn", dim, 2, true, &mut rng).unwrap();
    let mut allow = Array2::from_elem((t, t), true);
    for (i, j) in [(0, 2), (3, 1), (4, 0), (2, 4)] {
        allow[[i, j]] = false;
    }
    let mask = AttentionMask::new(allow).unwrap();
    let model = WithInput { layer, x: input_param(t, dim, 6) };
    let weights = rand_mat(t, dim, 7);

    let loss = {
        let weights = weights.clone();
        let mask = mask.clone();
        move |m: &WithInput<MultiHeadAttention>| {
            let (y, _) = m.layer.forward(&as_mat(&m.x), &mask).unwrap();
            (&y * &weights).sum()
        }
    };

    let mut work = model.clone();
    let (_, ctx) = work.layer.forward(&as_mat(&work.x), &mask).unwrap();
    let dx = work.layer.backward(&ctx, &weights);
    work.x.accum_grad(dx.into_dyn().view());

    let analytic = collect_grads(&{
        let mut ps = work.layer.params();
        ps.push(&work.x);
        ps
    });
    let stats = check_against_finite_differences(
        &model,
        loss,
        &analytic,
        |m| {
            let mut ps = m.layer.params_mut();
            ps.push(&mut m.x);
            ps
        },
        H,
    );
    assert!(
        stats.max_rel_err < 1e-5,
        "worst {} err {}",
        stats.worst_param,
        stats.max_rel_err
    );
}

#[test]
fn ffn_gradcheck_relu_away_from_kinks() {
    // Re-sample until no hidden pre-activation sits within 1e-3 of the ReLU kink.
    let mut salt = 8;
    let (model, weights) = loop {
        let mut rng = substream(31, salt);
        let layer = FeedForward::new("ffn", 4, 6, Activation::Relu, true, &mut rng);
        let x = input_param(3, 4, salt + 100);
        let (_, ctx) = layer.forward(&as_mat(&x)).unwrap();
        if ctx.pre.iter().all(|&p| p.abs() > 1e-3) {
            let weights = rand_mat(3, 4, salt + 200);
            break (WithInput { layer, x }, weights);
        }
        salt += 1;
    };

    let loss = {
        let weights = weights.clone();
        move |m: &WithInput<FeedForward>| {
            let (y, _) = m.layer.forward(&as_mat(&m.x)).unwrap();
            (&y * &weights).sum()
        }
    };

    let mut work = model.clone();
    let (_, ctx) = work.layer.forward(&as_mat(&work.x)).unwrap();
    let dx = work.layer.backward(&ctx, &weights);
    work.x.accum_grad(dx.into_dyn().view());

    let analytic = collect_grads(&{
        let mut ps = work.layer.params();
        ps.push(&work.x);
        ps
    });
    let stats = check_against_finite_differences(
        &model,
        loss,
        &analytic,
        |m| {
            let mut ps = m.layer.params_mut();
            ps.push(&mut m.x);
            ps
        },
        H,
    );
    assert!(
        stats.max_rel_err < 1e-5,
        "worst {} err {}",
        stats.worst_param,
        stats.max_rel_err
    );
}

#[test]
fn gelu_ffn_gradcheck() {
    let mut rng = substream(31, 9);
    let layer = FeedForward::new("ffn", 4, 8, Activation::Gelu, true, &mut rng);
    let model = WithInput { layer, x: input_param(3, 4, 10) };
    let weights = rand_mat(3, 4, 11);

    let loss = {
        let weights = weights.clone();
        move |m: &WithInput<FeedForward>| {
            let (y, _) = m.layer.forward(&as_mat(&m.x)).unwrap();
            (&y * &weights).sum()
        }
    };

    let mut work = model.clone();
    let (_, ctx) = work.layer.forward(&as_mat(&work.x)).unwrap();
    let dx = work.layer.backward(&ctx, &weights);
    work.x.accum_grad(dx.into_dyn().view());

    let analytic = collect_grads(&{
        let mut ps = work.layer.params();
        ps.push(&work.x);
        ps
    });
    let stats = check_against_finite_differences(
        &model,
        loss,
        &analytic,
        |m| {
            let mut ps = m.layer.params_mut();
            ps.push(&mut m.x);
            ps
        },
        H,
    );
    assert!(
        stats.max_rel_err < 1e-5,
        "worst {} err {}",
        stats.worst_param,
        stats.max_rel_err
    );
}

#[test]
fn patch_embed_gradcheck() {
    let mut rng = substream(31, 12);
    let layer = PatchEmbed::new("pe", 1, 8, 8, 4, 6, true, &mut rng).unwrap();
    let mut img_rng = substream(31, 13);
    let image = Array3::from_shape_fn((1, 8, 8), |_| img_rng.gen_range(-1.0..1.0));
    let weights = rand_mat(4, 6, 14);

    let loss = {
        let weights = weights.clone();
        let image = image.clone();
        move |m: &PatchEmbed| {
            let (y, _) = m.forward(&image).unwrap();
            (&y * &weights).sum()
        }
    };

    let mut work = layer.clone();
    let (_, ctx) = work.forward(&image).unwrap();
    work.backward(&ctx, &weights);

    let analytic = collect_grads(&work.params());
    let stats =
        check_against_finite_differences(&layer, loss, &analytic, |m| m.params_mut(), H);
    assert!(
        stats.max_rel_err < 1e-6,
        "worst {} err {}",
        stats.worst_param,
        stats.max_rel_err
    );
}

#[test]
fn transformer_block_gradcheck() {
    let mut rng = substream(31, 15);
    let t = 4;
    let dim = 8;
    let layer = Block::new("blk", dim, 2, 16, true, &mut rng).unwrap();
    let mut allow = Array2::from_elem((t, t), true);
    allow[[1, 3]] = false;
    allow[[2, 0]] = false;
    let mask = AttentionMask::new(allow).unwrap();
    let model = WithInput { layer, x: input_param(t, dim, 16) };
    let weights = rand_mat(t, dim, 17);

    let loss = {
        let weights = weights.clone();
        let mask = mask.clone();
        move |m: &WithInput<Block>| {
            let (y, _) = m.layer.forward(&as_mat(&m.x), &mask).unwrap();
            (&y * &weights).sum()
        }
    };

    let mut work = model.clone();
    let (_, ctx) = work.layer.forward(&as_mat(&work.x), &mask).unwrap();
    let dx = work.layer.backward(&ctx, &weights);
    work.x.accum_grad(dx.into_dyn().view());

    let analytic = collect_grads(&{
        let mut ps = work.layer.params();
        ps.push(&work.x);
        ps
    });
    let stats = check_against_finite_differences(
        &model,
        loss,
        &analytic,
        |m| {
            let mut ps = m.layer.params_mut();
            ps.push(&mut m.x);
            ps
        },
        H,
    );
    assert!(
        stats.max_rel_err < 1e-5,
        "worst {} err {}",
        stats.worst_param,
        stats.max_rel_err
    );
}
