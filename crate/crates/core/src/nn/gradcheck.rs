//! Central finite-difference gradient verification.
//!
//! The check never looks inside a layer: it only needs a loss closure and
//! mutable access to the parameters, so it stays independent of whatever
//! analytic path produced the gradients under test.

use ndarray::ArrayD;

use super::param::Parameter;

/// Worst observed deviation between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckStats {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_elements: usize,
}

/// Relative error with a floor so near-zero gradients are compared
/// absolutely (at `floor * tolerance`) rather than amplifying roundoff.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Snapshot of every trainable parameter's analytic gradient, taken after
/// the caller has run its backward pass.
pub fn collect_grads(params: &[&Parameter]) -> Vec<(String, ArrayD<f64>)> {
    params
        .iter()
        .filter(|p| p.trainable())
        .map(|p| (p.name().to_string(), p.grad().clone()))
        .collect()
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// `model` is cloned once; each trainable parameter element is displaced by
/// `+-h` through `params_mut` and the loss re-evaluated. The `analytic` list
/// must line up with the trainable parameters in `params_mut` order (as
/// produced by [`collect_grads`]).
pub fn check_against_finite_differences<M, L, P>(
    model: &M,
    loss: L,
    analytic: &[(String, ArrayD<f64>)],
    params_mut: P,
    h: f64,
) -> GradCheckStats
where
    M: Clone,
    L: Fn(&M) -> f64,
    P: Fn(&mut M) -> Vec<&mut Parameter>,
{
    let mut work = model.clone();
    let n_trainable = params_mut(&mut work)
        .into_iter()
        .filter(|p| p.trainable())
        .count();
    assert_eq!(
        n_trainable,
        analytic.len(),
        "analytic gradient list does not match trainable parameter count"
    );

    let mut stats = GradCheckStats {
        max_rel_err: 0.0,
        worst_param: String::new(),
        n_elements: 0,
    };

    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let n = grads.len();
        for e in 0..n {
            let orig = {
                let mut ps: Vec<&mut Parameter> = params_mut(&mut work)
                    .into_iter()
                    .filter(|p| p.trainable())
                    .collect();
                debug_assert_eq!(ps[pi].name(), name);
                let slice = ps[pi].value_mut().as_slice_mut().unwrap();
                let orig = slice[e];
                slice[e] = orig + h;
                orig
            };
            let loss_plus = loss(&work);
            {
                let mut ps: Vec<&mut Parameter> = params_mut(&mut work)
                    .into_iter()
                    .filter(|p| p.trainable())
                    .collect();
                ps[pi].value_mut().as_slice_mut().unwrap()[e] = orig - h;
            }
            let loss_minus = loss(&work);
            {
                let mut ps: Vec<&mut Parameter> = params_mut(&mut work)
                    .into_iter()
                    .filter(|p| p.trainable())
                    .collect();
                ps[pi].value_mut().as_slice_mut().unwrap()[e] = orig;
            }

            let numeric = (loss_plus - loss_minus) / (2.0 * h);
            let analytic_g = grads.as_slice().unwrap()[e];
            let err = rel_err(analytic_g, numeric);
            stats.n_elements += 1;
            if err > stats.max_rel_err {
                stats.max_rel_err = err;
                stats.worst_param = format!("{name}[{e}]");
            }
        }
    }
    stats
}
