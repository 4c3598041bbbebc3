//! Group-aware mixture-of-experts.
//!
//! Each (mode, group, slot) triple owns a small residual FFN expert; each
//! class owns, per mode, a linear gate scoring every slot of its group. The
//! gate softmax mixes the expert outputs of the class's group into one
//! label-aware vector per class. CO and DC banks never share parameters.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labelgraph::Partition;
use crate::nn::{softmax_slice, Parameter};

/// Hidden width of every expert; the residual path keeps them cheap.
pub const DEFAULT_EXPERT_HIDDEN: usize = 5;

/// Residual FFN `E(z) = z + relu(z W_dn + b_dn) W_up + b_up`.
#[derive(Debug, Clone)]
pub struct Expert {
    pub w_dn: Parameter,
    pub b_dn: Parameter,
    pub w_up: Parameter,
    pub b_up: Parameter,
}

#[derive(Debug)]
pub struct ExpertCtx {
    z: Array1<f64>,
    pre: Array1<f64>,
    hidden: Array1<f64>,
}

impl ExpertCtx {
    pub fn input(&self) -> &Array1<f64> {
        &self.z
    }

    /// Hidden pre-activations; used to keep gradient checks away from the
    /// ReLU kink.
    pub fn pre_activations(&self) -> &Array1<f64> {
        &self.pre
    }
}

impl Expert {
    /// Near-identity init: fan-based uniform scaled down hard, zero biases,
    /// so an untrained expert is approximately `z + 0`.
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 0.01;
        let l_dn = scale * (6.0 / (dim + hidden) as f64).sqrt();
        let l_up = scale * (6.0 / (hidden + dim) as f64).sqrt();
        Self {
            w_dn: Parameter::uniform(format!("{name}.w_dn"), &[dim, hidden], l_dn, true, rng),
            b_dn: Parameter::zeros(format!("{name}.b_dn"), &[hidden], true),
            w_up: Parameter::uniform(format!("{name}.w_up"), &[hidden, dim], l_up, true, rng),
            b_up: Parameter::zeros(format!("{name}.b_up"), &[dim], true),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_dn.shape()[0]
    }

    pub fn forward(&self, z: &Array1<f64>) -> Result<(Array1<f64>, ExpertCtx)> {
        if z.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "expert input",
                expected: vec![self.dim()],
                actual: vec![z.len()],
            });
        }
        let pre = z.dot(&self.w_dn.as2()) + &self.b_dn.as1();
        let hidden = pre.mapv(|v| v.max(0.0));
        let out = z + &hidden.dot(&self.w_up.as2()) + &self.b_up.as1();
        Ok((
            out,
            ExpertCtx {
                z: z.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, ctx: &ExpertCtx, dout: &Array1<f64>) -> Array1<f64> {
        self.b_up.accum_grad(dout.clone().into_dyn().view());
        let dw_up = outer(&ctx.hidden, dout);
        self.w_up.accum_grad(dw_up.into_dyn().view());

        let mut dpre = self.w_up.as2().dot(dout);
        dpre.zip_mut_with(&ctx.pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        self.b_dn.accum_grad(dpre.clone().into_dyn().view());
        let dw_dn = outer(&ctx.z, &dpre);
        self.w_dn.accum_grad(dw_dn.into_dyn().view());

        // Residual plus down-projection path.
        dout + &self.w_dn.as2().dot(&dpre)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w_dn, &self.b_dn, &self.w_up, &self.b_up]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_dn, &mut self.b_dn, &mut self.w_up, &mut self.b_up]
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            m[[i, j]] = a[i] * b[j];
        }
    }
    m
}

/// Experts of one mode, indexed `[group][slot]`.
pub type ModeExperts = Vec<Vec<Expert>>;

/// Both expert banks; the two modes are fully disjoint parameter sets.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub co: ModeExperts,
    pub dc: ModeExperts,
}

impl ExpertBank {
    pub fn new(dim: usize, hidden: usize, n_groups: usize, n_slots: usize, rng: &mut ChaCha8Rng) -> Self {
        let mk = |mode: &str, rng: &mut ChaCha8Rng| -> ModeExperts {
            (0..n_groups)
                .map(|t| {
                    (0..n_slots)
                        .map(|e| Expert::new(&format!("moe.{mode}.g{t}.e{e}"), dim, hidden, rng))
                        .collect()
                })
                .collect()
        };
        Self {
            co: mk("co", rng),
            dc: mk("dc", rng),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.co
            .iter()
            .chain(self.dc.iter())
            .flatten()
            .flat_map(|e| e.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.co
            .iter_mut()
            .chain(self.dc.iter_mut())
            .flatten()
            .flat_map(|e| e.params_mut())
            .collect()
    }
}

/// Per-class gates of one mode: row `k` of `w` scores every slot of class
/// `k`'s group, `b[k]` is the shared scalar offset.
#[derive(Debug, Clone)]
pub struct ModeGates {
    pub w: Parameter,
    pub b: Parameter,
}

impl ModeGates {
    pub fn new(mode: &str, n_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (dim + 1) as f64).sqrt();
        Self {
            w: Parameter::uniform(format!("gates.{mode}.w"), &[n_classes, dim], limit, true, rng),
            b: Parameter::zeros(format!("gates.{mode}.b"), &[n_classes], true),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Both gate banks.
#[derive(Debug, Clone)]
pub struct GateBank {
    pub co: ModeGates,
    pub dc: ModeGates,
}

impl GateBank {
    pub fn new(n_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            co: ModeGates::new("co", n_classes, dim, rng),
            dc: ModeGates::new("dc", n_classes, dim, rng),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.co.w, &self.co.b, &self.dc.w, &self.dc.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.co.w, &mut self.co.b, &mut self.dc.w, &mut self.dc.b]
    }
}

/// Softmax over `score_e = <slot_e, w_k> + b_k`, one weight per slot.
pub fn gate_weights(w_k: ndarray::ArrayView1<f64>, b_k: f64, slots: &[Array1<f64>]) -> Result<Array1<f64>> {
    if slots.is_empty() {
        return Err(Error::InvalidConfig("gate needs at least one slot".into()));
    }
    for s in slots {
        if s.len() != w_k.len() {
            return Err(Error::ShapeMismatch {
                context: "gate slot",
                expected: vec![w_k.len()],
                actual: vec![s.len()],
            });
        }
    }
    let mut scores: Vec<f64> = slots.iter().map(|z| z.dot(&w_k) + b_k).collect();
    softmax_slice(&mut scores);
    Ok(Array1::from(scores))
}

/// Per-class label-aware representations of one mode.
pub type ModeRepr = Vec<Array1<f64>>;

#[derive(Debug)]
pub struct LabelAwareCtx {
    expert_ctxs: Vec<Vec<ExpertCtx>>,
    expert_outs: Vec<Vec<Array1<f64>>>,
    weights: Vec<Array1<f64>>,
}

impl LabelAwareCtx {
    pub fn gate_weights_of(&self, class: usize) -> &Array1<f64> {
        &self.weights[class]
    }

    pub fn expert_ctxs(&self) -> &Vec<Vec<ExpertCtx>> {
        &self.expert_ctxs
    }
}

/// `c_k = sum_e w_k^e * E_t^e(z_t^e)` for every class `k` with `t` the
/// class's group in `partition`.
pub fn label_aware_forward(
    partition: &Partition,
    z: &[Vec<Array1<f64>>],
    experts: &ModeExperts,
    gates: &ModeGates,
) -> Result<(ModeRepr, LabelAwareCtx)> {
    let n_groups = partition.n_groups();
    if z.len() != n_groups || experts.len() != n_groups {
        return Err(Error::ShapeMismatch {
            context: "label_aware group count",
            expected: vec![n_groups],
            actual: vec![z.len()],
        });
    }
    let k = partition.n_classes();
    if gates.n_classes() != k {
        return Err(Error::ShapeMismatch {
            context: "gate bank classes",
            expected: vec![k],
            actual: vec![gates.n_classes()],
        });
    }

    let mut expert_ctxs = Vec::with_capacity(n_groups);
    let mut expert_outs = Vec::with_capacity(n_groups);
    for (t, slots) in z.iter().enumerate() {
        if slots.len() != experts[t].len() {
            return Err(Error::ShapeMismatch {
                context: "label_aware slot count",
                expected: vec![experts[t].len()],
                actual: vec![slots.len()],
            });
        }
        let mut ctxs = Vec::with_capacity(slots.len());
        let mut outs = Vec::with_capacity(slots.len());
        for (e, slot) in slots.iter().enumerate() {
            let (out, ctx) = experts[t][e].forward(slot)?;
            ctxs.push(ctx);
            outs.push(out);
        }
        expert_ctxs.push(ctxs);
        expert_outs.push(outs);
    }

    let gate_w = gates.w.as2();
    let gate_b = gates.b.as1();
    let mut repr = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for class in 0..k {
        let t = partition.group_of[class];
        let wgt = gate_weights(gate_w.row(class), gate_b[class], &z[t])?;
        let dim = expert_outs[t][0].len();
        let mut c = Array1::<f64>::zeros(dim);
        for (e, out) in expert_outs[t].iter().enumerate() {
            c.scaled_add(wgt[e], out);
        }
        repr.push(c);
        weights.push(wgt);
    }

    Ok((
        repr,
        LabelAwareCtx {
            expert_ctxs,
            expert_outs,
            weights,
        },
    ))
}

/// Backward through gates, experts, and the weighted sum. Returns `dZ`
/// indexed like the forward's `z`.
pub fn label_aware_backward(
    partition: &Partition,
    ctx: &LabelAwareCtx,
    d_repr: &[Array1<f64>],
    experts: &mut ModeExperts,
    gates: &mut ModeGates,
) -> Vec<Vec<Array1<f64>>> {
    let n_groups = partition.n_groups();
    let dim = ctx.expert_ctxs[0][0].input().len();
    let mut d_expert_out: Vec<Vec<Array1<f64>>> = ctx
        .expert_outs
        .iter()
        .map(|slots| slots.iter().map(|_| Array1::zeros(dim)).collect())
        .collect();
    let mut dz: Vec<Vec<Array1<f64>>> = d_expert_out.clone();

    let mut dgate_w = Array2::<f64>::zeros((partition.n_classes(), dim));
    let mut dgate_b = Array1::<f64>::zeros(partition.n_classes());

    for (class, dc) in d_repr.iter().enumerate() {
        let t = partition.group_of[class];
        let wgt = &ctx.weights[class];
        let n_slots = wgt.len();

        // Split into the mixing path and the gate path.
        let mut dwgt = Array1::<f64>::zeros(n_slots);
        for e in 0..n_slots {
            dwgt[e] = dc.dot(&ctx.expert_outs[t][e]);
            d_expert_out[t][e].scaled_add(wgt[e], dc);
        }
        // Softmax backward over slots.
        let dot: f64 = (0..n_slots).map(|e| dwgt[e] * wgt[e]).sum();
        for e in 0..n_slots {
            let dscore = wgt[e] * (dwgt[e] - dot);
            let z_slot = ctx.expert_ctxs[t][e].input();
            for j in 0..dim {
                dgate_w[[class, j]] += dscore * z_slot[j];
            }
            dgate_b[class] += dscore;
            dz[t][e].scaled_add(dscore, &gates.w.as2().row(class).to_owned());
        }
    }

    gates.w.accum_grad(dgate_w.into_dyn().view());
    gates.b.accum_grad(dgate_b.into_dyn().view());

    for t in 0..n_groups {
        for e in 0..d_expert_out[t].len() {
            let dz_expert = experts[t][e].backward(&ctx.expert_ctxs[t][e], &d_expert_out[t][e]);
            dz[t][e] += &dz_expert;
        }
    }
    dz
}

/// Label-aware representations of both modes.
#[derive(Debug, Clone)]
pub struct LabelAwareRepr {
    pub co: ModeRepr,
    pub dc: ModeRepr,
}
