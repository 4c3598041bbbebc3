//! Full model assemblies.
//!
//! [`MlVptModel`] wires the frozen backbone, grouped prompt bank, mask,
//! per-class mixture-of-experts, and dual heads into one trainable unit.
//! [`VanillaVptModel`] is the comparison baseline: the same backbone and
//! prompt budget but ungrouped prompts, no mask, no experts, and a single
//! head reading the cls token.

use ndarray::{Array1, Array3};

use crate::encoder::{
    build_mask, count_learnable_params, encoder_backward, encoder_forward, Backbone,
    EncoderConfig, GroupRepresentations, PromptBank,
};
use crate::error::{Error, Result};
use crate::heads::{
    asl_grad, classify, classify_backward, classify_shared, classify_shared_backward, joint_loss,
    predict, AslConfig, DualHeads, ModeHeads,
};
use crate::labelgraph::Partition;
use crate::moe::{
    label_aware_backward, label_aware_forward, ExpertBank, GateBank, LabelAwareCtx,
};
use crate::nn::{AttentionMask, Parameter};
use crate::rng::substream;

/// The CO and DC class partitions the model was built for.
#[derive(Debug, Clone)]
pub struct Partitions {
    pub co: Partition,
    pub dc: Partition,
}

impl Partitions {
    pub fn validate(&self, n_groups: usize) -> Result<()> {
        self.co.validate()?;
        self.dc.validate()?;
        if self.co.n_classes() != self.dc.n_classes() {
            return Err(Error::InvalidConfig(
                "CO and DC partitions cover different class counts".into(),
            ));
        }
        if self.co.n_groups() != n_groups || self.dc.n_groups() != n_groups {
            return Err(Error::InvalidConfig(format!(
                "partitions have {}/{} groups, encoder expects {}",
                self.co.n_groups(),
                self.dc.n_groups(),
                n_groups
            )));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.co.n_classes()
    }
}

/// Per-section parameter accounting, the learnable-parameter analog of a
/// model-size table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamSection {
    pub name: String,
    pub total: usize,
    pub learnable: usize,
}

fn section(name: &str, params: &[&Parameter]) -> ParamSection {
    ParamSection {
        name: name.to_string(),
        total: params.iter().map(|p| p.len()).sum(),
        learnable: count_learnable_params(params),
    }
}

/// Group-aware visual prompt tuning model.
#[derive(Clone)]
pub struct MlVptModel {
    pub cfg: EncoderConfig,
    pub partitions: Partitions,
    pub backbone: Backbone,
    pub bank: PromptBank,
    pub experts: ExpertBank,
    pub gates: GateBank,
    pub heads: DualHeads,
    pub asl: AslConfig,
    pub expert_hidden: usize,
    mask: AttentionMask,
}

/// Activation record of one forward pass.
pub struct MlVptForward {
    enc_ctx: crate::encoder::EncoderCtx,
    moe_co: LabelAwareCtx,
    moe_dc: LabelAwareCtx,
    cls_co: crate::heads::ClassifyCtx,
    cls_dc: crate::heads::ClassifyCtx,
    pub reprs: GroupRepresentations,
    pub probs_co: Array1<f64>,
    pub probs_dc: Array1<f64>,
}

impl MlVptForward {
    pub fn encoder_ctx(&self) -> &crate::encoder::EncoderCtx {
        &self.enc_ctx
    }

    pub fn gate_weights(&self, mode: crate::labelgraph::AffinityMode, class: usize) -> &Array1<f64> {
        match mode {
            crate::labelgraph::AffinityMode::Co => self.moe_co.gate_weights_of(class),
            crate::labelgraph::AffinityMode::Dc => self.moe_dc.gate_weights_of(class),
        }
    }
}

impl MlVptModel {
    pub fn new(
        cfg: &EncoderConfig,
        partitions: Partitions,
        asl: AslConfig,
        expert_hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        asl.validate()?;
        partitions.validate(cfg.n_groups)?;
        if expert_hidden == 0 {
            return Err(Error::InvalidConfig("expert hidden dim must be >= 1".into()));
        }
        let n_classes = partitions.n_classes();
        let mut rng = substream(seed, 0x6d6f64); // model init stream
        let backbone = Backbone::new(cfg, &mut rng)?;
        let bank = PromptBank::new(
            "prompts",
            cfg.n_layers,
            cfg.n_prompts(),
            cfg.dim,
            cfg.prompt_init_scale,
            &mut rng,
        );
        let experts = ExpertBank::new(cfg.dim, expert_hidden, cfg.n_groups, cfg.n_slots, &mut rng);
        let gates = GateBank::new(n_classes, cfg.dim, &mut rng);
        let heads = DualHeads::new(n_classes, cfg.dim, &mut rng);
        let mask = build_mask(cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            partitions,
            backbone,
            bank,
            experts,
            gates,
            heads,
            asl,
            expert_hidden,
            mask,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.partitions.n_classes()
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<MlVptForward> {
        let (enc_out, enc_ctx) = encoder_forward(&self.backbone, &self.bank, &self.mask, image)?;
        let layout = self.cfg.layout();
        let reprs = GroupRepresentations::from_matrix(&layout, &enc_out.prompt_out);

        let (repr_co, moe_co) =
            label_aware_forward(&self.partitions.co, &reprs.co, &self.experts.co, &self.gates.co)?;
        let (repr_dc, moe_dc) =
            label_aware_forward(&self.partitions.dc, &reprs.dc, &self.experts.dc, &self.gates.dc)?;

        let (probs_co, cls_co) = classify(&repr_co, &self.heads.co)?;
        let (probs_dc, cls_dc) = classify(&repr_dc, &self.heads.dc)?;

        Ok(MlVptForward {
            enc_ctx,
            moe_co,
            moe_dc,
            cls_co,
            cls_dc,
            reprs,
            probs_co,
            probs_dc,
        })
    }

    /// Backward from probability-space gradients all the way to the prompt
    /// bank (and the backbone, if it is unfrozen).
    pub fn backward(
        &mut self,
        fwd: &MlVptForward,
        d_probs_co: &Array1<f64>,
        d_probs_dc: &Array1<f64>,
    ) {
        let d_repr_co = classify_backward(&fwd.cls_co, d_probs_co, &mut self.heads.co);
        let d_repr_dc = classify_backward(&fwd.cls_dc, d_probs_dc, &mut self.heads.dc);

        let dz_co = label_aware_backward(
            &self.partitions.co,
            &fwd.moe_co,
            &d_repr_co,
            &mut self.experts.co,
            &mut self.gates.co,
        );
        let dz_dc = label_aware_backward(
            &self.partitions.dc,
            &fwd.moe_dc,
            &d_repr_dc,
            &mut self.experts.dc,
            &mut self.gates.dc,
        );

        let layout = self.cfg.layout();
        let d_prompts = GroupRepresentations::grads_to_matrix(&layout, &dz_co, &dz_dc, self.cfg.dim);
        encoder_backward(
            &mut self.backbone,
            &mut self.bank,
            &fwd.enc_ctx,
            None,
            Some(&d_prompts),
            None,
        );
    }

    /// Joint ASL of one example.
    pub fn loss(&self, fwd: &MlVptForward, target: &Array1<f64>) -> Result<f64> {
        joint_loss(&fwd.probs_co, &fwd.probs_dc, target, &self.asl)
    }

    /// Forward + backward for one example, with gradients scaled by
    /// `grad_scale` (1/batch for mean reduction). Returns the example loss.
    pub fn accumulate_example(
        &mut self,
        image: &Array3<f64>,
        target: &Array1<f64>,
        grad_scale: f64,
    ) -> Result<f64> {
        let fwd = self.forward(image)?;
        let loss = self.loss(&fwd, target)?;
        let mut d_co = asl_grad(&fwd.probs_co, target, &self.asl);
        let mut d_dc = asl_grad(&fwd.probs_dc, target, &self.asl);
        d_co.mapv_inplace(|v| v * grad_scale);
        d_dc.mapv_inplace(|v| v * grad_scale);
        self.backward(&fwd, &d_co, &d_dc);
        Ok(loss)
    }

    /// Inference: per-mode probabilities and their 0.5-weighted average.
    pub fn predict(&self, image: &Array3<f64>) -> Result<Prediction> {
        let fwd = self.forward(image)?;
        let combined = predict(&fwd.probs_co, &fwd.probs_dc);
        Ok(Prediction {
            co: fwd.probs_co,
            dc: fwd.probs_dc,
            combined,
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = self.backbone.params();
        v.extend(self.bank.params());
        v.extend(self.experts.params());
        v.extend(self.gates.params());
        v.extend(self.heads.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.backbone.params_mut();
        v.extend(self.bank.params_mut());
        v.extend(self.experts.params_mut());
        v.extend(self.gates.params_mut());
        v.extend(self.heads.params_mut());
        v
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn count_learnable(&self) -> usize {
        count_learnable_params(&self.params())
    }

    pub fn param_report(&self) -> Vec<ParamSection> {
        vec![
            section("backbone", &self.backbone.params()),
            section("prompts", &self.bank.params()),
            section("experts", &self.experts.params()),
            section("gates", &self.gates.params()),
            section("heads", &self.heads.params()),
        ]
    }
}

/// One inference result.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub co: Array1<f64>,
    pub dc: Array1<f64>,
    pub combined: Array1<f64>,
}

/// Plain VPT baseline: ungrouped deep prompts, no mask, no experts, single
/// sigmoid head over the cls output.
#[derive(Clone)]
pub struct VanillaVptModel {
    pub cfg: EncoderConfig,
    pub backbone: Backbone,
    pub bank: PromptBank,
    pub head: ModeHeads,
    pub asl: AslConfig,
    mask: AttentionMask,
}

pub struct VanillaForward {
    enc_ctx: crate::encoder::EncoderCtx,
    cls_ctx: crate::heads::SharedClassifyCtx,
    pub probs: Array1<f64>,
}

impl VanillaVptModel {
    /// Same prompt budget as the grouped model (2 * N_c * N_m tokens per
    /// layer) so comparisons hold parameters fixed.
    pub fn new(cfg: &EncoderConfig, n_classes: usize, asl: AslConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        asl.validate()?;
        let mut rng = substream(seed, 0x6d6f64);
        let backbone = Backbone::new(cfg, &mut rng)?;
        let bank = PromptBank::new(
            "prompts",
            cfg.n_layers,
            cfg.n_prompts(),
            cfg.dim,
            cfg.prompt_init_scale,
            &mut rng,
        );
        let head = ModeHeads::new("cls", n_classes, cfg.dim, &mut rng);
        let mask = AttentionMask::all_allowed(cfg.n_tokens());
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            bank,
            head,
            asl,
            mask,
        })
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<VanillaForward> {
        let (enc_out, enc_ctx) = encoder_forward(&self.backbone, &self.bank, &self.mask, image)?;
        let (probs, cls_ctx) = classify_shared(&enc_out.cls_out, &self.head)?;
        Ok(VanillaForward {
            enc_ctx,
            cls_ctx,
            probs,
        })
    }

    pub fn backward(&mut self, fwd: &VanillaForward, d_probs: &Array1<f64>) {
        let d_cls = classify_shared_backward(&fwd.cls_ctx, d_probs, &mut self.head);
        encoder_backward(
            &mut self.backbone,
            &mut self.bank,
            &fwd.enc_ctx,
            Some(&d_cls),
            None,
            None,
        );
    }

    pub fn accumulate_example(
        &mut self,
        image: &Array3<f64>,
        target: &Array1<f64>,
        grad_scale: f64,
    ) -> Result<f64> {
        let fwd = self.forward(image)?;
        let loss = crate::heads::asl(&fwd.probs, target, &self.asl)?;
        let mut d = asl_grad(&fwd.probs, target, &self.asl);
        d.mapv_inplace(|v| v * grad_scale);
        self.backward(&fwd, &d);
        Ok(loss)
    }

    pub fn predict(&self, image: &Array3<f64>) -> Result<Prediction> {
        let fwd = self.forward(image)?;
        Ok(Prediction {
            co: fwd.probs.clone(),
            dc: fwd.probs.clone(),
            combined: fwd.probs,
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = self.backbone.params();
        v.extend(self.bank.params());
        v.push(&self.head.w);
        v.push(&self.head.b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.backbone.params_mut();
        v.extend(self.bank.params_mut());
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn count_learnable(&self) -> usize {
        count_learnable_params(&self.params())
    }

    pub fn param_report(&self) -> Vec<ParamSection> {
        vec![
            section("backbone", &self.backbone.params()),
            section("prompts", &self.bank.params()),
            section("heads", &[&self.head.w, &self.head.b]),
        ]
    }
}

/// Either model behind one training/evaluation interface.
#[derive(Clone)]
pub enum Model {
    MlVpt(MlVptModel),
    Vanilla(VanillaVptModel),
}

impl Model {
    pub fn accumulate_example(
        &mut self,
        image: &Array3<f64>,
        target: &Array1<f64>,
        grad_scale: f64,
    ) -> Result<f64> {
        match self {
            Model::MlVpt(m) => m.accumulate_example(image, target, grad_scale),
            Model::Vanilla(m) => m.accumulate_example(image, target, grad_scale),
        }
    }

    pub fn predict(&self, image: &Array3<f64>) -> Result<Prediction> {
        match self {
            Model::MlVpt(m) => m.predict(image),
            Model::Vanilla(m) => m.predict(image),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            Model::MlVpt(m) => m.params(),
            Model::Vanilla(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Model::MlVpt(m) => m.params_mut(),
            Model::Vanilla(m) => m.params_mut(),
        }
    }

    pub fn zero_grads(&mut self) {
        match self {
            Model::MlVpt(m) => m.zero_grads(),
            Model::Vanilla(m) => m.zero_grads(),
        }
    }

    pub fn backbone(&self) -> &Backbone {
        match self {
            Model::MlVpt(m) => &m.backbone,
            Model::Vanilla(m) => &m.backbone,
        }
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        match self {
            Model::MlVpt(m) => &mut m.backbone,
            Model::Vanilla(m) => &mut m.backbone,
        }
    }

    pub fn count_learnable(&self) -> usize {
        match self {
            Model::MlVpt(m) => m.count_learnable(),
            Model::Vanilla(m) => m.count_learnable(),
        }
    }

    pub fn param_report(&self) -> Vec<ParamSection> {
        match self {
            Model::MlVpt(m) => m.param_report(),
            Model::Vanilla(m) => m.param_report(),
        }
    }
}
