//! Training: decoupled-weight-decay adaptive optimizer, one-cycle learning
//! rate schedule, EMA shadow parameters, optional backbone pretraining, and
//! the epoch loop with early stopping on validation mAP.
//!
//! Everything is single-threaded and seeded; identical (seed, config, data)
//! reproduce checkpoints and history bit-for-bit.

use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::encoder::{encoder_backward, encoder_forward, EncoderConfig, PromptBank};
use crate::error::{Error, Result};
use crate::heads::{asl_grad, classify_shared, classify_shared_backward, AslConfig, ModeHeads};
use crate::metrics::{evaluate, EvalResult};
use crate::model::Model;
use crate::nn::{AttentionMask, Parameter};
use crate::rng::substream;

const SALT_SHUFFLE: u64 = 0x7368;
const SALT_PRETRAIN: u64 = 0x7072;

/// Which model variant a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    MlVpt,
    VanillaVpt,
}

/// Training hyperparameters. The defaults follow the usual multi-label
/// prompt-tuning recipe: one-cycle up to 5e-4, batch 64, 40 epochs with
/// early stopping, EMA decay 0.9997.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub final_lr_ratio: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Supervised epochs for the backbone before it is frozen; 0 leaves the
    /// backbone at random initialization.
    pub backbone_pretrain_epochs: usize,
    /// Peak learning rate of the backbone pretraining phase. The backbone
    /// trains from scratch, so it takes a hotter schedule than the
    /// prompt-tuning phase.
    pub backbone_pretrain_max_lr: f64,
    /// Threshold for the validation CF1/OF1 columns of the history.
    pub eval_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 5e-4,
            epochs: 40,
            batch_size: 64,
            ema_decay: 0.9997,
            weight_decay: 1e-4,
            warmup_fraction: 0.1,
            final_lr_ratio: 1e-3,
            early_stop_patience: 5,
            seed: 0,
            mode: TrainMode::MlVpt,
            backbone_pretrain_epochs: 12,
            backbone_pretrain_max_lr: 2e-3,
            eval_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig("ema_decay must be in [0,1]".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig("warmup_fraction must be in [0,1]".into()));
        }
        if self.max_lr < 0.0 || self.final_lr_ratio < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("rates must be non-negative".into()));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return Err(Error::InvalidConfig("eval_threshold must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with decoupled weight decay and bias
/// correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: usize,
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// One update over the trainable subset of `params`. Fails fast on any
    /// non-finite gradient.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f64) -> Result<()> {
        let trainable: Vec<&mut &mut Parameter> =
            params.iter_mut().filter(|p| p.trainable()).collect();
        if self.moments.is_empty() {
            self.moments = trainable
                .iter()
                .map(|p| {
                    (
                        ArrayD::zeros(p.value().raw_dim()),
                        ArrayD::zeros(p.value().raw_dim()),
                    )
                })
                .collect();
        }
        if self.moments.len() != trainable.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer saw {} trainable parameters, expected {}",
                trainable.len(),
                self.moments.len()
            )));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (param, (m, v)) in trainable.into_iter().zip(self.moments.iter_mut()) {
            if let Some(bad) = param.grad().iter().find(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {} ({bad})", param.name()),
                });
            }
            let grad = param.grad().clone();
            m.zip_mut_with(&grad, |mi, &g| *mi = self.beta1 * *mi + (1.0 - self.beta1) * g);
            v.zip_mut_with(&grad, |vi, &g| *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g);

            let wd = self.weight_decay;
            let eps = self.eps;
            let value = param.value_mut();
            ndarray::Zip::from(&mut *value).and(&*m).and(&*v).for_each(|p, &mi, &vi| {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            });
        }
        Ok(())
    }
}

/// One-cycle schedule: linear warmup from `max_lr / 25` to `max_lr` over
/// `warmup_fraction` of the steps, then cosine decay to
/// `max_lr * final_lr_ratio`.
pub fn one_cycle_lr(
    step: usize,
    total_steps: usize,
    max_lr: f64,
    warmup_fraction: f64,
    final_lr_ratio: f64,
) -> f64 {
    debug_assert!(step < total_steps.max(1));
    let start = max_lr / 25.0;
    let end = max_lr * final_lr_ratio;
    let warmup_steps = ((total_steps as f64 * warmup_fraction).round() as usize).min(total_steps);
    if step < warmup_steps {
        return start + (max_lr - start) * step as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps - warmup_steps;
    if decay_steps == 0 {
        return end;
    }
    let progress = (step - warmup_steps) as f64 / decay_steps as f64;
    end + (max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Shadow copies of every trainable parameter, updated as
/// `shadow <- decay * shadow + (1 - decay) * value`.
///
/// The raw recursion starts at the initial parameter values, so with a slow
/// decay and a short run the shadow is still dominated by initialization.
/// Evaluation therefore reads the init-debiased average
/// `(shadow - decay^t * theta_0) / (1 - decay^t)`, which weights the actual
/// iterates exactly as the recursion does and converges to the raw shadow as
/// `t` grows. The raw shadow itself is never altered.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    steps: usize,
    shadow: Vec<(String, ArrayD<f64>)>,
    init: Vec<ArrayD<f64>>,
}

impl EmaState {
    pub fn new(params: &[&Parameter], decay: f64) -> Self {
        let shadow: Vec<(String, ArrayD<f64>)> = params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| (p.name().to_string(), p.value().clone()))
            .collect();
        let init = shadow.iter().map(|(_, s)| s.clone()).collect();
        Self {
            decay,
            steps: 0,
            shadow,
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.shadow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shadow.is_empty()
    }

    /// Raw shadows, exactly as the recursion left them.
    pub fn shadows(&self) -> &[(String, ArrayD<f64>)] {
        &self.shadow
    }

    pub fn init_values(&self) -> &[ArrayD<f64>] {
        &self.init
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Swaps in externally stored state (checkpoint loading). Names and
    /// shapes must line up with the current shadow set.
    pub fn replace_state(
        &mut self,
        shadows: Vec<(String, ArrayD<f64>)>,
        init: Vec<ArrayD<f64>>,
        steps: usize,
    ) -> Result<()> {
        if shadows.len() != self.shadow.len() || init.len() != self.init.len() {
            return Err(Error::Checkpoint(format!(
                "EMA has {} shadows, checkpoint provides {}",
                self.shadow.len(),
                shadows.len()
            )));
        }
        for ((name, old), (new_name, new)) in self.shadow.iter().zip(&shadows) {
            if name != new_name || old.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "EMA shadow mismatch: {name} vs {new_name}"
                )));
            }
        }
        self.shadow = shadows;
        self.init = init;
        self.steps = steps;
        Ok(())
    }

    pub fn update(&mut self, params: &[&Parameter]) {
        let d = self.decay;
        self.steps += 1;
        for ((name, shadow), param) in self
            .shadow
            .iter_mut()
            .zip(params.iter().filter(|p| p.trainable()))
        {
            debug_assert_eq!(name.as_str(), param.name());
            shadow.zip_mut_with(param.value(), |s, &v| *s = d * *s + (1.0 - d) * v);
        }
    }

    /// Writes the debiased shadow values into the trainable parameters (of a
    /// clone; live training weights are never touched by evaluation).
    pub fn copy_to(&self, params: &mut [&mut Parameter]) {
        let decay_pow = self.decay.powi(self.steps as i32);
        let debias = self.steps > 0 && decay_pow < 1.0 - 1e-12;
        for (((name, shadow), init), param) in self
            .shadow
            .iter()
            .zip(&self.init)
            .zip(params.iter_mut().filter(|p| p.trainable()))
        {
            debug_assert_eq!(name.as_str(), param.name());
            if debias {
                let scale = 1.0 / (1.0 - decay_pow);
                let value = param.value_mut();
                ndarray::Zip::from(&mut *value)
                    .and(shadow)
                    .and(init)
                    .for_each(|p, &s, &i| *p = (s - decay_pow * i) * scale);
            } else {
                param.value_mut().assign(shadow);
            }
        }
    }
}

/// One history row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map: f64,
    pub val_cf1: f64,
    pub val_of1: f64,
}

/// What `train` hands back. `best` carries the EMA weights of the best
/// validation epoch; the live model (mutated in place) is the `last` state.
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub ema: EmaState,
}

fn targets_of(ds: &Dataset, index: usize) -> Array1<f64> {
    ds.label_row(index).mapv(|v| v as f64)
}

/// Scores every example with `model.predict(..).combined`.
pub fn score_dataset(model: &Model, ds: &Dataset) -> Result<Array2<f64>> {
    let k = ds.labels.n_classes();
    let mut scores = Array2::<f64>::zeros((ds.len(), k));
    for i in 0..ds.len() {
        let pred = model.predict(ds.image(i))?;
        scores.row_mut(i).assign(&pred.combined);
    }
    Ok(scores)
}

/// Full evaluation of a model on a split.
pub fn evaluate_model(model: &Model, ds: &Dataset, threshold: f64) -> Result<EvalResult> {
    let scores = score_dataset(model, ds)?;
    evaluate(&scores, ds.labels.as_array(), threshold)
}

/// Supervised pretraining of the backbone on the task, after which the
/// backbone is frozen. Two throwaway heads drive it — one on the cls token
/// and one on mean-pooled patch tokens — so both the cls pathway (used by the
/// plain-VPT baseline) and the patch representations (what prompt tokens
/// attend to) are shaped. A no-op (other than freezing) when `epochs` is 0.
pub fn pretrain_backbone(
    model: &mut Model,
    enc_cfg: &EncoderConfig,
    train_ds: &Dataset,
    asl_cfg: &AslConfig,
    cfg: &TrainConfig,
) -> Result<()> {
    let epochs = cfg.backbone_pretrain_epochs;
    if epochs == 0 {
        model.backbone_mut().set_trainable(false);
        return Ok(());
    }
    let k = train_ds.labels.n_classes();
    let mut rng = substream(cfg.seed, SALT_PRETRAIN);
    let mut cls_head = ModeHeads::new("pretrain_cls", k, enc_cfg.dim, &mut rng);
    let mut patch_head = ModeHeads::new("pretrain_patch", k, enc_cfg.dim, &mut rng);
    let mut empty_bank = PromptBank::new("pretrain.none", enc_cfg.n_layers, 0, enc_cfg.dim, 0.0, &mut rng);
    let mask = AttentionMask::all_allowed(1 + enc_cfg.n_patches());
    let n_patches = enc_cfg.n_patches() as f64;

    let mut opt = AdamW::new(cfg.weight_decay);
    let n = train_ds.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (epochs * steps_per_epoch).max(1);
    let mut step = 0usize;

    model.backbone_mut().set_trainable(true);
    for epoch in 0..epochs {
        let order = train_ds.shuffled_indices(mix_epoch(cfg.seed ^ SALT_PRETRAIN, epoch));
        for batch in order.chunks(cfg.batch_size) {
            let backbone = model.backbone_mut();
            for p in backbone.params_mut() {
                p.zero_grad();
            }
            for head in [&mut cls_head, &mut patch_head] {
                head.w.zero_grad();
                head.b.zero_grad();
            }

            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (out, ctx) = encoder_forward(backbone, &empty_bank, &mask, train_ds.image(i))?;
                let target = targets_of(train_ds, i);

                let (cls_probs, cls_ctx) = classify_shared(&out.cls_out, &cls_head)?;
                let mut d_cls_probs = asl_grad(&cls_probs, &target, asl_cfg);
                d_cls_probs.mapv_inplace(|v| v * scale);
                let d_cls = classify_shared_backward(&cls_ctx, &d_cls_probs, &mut cls_head);

                let pooled = out.patch_out.sum_axis(ndarray::Axis(0)) / n_patches;
                let (patch_probs, patch_ctx) = classify_shared(&pooled, &patch_head)?;
                let mut d_patch_probs = asl_grad(&patch_probs, &target, asl_cfg);
                d_patch_probs.mapv_inplace(|v| v * scale);
                let d_pooled = classify_shared_backward(&patch_ctx, &d_patch_probs, &mut patch_head);
                let mut d_patches = Array2::<f64>::zeros(out.patch_out.raw_dim());
                for mut row in d_patches.rows_mut() {
                    row.assign(&(&d_pooled / n_patches));
                }

                encoder_backward(
                    backbone,
                    &mut empty_bank,
                    &ctx,
                    Some(&d_cls),
                    None,
                    Some(&d_patches),
                );
            }

            let lr = one_cycle_lr(
                step,
                total_steps,
                cfg.backbone_pretrain_max_lr,
                cfg.warmup_fraction,
                cfg.final_lr_ratio,
            );
            let mut params = backbone.params_mut();
            params.push(&mut cls_head.w);
            params.push(&mut cls_head.b);
            params.push(&mut patch_head.w);
            params.push(&mut patch_head.b);
            opt.step(&mut params, lr)?;
            step += 1;
        }
    }
    model.backbone_mut().set_trainable(false);
    Ok(())
}

fn mix_epoch(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x100000001b3).wrapping_add(epoch as u64)
}

/// The main loop: shuffled mini-batches, forward/backward, optimizer step,
/// EMA update; per-epoch validation mAP with EMA weights; early stopping.
pub fn train(model: &mut Model, train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train_ds.len();
    if n == 0 || val_ds.is_empty() {
        return Err(Error::InvalidConfig("empty training or validation split".into()));
    }

    let mut ema = EmaState::new(&model.params(), cfg.ema_decay);
    let mut opt = AdamW::new(cfg.weight_decay);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let order = train_ds.shuffled_indices(mix_epoch(cfg.seed ^ SALT_SHUFFLE, epoch));
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let target = targets_of(train_ds, i);
                batch_loss += model.accumulate_example(train_ds.image(i), &target, scale)?;
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss in epoch {epoch}, batch {batch_idx}"),
                });
            }
            epoch_loss += batch_loss * batch.len() as f64;

            last_lr = one_cycle_lr(step, total_steps, cfg.max_lr, cfg.warmup_fraction, cfg.final_lr_ratio);
            opt.step(&mut model.params_mut(), last_lr)?;
            ema.update(&model.params());
            step += 1;
        }
        epoch_loss /= n as f64;

        // Validate with EMA weights on a clone: live parameters stay put.
        let mut eval_model = model.clone();
        ema.copy_to(&mut eval_model.params_mut());
        let val = evaluate_model(&eval_model, val_ds, cfg.eval_threshold)?;

        history.push(EpochRecord {
            epoch,
            lr: last_lr,
            train_loss: epoch_loss,
            val_map: val.map,
            val_cf1: val.per_class_f1,
            val_of1: val.overall_f1,
        });

        let improved = best.as_ref().map_or(true, |(m, _, _)| val.map > *m);
        if improved {
            best = Some((val.map, epoch, eval_model));
        } else if let Some((_, best_epoch, _)) = best {
            if epoch - best_epoch >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let (best_val_map, best_epoch, best_model) = best.unwrap();
    Ok(TrainOutcome {
        history,
        best: best_model,
        best_epoch,
        best_val_map,
        ema,
    })
}

#[cfg(test)]
mod tests;
