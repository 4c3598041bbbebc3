//! The group-aware prompt-tuned encoder: a ViT backbone (frozen after
//! pretraining) carrying fresh learnable prompt tokens at every block, with
//! an attention mask that stops information flow between prompts of
//! different (mode, group) pairs.
//!
//! Token order everywhere is `[cls | CO prompts | DC prompts | patches]`
//! with prompts group-major, slot-minor. Prompt tokens are re-injected at
//! every block (the deep scheme): each block's prompt *outputs* are
//! discarded except after the final block, where they become the
//! group-aware representations.

use ndarray::{s, Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelgraph::AffinityMode;
use crate::nn::{AttentionMask, Block, BlockCtx, Parameter, PatchCtx, PatchEmbed};

/// Geometry and prompt-budget configuration of the encoder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub n_groups: usize,
    pub n_slots: usize,
    pub prompt_init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            dim: 32,
            n_heads: 4,
            image_size: 32,
            patch_size: 8,
            channels: 1,
            n_groups: 3,
            n_slots: 3,
            prompt_init_scale: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("need at least one block".into()));
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "head count {} must divide dim {}",
                self.n_heads, self.dim
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_groups == 0 || self.n_slots == 0 {
            return Err(Error::InvalidConfig("n_groups and n_slots must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Prompt tokens per layer across both modes.
    pub fn n_prompts(&self) -> usize {
        2 * self.n_groups * self.n_slots
    }

    pub fn n_tokens(&self) -> usize {
        1 + self.n_prompts() + self.n_patches()
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            n_groups: self.n_groups,
            n_slots: self.n_slots,
            n_patches: self.n_patches(),
        }
    }
}

/// Maps token positions to their roles.
#[derive(Debug, Clone, Copy)]
pub struct TokenLayout {
    pub n_groups: usize,
    pub n_slots: usize,
    pub n_patches: usize,
}

impl TokenLayout {
    pub fn n_prompts(&self) -> usize {
        2 * self.n_groups * self.n_slots
    }

    pub fn n_tokens(&self) -> usize {
        1 + self.n_prompts() + self.n_patches
    }

    pub fn prompt_base(&self) -> usize {
        1
    }

    pub fn patch_base(&self) -> usize {
        1 + self.n_prompts()
    }

    /// (mode, group, slot) of a prompt row (0-based within the prompt span).
    pub fn prompt_meta(&self, row: usize) -> (AffinityMode, usize, usize) {
        let per_mode = self.n_groups * self.n_slots;
        let mode = if row < per_mode { AffinityMode::Co } else { AffinityMode::Dc };
        let within = row % per_mode;
        (mode, within / self.n_slots, within % self.n_slots)
    }

    /// Prompt row of a (mode, group, slot) triple.
    pub fn prompt_row(&self, mode: AffinityMode, group: usize, slot: usize) -> usize {
        let per_mode = self.n_groups * self.n_slots;
        let base = match mode {
            AffinityMode::Co => 0,
            AffinityMode::Dc => per_mode,
        };
        base + group * self.n_slots + slot
    }

    /// Token index of a prompt row.
    pub fn prompt_token(&self, row: usize) -> usize {
        self.prompt_base() + row
    }
}

/// The predefined attention mask: cls and patch queries see everything;
/// a prompt query sees cls, all patches, and only prompts of its own
/// (mode, group).
pub fn build_mask(cfg: &EncoderConfig) -> Result<AttentionMask> {
    cfg.validate()?;
    let layout = cfg.layout();
    let t = layout.n_tokens();
    let mut allow = Array2::from_elem((t, t), true);
    let base = layout.prompt_base();
    let n_prompts = layout.n_prompts();
    for q in 0..n_prompts {
        let (qm, qt, _) = layout.prompt_meta(q);
        for k in 0..n_prompts {
            let (km, kt, _) = layout.prompt_meta(k);
            if qm != km || qt != kt {
                allow[[base + q, base + k]] = false;
            }
        }
    }
    AttentionMask::new(allow)
}

/// Per-layer learnable prompt tokens: one `[n_prompts, D]` parameter per
/// block. The grouped interpretation of the rows lives in [`TokenLayout`].
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub layers: Vec<Parameter>,
}

impl PromptBank {
    pub fn new(
        name: &str,
        n_layers: usize,
        n_prompts: usize,
        dim: usize,
        init_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let limit = init_scale * (6.0 / dim as f64).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                Parameter::uniform(
                    format!("{name}.l{l}"),
                    &[n_prompts, dim],
                    limit,
                    true,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn n_prompts(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().collect()
    }
}

/// ViT backbone: patch stem, cls token, and the block stack. Frozen (all
/// parameters non-trainable) once prompt tuning starts.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub patch: PatchEmbed,
    pub cls: Parameter,
    pub blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let patch = PatchEmbed::new(
            "backbone.patch",
            cfg.channels,
            cfg.image_size,
            cfg.image_size,
            cfg.patch_size,
            cfg.dim,
            true,
            rng,
        )?;
        let cls = Parameter::uniform("backbone.cls", &[cfg.dim], 0.02, true, rng);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                Block::new(
                    &format!("backbone.block{l}"),
                    cfg.dim,
                    cfg.n_heads,
                    4 * cfg.dim,
                    true,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { patch, cls, blocks })
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_trainable(trainable);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.trainable())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = self.patch.params();
        v.push(&self.cls);
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.patch.params_mut();
        v.push(&mut self.cls);
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }
}

/// Final-block prompt outputs split by mode, `[group][slot]` vectors.
#[derive(Debug, Clone)]
pub struct GroupRepresentations {
    pub co: Vec<Vec<Array1<f64>>>,
    pub dc: Vec<Vec<Array1<f64>>>,
}

impl GroupRepresentations {
    /// Splits a `[n_prompts, D]` prompt-output matrix by the layout.
    pub fn from_matrix(layout: &TokenLayout, prompts: &Array2<f64>) -> Self {
        let mut co = vec![vec![Array1::zeros(0); layout.n_slots]; layout.n_groups];
        let mut dc = co.clone();
        for row in 0..layout.n_prompts() {
            let (mode, t, e) = layout.prompt_meta(row);
            let v = prompts.row(row).to_owned();
            match mode {
                AffinityMode::Co => co[t][e] = v,
                AffinityMode::Dc => dc[t][e] = v,
            }
        }
        Self { co, dc }
    }

    pub fn by_mode(&self, mode: AffinityMode) -> &Vec<Vec<Array1<f64>>> {
        match mode {
            AffinityMode::Co => &self.co,
            AffinityMode::Dc => &self.dc,
        }
    }

    /// Packs per-mode gradients back into a `[n_prompts, D]` matrix.
    pub fn grads_to_matrix(
        layout: &TokenLayout,
        d_co: &[Vec<Array1<f64>>],
        d_dc: &[Vec<Array1<f64>>],
        dim: usize,
    ) -> Array2<f64> {
        let mut m = Array2::zeros((layout.n_prompts(), dim));
        for row in 0..layout.n_prompts() {
            let (mode, t, e) = layout.prompt_meta(row);
            let src = match mode {
                AffinityMode::Co => &d_co[t][e],
                AffinityMode::Dc => &d_dc[t][e],
            };
            m.row_mut(row).assign(src);
        }
        m
    }
}

/// Everything the encoder backward needs.
pub struct EncoderCtx {
    patch: PatchCtx,
    blocks: Vec<BlockCtx>,
    n_prompts: usize,
}

impl EncoderCtx {
    /// Post-softmax attention weights of block `i`, one matrix per head.
    pub fn attention_weights(&self, block: usize) -> &Vec<Array2<f64>> {
        &self.blocks[block].attn.att
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
}

/// Output of one encoder pass.
pub struct EncoderOutput {
    pub cls_out: Array1<f64>,
    /// Final-block prompt outputs, `[n_prompts, D]`.
    pub prompt_out: Array2<f64>,
    pub patch_out: Array2<f64>,
}

/// Deep-prompt forward: at every block the prompt rows of the input are the
/// block's own learnable tokens; prompt outputs of non-final blocks are
/// discarded.
pub fn encoder_forward(
    backbone: &Backbone,
    bank: &PromptBank,
    mask: &AttentionMask,
    image: &Array3<f64>,
) -> Result<(EncoderOutput, EncoderCtx)> {
    let n_layers = backbone.blocks.len();
    if bank.layers.len() != n_layers {
        return Err(Error::ShapeMismatch {
            context: "prompt bank layers",
            expected: vec![n_layers],
            actual: vec![bank.layers.len()],
        });
    }
    let (embedded, patch_ctx) = backbone.patch.forward(image)?;
    let n_patches = embedded.nrows();
    let dim = backbone.dim();
    let m = bank.n_prompts();
    let t = 1 + m + n_patches;
    if mask.len() != t {
        return Err(Error::ShapeMismatch {
            context: "encoder mask",
            expected: vec![t, t],
            actual: vec![mask.len(), mask.len()],
        });
    }

    let mut tokens = Array2::<f64>::zeros((t, dim));
    tokens.row_mut(0).assign(&backbone.cls.as1());
    tokens.slice_mut(s![1..1 + m, ..]).assign(&bank.layers[0].as2());
    tokens.slice_mut(s![1 + m.., ..]).assign(&embedded);

    let mut block_ctxs = Vec::with_capacity(n_layers);
    for (l, block) in backbone.blocks.iter().enumerate() {
        if l > 0 {
            tokens
                .slice_mut(s![1..1 + m, ..])
                .assign(&bank.layers[l].as2());
        }
        let (out, ctx) = block.forward(&tokens, mask)?;
        tokens = out;
        block_ctxs.push(ctx);
    }

    Ok((
        EncoderOutput {
            cls_out: tokens.row(0).to_owned(),
            prompt_out: tokens.slice(s![1..1 + m, ..]).to_owned(),
            patch_out: tokens.slice(s![1 + m.., ..]).to_owned(),
        },
        EncoderCtx {
            patch: patch_ctx,
            blocks: block_ctxs,
            n_prompts: m,
        },
    ))
}

/// Backward of [`encoder_forward`]. Gradients flow into every layer's
/// prompt tokens; the backbone accumulates only if unfrozen (pretraining).
pub fn encoder_backward(
    backbone: &mut Backbone,
    bank: &mut PromptBank,
    ctx: &EncoderCtx,
    d_cls: Option<&Array1<f64>>,
    d_prompts: Option<&Array2<f64>>,
    d_patches: Option<&Array2<f64>>,
) {
    let m = ctx.n_prompts;
    let n_layers = ctx.blocks.len();
    let dim = backbone.dim();
    let n_patches = backbone.patch.n_tokens();
    let t = 1 + m + n_patches;

    let mut d_out = Array2::<f64>::zeros((t, dim));
    if let Some(dc) = d_cls {
        d_out.row_mut(0).assign(dc);
    }
    if let Some(dp) = d_prompts {
        d_out.slice_mut(s![1..1 + m, ..]).assign(dp);
    }
    if let Some(de) = d_patches {
        d_out.slice_mut(s![1 + m.., ..]).assign(de);
    }

    for l in (0..n_layers).rev() {
        let d_in = backbone.blocks[l].backward(&ctx.blocks[l], &d_out);
        // The prompt rows of this block's input are layer l's own tokens.
        bank.layers[l].accum_grad(d_in.slice(s![1..1 + m, ..]).to_owned().into_dyn().view());
        d_out = d_in;
        if l > 0 {
            // Block l-1's prompt outputs were discarded by the replacement.
            d_out.slice_mut(s![1..1 + m, ..]).fill(0.0);
        }
    }

    backbone
        .cls
        .accum_grad(d_out.row(0).to_owned().into_dyn().view());
    backbone
        .patch
        .backward(&ctx.patch, &d_out.slice(s![1 + m.., ..]).to_owned());
}

/// Sum of sizes of trainable parameters only.
pub fn count_learnable_params(params: &[&Parameter]) -> usize {
    params
        .iter()
        .filter(|p| p.trainable())
        .map(|p| p.len())
        .sum()
}
