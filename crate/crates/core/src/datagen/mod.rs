//! Synthetic multi-label image generation with planted co-occurrence
//! structure, plus the distribution-shift splits used to probe
//! co-occurrence overfitting.
//!
//! Labels: per image, one planted class group activates with probability
//! `p_group` (chosen uniformly among the groups); members of the active
//! group turn on with `p_in`, and every class additionally turns on with
//! `p_bg`. Images: each class owns a fixed seeded Gaussian template living
//! in its own patch-grid cell; an image is the sum of the templates of its
//! positive classes plus Gaussian pixel noise. Empty-label draws are
//! resampled.
//!
//! The decorrelated split keeps the per-class appearance and marginal rates
//! but removes all label correlation; the removed-object probe forces one
//! class of a co-occurring pair to appear and the other to stay absent.

mod io;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use io::{load_dataset, read_labels_csv, write_labels_csv, write_split, Dataset, DatasetManifest};

use crate::error::{Error, Result};
use crate::labelgraph::LabelMatrix;
use crate::rng::substream;

const SALT_TEMPLATES: u64 = 0x74_65_6d_70;
const SALT_LABELS: u64 = 0x6c_61_62_73;
const SALT_NOISE: u64 = 0x6e_6f_69_73;

const MAX_RESAMPLE_ATTEMPTS: usize = 100;

/// Generator configuration. Probabilities are per image; planted groups
/// partition the classes into contiguous index ranges.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_planted_groups: usize,
    pub p_group: f64,
    pub p_in: f64,
    pub p_bg: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub noise_sigma: f64,
    pub rng_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 12,
            n_planted_groups: 3,
            p_group: 0.4,
            p_in: 0.9,
            p_bg: 0.05,
            image_size: 32,
            patch_size: 8,
            noise_sigma: 0.1,
            rng_seed: 0,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_group", self.p_group), ("p_in", self.p_in), ("p_bg", self.p_bg)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name}={p} outside [0,1]")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.n_planted_groups == 0 || self.n_planted_groups > self.n_classes {
            return Err(Error::InvalidConfig(format!(
                "cannot plant {} groups over {} classes",
                self.n_planted_groups, self.n_classes
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_classes > self.grid_cells() {
            return Err(Error::InvalidConfig(format!(
                "{} classes need {} grid cells but only {} exist",
                self.n_classes,
                self.n_classes,
                self.grid_cells()
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Contiguous near-equal class ranges, e.g. K=12, G=3 ->
    /// {0..3}, {4..7}, {8..11}.
    pub fn planted_groups(&self) -> Vec<Vec<usize>> {
        let k = self.n_classes;
        let g = self.n_planted_groups;
        let mut groups = Vec::with_capacity(g);
        let mut start = 0;
        for t in 0..g {
            let end = (k * (t + 1)) / g;
            groups.push((start..end).collect());
            start = end;
        }
        groups
    }

    pub fn planted_group_of(&self) -> Vec<usize> {
        let mut owner = vec![0usize; self.n_classes];
        for (t, members) in self.planted_groups().iter().enumerate() {
            for &c in members {
                owner[c] = t;
            }
        }
        owner
    }
}

/// One generated split, fully materialized.
#[derive(Debug, Clone)]
pub struct GeneratedSplit {
    pub name: String,
    pub labels: LabelMatrix,
    pub images: Vec<Array3<f64>>,
}

/// Per-class templates: unit-RMS Gaussian patterns, one patch-grid cell per
/// class. Deterministic in the config seed and shared by every split.
pub fn class_templates(cfg: &SynthConfig) -> Vec<Array2<f64>> {
    let p = cfg.patch_size;
    let mut rng = substream(cfg.rng_seed, SALT_TEMPLATES);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..cfg.n_classes)
        .map(|_| {
            let mut t = Array2::from_shape_fn((p, p), |_| normal.sample(&mut rng));
            let rms = (t.iter().map(|v| v * v).sum::<f64>() / (p * p) as f64).sqrt();
            t.mapv_inplace(|v| v / rms);
            t
        })
        .collect()
}

fn render(
    cfg: &SynthConfig,
    templates: &[Array2<f64>],
    labels: &[u8],
    noise_rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let size = cfg.image_size;
    let p = cfg.patch_size;
    let grid = cfg.grid_side();
    let mut img = Array3::<f64>::zeros((1, size, size));
    for (class, &on) in labels.iter().enumerate() {
        if on == 0 {
            continue;
        }
        let cy = (class / grid) * p;
        let cx = (class % grid) * p;
        for y in 0..p {
            for x in 0..p {
                img[[0, cy + y, cx + x]] += templates[class][[y, x]];
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).unwrap();
        for v in img.iter_mut() {
            *v += normal.sample(noise_rng);
        }
    }
    img
}

/// Draws one label vector from the planted-group process, resampling empty
/// vectors up to the attempt cap.
fn sample_labels<F>(mut draw: F) -> Result<Vec<u8>>
where
    F: FnMut() -> Vec<u8>,
{
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let labels = draw();
        if labels.iter().any(|&v| v == 1) {
            return Ok(labels);
        }
    }
    Err(Error::InvalidConfig(format!(
        "no non-empty label vector in {MAX_RESAMPLE_ATTEMPTS} attempts; activation probabilities too small"
    )))
}

fn correlated_label_draw(cfg: &SynthConfig, groups: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut labels = vec![0u8; cfg.n_classes];
    if cfg.p_group > 0.0 && rng.gen_bool(cfg.p_group) {
        let g = rng.gen_range(0..groups.len());
        for &c in &groups[g] {
            if rng.gen_bool(cfg.p_in) {
                labels[c] = 1;
            }
        }
    }
    for l in labels.iter_mut() {
        if cfg.p_bg > 0.0 && rng.gen_bool(cfg.p_bg) {
            *l = 1;
        }
    }
    labels
}

fn build_split(
    cfg: &SynthConfig,
    templates: &[Array2<f64>],
    name: &str,
    n: usize,
    salt: u64,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Vec<u8>,
) -> Result<GeneratedSplit> {
    let mut label_rng = substream(cfg.rng_seed, SALT_LABELS ^ salt);
    let mut noise_rng = substream(cfg.rng_seed, SALT_NOISE ^ salt);
    let mut rows = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let labels = sample_labels(|| draw(&mut label_rng))?;
        images.push(render(cfg, templates, &labels, &mut noise_rng));
        rows.extend_from_slice(&labels);
    }
    let matrix = LabelMatrix::new(Array2::from_shape_vec((n, cfg.n_classes), rows).unwrap())?;
    Ok(GeneratedSplit {
        name: name.to_string(),
        labels: matrix,
        images,
    })
}

/// Everything `generate` produces.
#[derive(Debug, Clone)]
pub struct Generated {
    pub train: GeneratedSplit,
    pub val: GeneratedSplit,
    pub test: GeneratedSplit,
    pub planted_groups: Vec<Vec<usize>>,
}

/// Generates the train/val/test splits of the correlated task.
pub fn generate(cfg: &SynthConfig) -> Result<Generated> {
    cfg.validate()?;
    let templates = class_templates(cfg);
    let groups = cfg.planted_groups();
    let mk = |name: &str, n: usize, salt: u64| {
        build_split(cfg, &templates, name, n, salt, |rng| {
            correlated_label_draw(cfg, &groups, rng)
        })
    };
    Ok(Generated {
        train: mk("train", cfg.n_train, 1)?,
        val: mk("val", cfg.n_val, 2)?,
        test: mk("test", cfg.n_test, 3)?,
        planted_groups: groups,
    })
}

/// Labels drawn independently per class with the given marginal rates;
/// images rendered by the same template process. Co-occurrence structure
/// disappears, per-class appearance does not.
pub fn decorrelated_split(cfg: &SynthConfig, marginals: &Array1<f64>, n: usize) -> Result<GeneratedSplit> {
    cfg.validate()?;
    if marginals.len() != cfg.n_classes {
        return Err(Error::ShapeMismatch {
            context: "decorrelated marginals",
            expected: vec![cfg.n_classes],
            actual: vec![marginals.len()],
        });
    }
    let templates = class_templates(cfg);
    build_split(cfg, &templates, "decorrelated", n, 4, |rng| {
        marginals
            .iter()
            .map(|&m| u8::from(m > 0.0 && rng.gen_bool(m.min(1.0))))
            .collect()
    })
}

/// The removed-object probe for a co-occurring pair: every image contains
/// class `present`'s template and never class `removed`'s; labels mark
/// `present` positive and `removed` negative. Other classes follow the base
/// process.
pub fn removed_object_probe(
    cfg: &SynthConfig,
    present: usize,
    removed: usize,
    n: usize,
) -> Result<GeneratedSplit> {
    cfg.validate()?;
    if present >= cfg.n_classes || removed >= cfg.n_classes || present == removed {
        return Err(Error::InvalidConfig(format!(
            "invalid probe pair ({present}, {removed})"
        )));
    }
    let owner = cfg.planted_group_of();
    if owner[present] != owner[removed] {
        return Err(Error::InvalidConfig(format!(
            "probe pair ({present}, {removed}) does not co-occur in training (different planted groups)"
        )));
    }
    let templates = class_templates(cfg);
    let groups = cfg.planted_groups();
    let name = format!("probe_{present}_{removed}");
    build_split(cfg, &templates, &name, n, 5, |rng| {
        let mut labels = correlated_label_draw(cfg, &groups, rng);
        labels[present] = 1;
        labels[removed] = 0;
        labels
    })
}
