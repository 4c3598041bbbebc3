use ndarray::{Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use super::param::Parameter;
use crate::error::{Error, Result};

/// Non-overlapping patch extraction, linear projection, and additive
/// positional embedding: the ViT stem.
///
/// Patches are ordered grid-row-major; each patch is flattened in
/// (channel, y, x) order before projection.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Parameter,
    pub bias: Parameter,
    pub pos: Parameter,
    pub patch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug)]
pub struct PatchCtx {
    patches: Array2<f64>,
}

impl PatchEmbed {
    pub fn new(
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
        dim: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "image {height}x{width} not divisible by patch size {patch}"
            )));
        }
        let in_dim = patch * patch * channels;
        let n_tokens = (height / patch) * (width / patch);
        let limit = (6.0 / (in_dim + dim) as f64).sqrt();
        Ok(Self {
            proj: Parameter::uniform(format!("{name}.proj"), &[in_dim, dim], limit, trainable, rng),
            bias: Parameter::zeros(format!("{name}.bias"), &[dim], trainable),
            pos: Parameter::uniform(format!("{name}.pos"), &[n_tokens, dim], 0.02, trainable, rng),
            patch,
            channels,
            height,
            width,
        })
    }

    pub fn n_tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn dim(&self) -> usize {
        self.proj.shape()[1]
    }

    /// Flattens the image into its `[n_tokens, patch*patch*channels]` patch matrix.
    pub fn extract_patches(&self, image: &Array3<f64>) -> Result<Array2<f64>> {
        let (c, h, w) = image.dim();
        if c != self.channels || h != self.height || w != self.width {
            return Err(Error::ShapeMismatch {
                context: "patch_embed image",
                expected: vec![self.channels, self.height, self.width],
                actual: vec![c, h, w],
            });
        }
        let p = self.patch;
        let grid_w = w / p;
        let mut patches = Array2::<f64>::zeros((self.n_tokens(), p * p * c));
        for gy in 0..h / p {
            for gx in 0..grid_w {
                let token = gy * grid_w + gx;
                let mut col = 0;
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            patches[[token, col]] = image[[ch, gy * p + py, gx * p + px]];
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(patches)
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(Array2<f64>, PatchCtx)> {
        let patches = self.extract_patches(image)?;
        let mut y = patches.dot(&self.proj.as2());
        y += &self.bias.as1();
        y += &self.pos.as2();
        Ok((y, PatchCtx { patches }))
    }

    /// Accumulates gradients for projection, bias, and positional embedding.
    /// The image itself is a leaf, so no input gradient is produced.
    pub fn backward(&mut self, ctx: &PatchCtx, dy: &Array2<f64>) {
        let dproj = ctx.patches.t().dot(dy);
        self.proj.accum_grad(dproj.into_dyn().view());
        self.bias.accum_grad(dy.sum_axis(Axis(0)).into_dyn().view());
        self.pos.accum_grad(dy.clone().into_dyn().view());
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.proj, &self.bias, &self.pos]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.proj, &mut self.bias, &mut self.pos]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embed(salt: u64) -> PatchEmbed {
        let mut rng = crate::rng::substream(23, salt);
        PatchEmbed::new("t", 1, 32, 32, 8, 16, true, &mut rng).unwrap()
    }

    #[test]
    fn token_count_matches_geometry() {
        assert_eq!(embed(0).n_tokens(), 16);
    }

    #[test]
    fn zero_image_zero_pos_gives_bias_rows() {
        let mut pe = embed(1);
        pe.pos.value_mut().fill(0.0);
        pe.bias.value_mut().fill(0.5);
        let img = Array3::zeros((1, 32, 32));
        let (y, _) = pe.forward(&img).unwrap();
        assert!(y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_indivisible_geometry() {
        let mut rng = crate::rng::substream(23, 2);
        assert!(PatchEmbed::new("t", 1, 30, 32, 8, 16, true, &mut rng).is_err());
    }

    #[test]
    fn patch_permutation_permutes_rows() {
        // Swapping two patches of the input swaps the corresponding rows of
        // the pre-position-embedding projection. Oracle: project each patch
        // directly.
        let mut pe = embed(3);
        pe.pos.value_mut().fill(0.0);
        let mut rng = crate::rng::substream(23, 4);
        let img = Array3::from_shape_fn((1, 32, 32), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));

        let mut swapped = img.clone();
        // Swap patch (0,0) with patch (1,2).
        for py in 0..8 {
            for px in 0..8 {
                let a = img[[0, py, px]];
                let b = img[[0, 8 + py, 16 + px]];
                swapped[[0, py, px]] = b;
                swapped[[0, 8 + py, 16 + px]] = a;
            }
        }
        let (y, _) = pe.forward(&img).unwrap();
        let (y_swapped, _) = pe.forward(&swapped).unwrap();
        // token ids: (0,0) -> 0, (1,2) -> 1*4+2 = 6
        assert_eq!(y.row(0), y_swapped.row(6));
        assert_eq!(y.row(6), y_swapped.row(0));

        // Direct per-patch projection oracle for one row.
        let patches = pe.extract_patches(&img).unwrap();
        let direct = patches.row(6).dot(&pe.proj.as2()) + &pe.bias.as1();
        for (a, b) in y.row(6).iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
