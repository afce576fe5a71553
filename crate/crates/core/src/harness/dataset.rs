use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::vit::ModelConfig;

/// Generator settings for the synthetic patch-classification task.
///
/// Every class owns a prototype patch. An image of class `y` carries
/// `foreground` copies of prototype `y`, each with independent Gaussian
/// noise, at distinct random patch positions; every other patch is gray
/// noise that carries no label information. The label is therefore a
/// function of the foreground patches alone, and the Bayes classifier
/// compares them against the prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRecipe {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub classes: usize,
    /// Foreground patches per image.
    pub foreground: usize,
    /// Noise standard deviation on foreground patches.
    pub noise: f64,
    /// Noise standard deviation around mid-gray on background patches.
    pub background_noise: f64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            classes: 8,
            foreground: 4,
            noise: 0.6,
            background_noise: 0.15,
            train_size: 2048,
            val_size: 512,
        }
    }
}

impl ToyRecipe {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 || self.classes == 0 {
            return Err(Error::Config("channels and classes must be positive".into()));
        }
        let patches = self.grid() * self.grid();
        if self.foreground == 0 || self.foreground > patches {
            return Err(Error::Config(format!("foreground must lie in 1..={patches}, got {}", self.foreground)));
        }
        if !(self.noise >= 0.0 && self.background_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Rejects a model whose input geometry or class count differs.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if (model.image_size, model.patch_size, model.channels, model.class_count)
            != (self.image_size, self.patch_size, self.channels, self.classes)
        {
            return Err(Error::Config(format!(
                "dataset {}px/{}px patches/{} channels/{} classes does not match model {}px/{}px/{}/{}",
                self.image_size,
                self.patch_size,
                self.channels,
                self.classes,
                model.image_size,
                model.patch_size,
                model.channels,
                model.class_count
            )));
        }
        Ok(())
    }

    /// Class prototypes, each `patch_size² · channels` values in `[0.1, 0.9]`.
    pub fn prototypes(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.patch_size * self.patch_size * self.channels;
        (0..self.classes)
            .map(|_| (0..dim).map(|_| rng.gen_range(0.1..0.9)).collect())
            .collect()
    }
}

/// Labelled images, HWC with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub split: String,
    pub seed: u64,
    /// Foreground patch indices per image (row-major), when known.
    pub foreground: Vec<Vec<usize>>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split.clone(),
            seed: self.seed,
            foreground: self.foreground.iter().take(n).cloned().collect(),
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn split_seed(seed: u64, split: &str) -> u64 {
    split
        .bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Generates `count` class-balanced examples of `split`. Prototypes depend
/// only on `seed`, so all splits of one seed share them. Pixel values are
/// multiples of 1/255.
pub fn gen_dataset(recipe: &ToyRecipe, seed: u64, split: &str, count: usize) -> Result<ToyDataset> {
    recipe.validate()?;
    let protos = recipe.prototypes(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, split));
    let (s, p, c) = (recipe.image_size, recipe.patch_size, recipe.channels);
    let g = recipe.grid();
    let fg_noise = Normal::new(0.0, recipe.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let bg_noise = Normal::new(0.0, recipe.background_noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut foreground = Vec::with_capacity(count);
    for i in 0..count {
        let y = i % recipe.classes;
        let mut patches: Vec<usize> = (0..g * g).collect();
        patches.shuffle(&mut rng);
        let mut fg = patches[..recipe.foreground].to_vec();
        fg.sort_unstable();
        let mut data = vec![0.0; s * s * c];
        for patch in 0..g * g {
            let (pr, pc) = (patch / g, patch % g);
            let is_fg = fg.binary_search(&patch).is_ok();
            for r in 0..p {
                for col in 0..p {
                    for ch in 0..c {
                        let v = if is_fg {
                            let base = protos[y][(r * p + col) * c + ch];
                            base + if recipe.noise > 0.0 { fg_noise.sample(&mut rng) } else { 0.0 }
                        } else {
                            0.5 + if recipe.background_noise > 0.0 {
                                bg_noise.sample(&mut rng)
                            } else {
                                0.0
                            }
                        };
                        data[((pr * p + r) * s + pc * p + col) * c + ch] = quantize(v);
                    }
                }
            }
        }
        images.push(Tensor::new(vec![s, s, c], data)?);
        labels.push(y);
        foreground.push(fg);
    }
    Ok(ToyDataset {
        images,
        labels,
        split: split.to_string(),
        seed,
        foreground,
    })
}

/// Training and validation splits of `recipe` under `seed`.
pub fn gen_splits(recipe: &ToyRecipe, seed: u64) -> Result<(ToyDataset, ToyDataset)> {
    Ok((
        gen_dataset(recipe, seed, "train", recipe.train_size)?,
        gen_dataset(recipe, seed, "val", recipe.val_size)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(img: &Tensor, recipe: &ToyRecipe, idx: usize) -> Vec<f64> {
        let (s, p, c, g) = (recipe.image_size, recipe.patch_size, recipe.channels, recipe.grid());
        let (pr, pc) = (idx / g, idx % g);
        let mut out = Vec::new();
        for r in 0..p {
            for col in 0..p {
                for ch in 0..c {
                    out.push(img.data()[((pr * p + r) * s + pc * p + col) * c + ch]);
                }
            }
        }
        out
    }

    #[test]
    fn deterministic_and_balanced() {
        let r = ToyRecipe::default();
        let a = gen_dataset(&r, 5, "train", 64).unwrap();
        let b = gen_dataset(&r, 5, "train", 64).unwrap();
        assert_eq!(a, b);
        for k in 0..r.classes {
            assert_eq!(a.labels.iter().filter(|&&y| y == k).count(), 64 / r.classes);
        }
        let v = gen_dataset(&r, 5, "val", 64).unwrap();
        assert_ne!(a.images, v.images);
    }

    #[test]
    fn noiseless_foreground_is_linearly_separable() {
        let r = ToyRecipe {
            noise: 0.0,
            ..ToyRecipe::default()
        };
        let protos = r.prototypes(9);
        let d = gen_dataset(&r, 9, "train", 200).unwrap();
        // Nearest prototype is the linear rule argmax_k <w_k, x> − |w_k|²/2.
        for ((img, &y), fg) in d.images.iter().zip(&d.labels).zip(&d.foreground) {
            let x = patch(img, &r, fg[0]);
            let score = |w: &Vec<f64>| {
                w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() - 0.5 * w.iter().map(|a| a * a).sum::<f64>()
            };
            let pred = (0..r.classes).max_by(|&a, &b| score(&protos[a]).total_cmp(&score(&protos[b]))).unwrap();
            assert_eq!(pred, y);
        }
    }

    #[test]
    fn values_are_quantized() {
        let d = gen_dataset(&ToyRecipe::default(), 1, "val", 4).unwrap();
        for img in &d.images {
            for &v in img.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!((v * 255.0).round() / 255.0, v);
            }
        }
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let r = ToyRecipe {
            patch_size: 5,
            ..ToyRecipe::default()
        };
        assert!(gen_dataset(&r, 0, "train", 1).is_err());
    }
}
