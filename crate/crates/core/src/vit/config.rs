use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a plain ViT: `depth` pre-norm blocks over `token_count` tokens
/// (image patches plus one class token) of width `embed_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub class_count: usize,
}

impl ModelConfig {
    /// Four blocks, 16 image tokens of width 32: the desk-scale default.
    pub fn toy() -> Self {
        Self {
            depth: 4,
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            heads: 4,
            class_count: 8,
        }
    }

    /// DeiT-S geometry (224px, patch 16, width 384, 12 blocks).
    pub fn vit_small() -> Self {
        Self {
            depth: 12,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 384,
            heads: 6,
            class_count: 1000,
        }
    }

    /// DeiT-B geometry (224px, patch 16, width 768, 12 blocks).
    pub fn vit_base() -> Self {
        Self {
            embed_dim: 768,
            heads: 12,
            ..Self::vit_small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("class_count", self.class_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens plus the class token.
    pub fn token_count(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }
}
