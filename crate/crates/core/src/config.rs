//! Model hyperparameters. A [`ModelConfig`] fully determines the parameter
//! layout, so the parameter count can be computed without allocating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bottleneck adapter with three parallel convolution paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub embed_dim: usize,
    pub bottleneck_ratio: f64,
    /// Channels after the 1×1 reduction in front of the 3×3 and 5×5 paths.
    pub reduce_channels: usize,
    pub path_out_1x1: usize,
    pub path_out_3x3: usize,
    pub path_out_5x5: usize,
}

impl AdapterConfig {
    /// ViT-B width: 768 → 384 hidden, paths 192/96/96, reduce to 24.
    pub fn full_scale() -> Self {
        Self {
            embed_dim: 768,
            bottleneck_ratio: 0.5,
            reduce_channels: 24,
            path_out_1x1: 192,
            path_out_3x3: 96,
            path_out_5x5: 96,
        }
    }

    /// Same proportions as [`AdapterConfig::full_scale`] for another width.
    pub fn scaled(embed_dim: usize) -> Self {
        let hidden = (embed_dim as f64 * 0.5).round() as usize;
        let p1 = hidden / 2;
        let p3 = hidden / 4;
        Self {
            embed_dim,
            bottleneck_ratio: 0.5,
            reduce_channels: (hidden / 16).max(1),
            path_out_1x1: p1,
            path_out_3x3: p3,
            path_out_5x5: hidden - p1 - p3,
        }
    }

    pub fn hidden(&self) -> usize {
        (self.embed_dim as f64 * self.bottleneck_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let hidden = self.hidden();
        if hidden == 0 || self.reduce_channels == 0 {
            return Err(Error::Config("adapter widths must be positive".into()));
        }
        let sum = self.path_out_1x1 + self.path_out_3x3 + self.path_out_5x5;
        if sum != hidden {
            return Err(Error::Config(format!(
                "adapter paths sum to {sum}, bottleneck width is {hidden}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub adapter: AdapterConfig,
    pub adapter_scale: f64,
    /// Apply a final layer norm to the token sequence before pooling.
    #[serde(default)]
    pub final_norm: bool,
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.grid() < 3 {
            return Err(Error::GridTooSmall(self.grid()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::HeadMismatch {
                dim: self.embed_dim,
                heads: self.heads,
            });
        }
        if self.depth == 0 {
            return Err(Error::Config("backbone depth must be positive".into()));
        }
        if self.adapter.embed_dim != self.embed_dim {
            return Err(Error::Config("adapter width differs from backbone".into()));
        }
        self.adapter.validate()
    }
}

/// Cross-image encoder: post-LN transformer layers over the batch axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CricaConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl CricaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::HeadMismatch {
                dim: self.embed_dim,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: CricaConfig,
    /// When false the encoder is bypassed and descriptors are the flattened
    /// pyramid features.
    pub use_crica: bool,
    pub gem_p_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// ViT-B/14 at 224², two encoder layers with 2048-wide MLPs.
    pub fn full_scale() -> Self {
        Self {
            backbone: BackboneConfig {
                image_size: 224,
                patch_size: 14,
                embed_dim: 768,
                depth: 12,
                heads: 12,
                mlp_ratio: 4.0,
                adapter: AdapterConfig::full_scale(),
                adapter_scale: 0.2,
                final_norm: false,
            },
            encoder: CricaConfig {
                layers: 2,
                embed_dim: 768,
                heads: 12,
                mlp_hidden: 2048,
            },
            use_crica: true,
            gem_p_init: 3.0,
        }
    }

    /// 64² images, patch 8, width 64, four blocks.
    pub fn desk() -> Self {
        Self::small(64, 8, 64, 4, 4)
    }

    /// A proportionally scaled-down configuration.
    pub fn small(
        image_size: usize,
        patch_size: usize,
        embed_dim: usize,
        depth: usize,
        heads: usize,
    ) -> Self {
        Self {
            backbone: BackboneConfig {
                image_size,
                patch_size,
                embed_dim,
                depth,
                heads,
                mlp_ratio: 4.0,
                adapter: AdapterConfig::scaled(embed_dim),
                adapter_scale: 0.2,
                final_norm: false,
            },
            encoder: CricaConfig {
                layers: 2,
                embed_dim,
                heads,
                mlp_hidden: 4 * embed_dim,
            },
            use_crica: true,
            gem_p_init: 3.0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.embed_dim
    }

    /// Length of the final global descriptor: 14 regions × width.
    pub fn descriptor_dim(&self) -> usize {
        crate::spm::NUM_REGIONS * self.embed_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        if self.encoder.embed_dim != self.backbone.embed_dim {
            return Err(Error::Config("encoder width differs from backbone".into()));
        }
        if !(self.gem_p_init > 0.0) {
            return Err(Error::Config("GeM p must be positive".into()));
        }
        Ok(())
    }
}
