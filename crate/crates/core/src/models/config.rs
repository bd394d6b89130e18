use serde::{Deserialize, Serialize};

/// How the projection network's skip path reduces `D x M` tokens to `D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkipReducer {
    #[default]
    Mean,
    Sum,
}

/// Architecture of the four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Transformer blocks in the body (L).
    pub blocks: usize,
    /// Embedding dimension (D).
    pub dim: usize,
    pub heads: usize,
    /// Input image as `[channels, height, width]`.
    pub image: [usize; 3],
    /// Side of the square patch each smashed token covers.
    pub patch: usize,
    /// Number of classes (K).
    pub classes: usize,
    /// Block sampling is restricted to `1..=sample_limit` (S).
    pub sample_limit: usize,
    pub mlp_ratio: f64,
    /// Hidden channels of the client head's first convolution.
    pub head_channels: usize,
    /// Kernel of the projection network's first convolution (odd).
    pub projection_kernel: usize,
    pub skip_reducer: SkipReducer,
    /// Positional embeddings receive gradients and optimizer updates.
    pub train_pos_embed: bool,
    /// Only materialize blocks `1..=sample_limit`; blocks past the limit are
    /// never used by the block-sampling variants.
    pub trim_unsampled_blocks: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains in seconds on one CPU core.
    pub fn desk() -> Self {
        Self {
            blocks: 4,
            dim: 32,
            heads: 4,
            image: [1, 16, 16],
            patch: 4,
            classes: 4,
            sample_limit: 2,
            mlp_ratio: 2.0,
            head_channels: 8,
            projection_kernel: 1,
            skip_reducer: SkipReducer::Mean,
            train_pos_embed: true,
            trim_unsampled_blocks: false,
            ln_eps: 1e-6,
        }
    }

    /// ViT-B/16 geometry: 12 blocks of width 768, 196 patch tokens, sampling
    /// limited to the first 6 blocks.
    pub fn vit_b16(classes: usize) -> Self {
        Self {
            blocks: 12,
            dim: 768,
            heads: 12,
            image: [3, 224, 224],
            patch: 16,
            classes,
            sample_limit: 6,
            mlp_ratio: 4.0,
            head_channels: 64,
            projection_kernel: 3,
            ..Self::desk()
        }
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image[1] / self.patch.max(1), self.image[2] / self.patch.max(1))
    }

    /// Patch tokens per sample (M).
    pub fn tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }

    /// Blocks that actually exist in the body.
    pub fn materialized_blocks(&self) -> usize {
        if self.trim_unsampled_blocks {
            self.sample_limit
        } else {
            self.blocks
        }
    }

    /// Every violated constraint, empty when the configuration is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.blocks == 0 {
            out.push("model.blocks must be at least 1".to_string());
        }
        if self.dim == 0 || self.heads == 0 {
            out.push("model.dim and model.heads must be positive".to_string());
        } else if self.dim % self.heads != 0 {
            out.push(format!("model.dim ({}) must be divisible by model.heads ({})", self.dim, self.heads));
        }
        if self.image.iter().any(|&v| v == 0) {
            out.push(format!("model.image {:?} has a zero extent", self.image));
        }
        if self.patch == 0 {
            out.push("model.patch must be positive".to_string());
        } else if self.image[1] % self.patch != 0 || self.image[2] % self.patch != 0 {
            out.push(format!("model.image {:?} is not divisible into {}-pixel patches", self.image, self.patch));
        }
        if self.classes < 2 {
            out.push("model.classes must be at least 2".to_string());
        }
        if self.sample_limit == 0 || self.sample_limit > self.blocks {
            out.push(format!(
                "model.sample_limit ({}) must lie in 1..={}",
                self.sample_limit, self.blocks
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            out.push("model.mlp_ratio must be positive".to_string());
        }
        if self.head_channels == 0 {
            out.push("model.head_channels must be positive".to_string());
        }
        if self.projection_kernel % 2 == 0 {
            out.push("model.projection_kernel must be odd".to_string());
        }
        if !(self.ln_eps > 0.0) {
            out.push("model.ln_eps must be positive".to_string());
        }
        out
    }
}
