use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Error, Result};

/// How point coordinates become positional embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbedVariant {
    /// Sinusoidal embedding of absolute coordinates.
    PointSincos,
    /// Learned linear map of absolute coordinates.
    PointLinear,
    /// Sinusoidal embedding relative to the first-frame apex point.
    ApexSincos,
    /// Learned linear map relative to the first-frame apex point.
    ApexLinear,
}

impl PosEmbedVariant {
    pub const ALL: [PosEmbedVariant; 4] = [
        PosEmbedVariant::PointSincos,
        PosEmbedVariant::PointLinear,
        PosEmbedVariant::ApexSincos,
        PosEmbedVariant::ApexLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PosEmbedVariant::PointSincos => "point_sincos",
            PosEmbedVariant::PointLinear => "point_linear",
            PosEmbedVariant::ApexSincos => "apex_sincos",
            PosEmbedVariant::ApexLinear => "apex_linear",
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, PosEmbedVariant::PointLinear | PosEmbedVariant::ApexLinear)
    }

    pub fn is_apex_relative(self) -> bool {
        matches!(self, PosEmbedVariant::ApexSincos | PosEmbedVariant::ApexLinear)
    }
}

impl fmt::Display for PosEmbedVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PosEmbedVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown positional embedding `{s}` (expected point_sincos, point_linear, apex_sincos or apex_linear)"
                ))
            })
    }
}

/// Architecture of the encoder and its tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    pub frames: usize,
    pub points: usize,
    pub pos_embed: PosEmbedVariant,
    pub use_class_token: bool,
    /// Pixel coordinates are divided by this before the linear positional map.
    pub coord_scale: f32,
    pub ln_eps: f32,
}

impl ModelConfig {
    /// The "tiny" transformer: k = 192, 3 heads, 12 blocks, MLP 768,
    /// 16 x 16 patches over 18 frames of 84 points.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 192,
            heads: 3,
            depth: 12,
            mlp_hidden: 768,
            patch_size: 16,
            frames: 18,
            points: 84,
            pos_embed: PosEmbedVariant::PointLinear,
            use_class_token: true,
            coord_scale: 224.0,
            ln_eps: 1e-6,
        }
    }

    pub fn small() -> Self {
        Self {
            embed_dim: 384,
            heads: 6,
            mlp_hidden: 1536,
            ..Self::tiny()
        }
    }

    pub fn base() -> Self {
        Self {
            embed_dim: 768,
            heads: 12,
            mlp_hidden: 3072,
            ..Self::tiny()
        }
    }

    /// Same width rules as [`tiny`](Self::tiny) with MLP width 4k.
    pub fn with_dims(mut self, embed_dim: usize, heads: usize, depth: usize) -> Self {
        self.embed_dim = embed_dim;
        self.heads = heads;
        self.depth = depth;
        self.mlp_hidden = 4 * embed_dim;
        self
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Anatomical tokens, excluding the class token.
    pub fn point_tokens(&self) -> usize {
        self.frames * self.points
    }

    pub fn total_tokens(&self) -> usize {
        self.point_tokens() + usize::from(self.use_class_token)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return usage_err(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return usage_err("embed_dim must be even for sinusoidal embeddings");
        }
        if self.mlp_hidden == 0 || self.patch_size == 0 || self.frames == 0 || self.points == 0 {
            return usage_err("mlp_hidden, patch_size, frames and points must be positive");
        }
        if !(self.coord_scale > 0.0) || !(self.ln_eps > 0.0) {
            return usage_err("coord_scale and ln_eps must be positive");
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}
