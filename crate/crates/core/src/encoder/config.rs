use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnType {
    Swiglu,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub ffn_type: FfnType,
    /// Hidden width of the feed-forward block.
    pub ffn_hidden_dim: usize,
    /// Output width of both prototype heads.
    pub n_prototypes: usize,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            in_channels: 5,
            embed_dim: 96,
            depth: 4,
            n_heads: 4,
            ffn_type: FfnType::Swiglu,
            ffn_hidden_dim: 256,
            n_prototypes: 1024,
            head_hidden_dim: 256,
            head_bottleneck_dim: 64,
            layer_norm_eps: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        let dims = [
            self.in_channels,
            self.embed_dim,
            self.depth,
            self.ffn_hidden_dim,
            self.n_prototypes,
            self.head_hidden_dim,
            self.head_bottleneck_dim,
        ];
        if dims.contains(&0) {
            return err("encoder dimensions must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return err("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}
