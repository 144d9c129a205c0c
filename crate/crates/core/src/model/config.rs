use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spiking::{NeuronConfig, SurrogateConfig};

/// One convolutional stage of the patch-splitting front end:
/// 3x3 conv, channel affine, LIF, then optional 2x2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpsStage {
    pub channels: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub timesteps: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub image_hw: usize,
    pub in_channels: usize,
    pub sps_stages: Vec<SpsStage>,
    /// Relative position conv on the token grid, OR-ed back onto its input.
    pub rpe: bool,
    pub patch_tokens: usize,
    pub num_classes: usize,
    /// 1-based encoder blocks whose input is gated by a token selector.
    pub selector_layers: Vec<usize>,
    pub neuron: NeuronConfig,
    /// Threshold of the neuron that binarizes the attention product.
    pub attn_threshold: f32,
    pub surrogate: SurrogateConfig,
    /// Constant `s` in the attention scale `s / sqrt(D / heads)`.
    pub attention_scale: f32,
    /// Multiplier on the `1 / sqrt(fan_in)` weight init std.
    pub init_gain: f32,
}

impl ModelConfig {
    /// The trainable desk-scale configuration: 32x32 inputs, 64 tokens of width 96.
    pub fn desk() -> Self {
        Self {
            timesteps: 4,
            depth: 4,
            embed_dim: 96,
            heads: 3,
            mlp_ratio: 4.0,
            image_hw: 32,
            in_channels: 3,
            sps_stages: vec![
                SpsStage { channels: 12, pool: false },
                SpsStage { channels: 24, pool: false },
                SpsStage { channels: 48, pool: true },
                SpsStage { channels: 96, pool: true },
            ],
            rpe: true,
            patch_tokens: 64,
            num_classes: 10,
            selector_layers: vec![2, 3, 4],
            neuron: NeuronConfig::default(),
            attn_threshold: 0.5,
            surrogate: SurrogateConfig::default(),
            attention_scale: 0.25,
            init_gain: 2.0,
        }
    }

    /// The 4-block, 384-channel CIFAR model, used for cost accounting only.
    pub fn paper_dims() -> Self {
        Self {
            embed_dim: 384,
            heads: 12,
            sps_stages: vec![
                SpsStage { channels: 48, pool: false },
                SpsStage { channels: 96, pool: false },
                SpsStage { channels: 192, pool: true },
                SpsStage { channels: 384, pool: true },
            ],
            ..Self::desk()
        }
    }

    /// A small configuration that trains in seconds on one CPU core:
    /// 8x8 inputs, 16 tokens of width 16.
    pub fn compact() -> Self {
        Self {
            timesteps: 4,
            depth: 4,
            embed_dim: 16,
            heads: 2,
            mlp_ratio: 4.0,
            image_hw: 8,
            in_channels: 3,
            sps_stages: vec![SpsStage { channels: 8, pool: true }, SpsStage { channels: 16, pool: false }],
            rpe: true,
            patch_tokens: 16,
            num_classes: 4,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    /// Side of the token grid after all pooling stages.
    pub fn grid_side(&self) -> usize {
        let pools = self.sps_stages.iter().filter(|s| s.pool).count();
        self.image_hw >> pools
    }

    pub fn attention_factor(&self) -> f32 {
        self.attention_scale / (self.head_dim() as f32).sqrt()
    }

    pub fn attn_neuron(&self) -> NeuronConfig {
        self.neuron.with_threshold(self.attn_threshold)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.timesteps == 0 || self.depth == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return fail("timesteps, depth, num_classes and in_channels must be >= 1".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if !(self.mlp_ratio > 0.0) {
            return fail("mlp_ratio must be > 0".into());
        }
        let Some(last) = self.sps_stages.last() else {
            return fail("at least one SPS stage is required".into());
        };
        if last.channels != self.embed_dim {
            return fail(format!("last SPS stage has {} channels, embed_dim is {}", last.channels, self.embed_dim));
        }
        let mut side = self.image_hw;
        for s in &self.sps_stages {
            if s.pool {
                if side % 2 != 0 {
                    return fail(format!("cannot pool odd spatial size {side}"));
                }
                side /= 2;
            }
        }
        if side == 0 || side * side != self.patch_tokens {
            return fail(format!("patch_tokens {} does not match ({} / downsampling)^2 = {}", self.patch_tokens, self.image_hw, side * side));
        }
        let mut prev = 0;
        for &l in &self.selector_layers {
            if l == 0 || l > self.depth || l <= prev {
                return fail(format!("selector_layers must be strictly increasing within 1..={}", self.depth));
            }
            prev = l;
        }
        if !(self.attn_threshold > 0.0) || !(self.attention_scale > 0.0) || !(self.init_gain > 0.0) {
            return fail("attn_threshold, attention_scale and init_gain must be > 0".into());
        }
        self.neuron.validate()?;
        self.surrogate.validate()
    }
}
