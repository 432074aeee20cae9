//! Architecture configuration: encoder shape, rotary mode, fusion variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::N_FEATURES;
use crate::pose::CLIP_LEN;
use crate::synth::SILHOUETTE_SIZE;

pub const TEXT_EMBED_DIM: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RopeMode {
    /// Positions are the shared temporal clock (frame indices); text sits
    /// at position 0.
    Aligned,
    /// Positions are overwritten with token ordinals.
    NonAligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    /// Concatenate and mean-pool.
    Cat,
    /// Concatenate, one self-attention layer, mean-pool.
    CatAtt,
    /// Concatenate and pool through the learnable latent dictionary.
    CatLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    KnowledgeMap,
    Video,
    Text,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
    pub patch_frames: usize,
    pub rope_base: f64,
    pub rope_mode: RopeMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            mlp_ratio: 4,
            patch_frames: 8,
            rope_base: 10000.0,
            rope_mode: RopeMode::Aligned,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub modalities: Vec<Modality>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            variant: FusionVariant::CatLatent,
            modalities: vec![Modality::KnowledgeMap, Modality::Video, Modality::Text],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub n_latents: usize,
    pub text_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            n_latents: 16,
            text_dim: TEXT_EMBED_DIM,
        }
    }
}

impl ModelConfig {
    /// Desk-scale default: 8 layers single-modality, 4 layers multimodal.
    pub fn with_defaults(modalities: Vec<Modality>, variant: FusionVariant, rope_mode: RopeMode) -> Self {
        let mut cfg = ModelConfig::default();
        cfg.encoder.n_layers = if modalities.len() <= 1 { 8 } else { 4 };
        cfg.encoder.rope_mode = rope_mode;
        cfg.fusion.variant = variant;
        cfg.fusion.modalities = modalities;
        cfg
    }

    /// Tiny configuration for gradient checks.
    pub fn tiny(modalities: Vec<Modality>, variant: FusionVariant, rope_mode: RopeMode) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                mlp_ratio: 2,
                patch_frames: 8,
                rope_base: 100.0,
                rope_mode,
            },
            fusion: FusionConfig { variant, modalities },
            n_latents: 2,
            text_dim: TEXT_EMBED_DIM,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.encoder.d_model / self.encoder.n_heads
    }

    pub fn n_patches(&self) -> usize {
        CLIP_LEN / self.encoder.patch_frames
    }

    pub fn map_patch_width(&self) -> usize {
        self.encoder.patch_frames * N_FEATURES
    }

    pub fn video_patch_width(&self) -> usize {
        self.encoder.patch_frames * SILHOUETTE_SIZE * SILHOUETTE_SIZE
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.d_model == 0 || e.n_heads == 0 || e.d_model % e.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                e.d_model, e.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary pairing",
                self.head_dim()
            )));
        }
        if e.patch_frames == 0 || CLIP_LEN % e.patch_frames != 0 {
            return Err(Error::Config(format!(
                "clip length {CLIP_LEN} must be divisible by patch_frames {}",
                e.patch_frames
            )));
        }
        if self.fusion.modalities.is_empty() {
            return Err(Error::Config("at least one modality required".into()));
        }
        let mut sorted = self.fusion.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.fusion.modalities.len() {
            return Err(Error::Config("duplicate modality in fusion config".into()));
        }
        if self.n_latents == 0 {
            return Err(Error::Config("n_latents must be >= 1".into()));
        }
        Ok(())
    }
}
