//! Run configuration: one file drives dataset builds, training, generation
//! and evaluation. Unknown keys are rejected so stale configs fail loudly,
//! and every checkpoint and report echoes the exact config that produced it.

use std::path::Path;

use crate::codec::LatentCodec;
use crate::denoiser::DenoiserConfig;
use crate::encoder::{toy_detail_spec, toy_recon_spec, EncoderRole, EncoderSpec};
use crate::error::{Error, Result};
use crate::id_extractor::{CropPolicy, ExtractionMode};
use crate::trainer::TrainConfig;

/// Inference defaults: 50 denoising steps, guidance scale 7.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.0,
        }
    }
}

/// Which image CLIP-i / DINO-i style similarities compare generations
/// against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareTarget {
    Reference,
    Target,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Feature width of the toy embedders.
    pub embed_dim: usize,
    /// Seeds of the two toy image embedders (CLIP role and DINO role).
    pub clip_seed: u64,
    pub dino_seed: u64,
    pub compare_to: CompareTarget,
    /// DiverSim-i over all pairs instead of cross-scenario pairs only.
    pub diversim_all_pairs: bool,
    /// Optional face embedder weights; FaceSim is reported only when set.
    pub face_embedder: Option<String>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            clip_seed: 101,
            dino_seed: 202,
            compare_to: CompareTarget::Reference,
            diversim_all_pairs: false,
            face_embedder: None,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Injection width shared by all four token sets.
    pub d_model: usize,
    /// Seed of the deterministic toy text embedder.
    pub text_seed: u64,
    pub detail_encoder: EncoderSpec,
    pub recon_encoder: EncoderSpec,
    /// Frozen target-feature extractor for the decoupling branch; its output
    /// width must equal `d_model`.
    pub target_encoder: EncoderSpec,
    pub crop_policy: CropPolicy,
    /// Which encoder paths feed the extractor (ablation switch).
    pub extraction_mode: ExtractionMode,
    pub denoiser: DenoiserConfig,
    pub codec: LatentCodec,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let denoiser = DenoiserConfig::default();
        let d_model = denoiser.d_model;
        Self {
            seed: 0,
            d_model,
            text_seed: 7,
            detail_encoder: toy_detail_spec(48),
            recon_encoder: toy_recon_spec(40),
            target_encoder: EncoderSpec {
                role: EncoderRole::Reconstruction,
                input_size: 32,
                patch_size: 8,
                d_enc: d_model,
                weights_ref: "toy:37".to_string(),
            },
            crop_policy: CropPolicy::default(),
            extraction_mode: ExtractionMode::default(),
            denoiser,
            codec: LatentCodec::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.detail_encoder.validate()?;
        self.recon_encoder.validate()?;
        self.target_encoder.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        if self.denoiser.d_model != self.d_model {
            return Err(Error::config("denoiser.d_model must equal d_model"));
        }
        if self.target_encoder.d_enc != self.d_model {
            return Err(Error::config("target_encoder.d_enc must equal d_model"));
        }
        if self.denoiser.latent_channels != self.codec.latent_channels() {
            return Err(Error::config(format!(
                "denoiser.latent_channels {} does not match codec channels {}",
                self.denoiser.latent_channels,
                self.codec.latent_channels()
            )));
        }
        if self.sampling.steps == 0 {
            return Err(Error::config("sampling.steps must be >= 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters_are_pinned() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.lr, 1e-5);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.cond_dropout, 0.1);
        assert_eq!(cfg.sampling.steps, 50);
        assert_eq!(cfg.sampling.guidance, 7.0);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::default().to_toml().unwrap();
        text.push_str("\nnot_a_real_key = 3\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut cfg = RunConfig::default();
        cfg.target_encoder.d_enc = cfg.d_model + 1;
        assert!(cfg.validate().is_err());
    }
}
