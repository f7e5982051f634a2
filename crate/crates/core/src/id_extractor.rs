//! General ID extraction: mask the reference object out of the image, run the
//! frozen encoder ensemble, and project class/patch tokens into the injection
//! width with trainable two-layer MLPs.

use candle_core::{DType, Tensor};
use candle_nn::VarBuilder;

use crate::encoder::{EncoderOutput, FrozenEncoder};
use crate::error::{Error, Result};
use crate::image_data::{ImageTensor, SegMask};
use crate::mlp::{Activation, TwoLayerMlp};

/// The four projected token sets of a reference object.
#[derive(Debug, Clone)]
pub struct IdTokens {
    /// Detail-path class token, `[d_model]`.
    pub detail_class: Tensor,
    /// Detail-path patch tokens, `[n_detail, d_model]`.
    pub detail_patches: Tensor,
    /// Reconstruction-path class token, `[d_model]`.
    pub recon_class: Tensor,
    /// Reconstruction-path patch tokens, `[n_recon, d_model]`.
    pub recon_patches: Tensor,
    /// Patch grid sides of the two paths; they may differ.
    pub detail_grid: usize,
    pub recon_grid: usize,
}

/// Pre-encoding crop: tight crop to the mask bounding box plus a relative
/// margin. Keeps the object dominant in the encoder input; can be disabled.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropPolicy {
    pub enabled: bool,
    pub margin: f32,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            margin: 0.1,
        }
    }
}

/// Ablation switch: which encoder paths carry information. An excluded path
/// keeps its token shapes but is zeroed, so downstream wiring is unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    #[default]
    Ensemble,
    DetailOnly,
    ReconOnly,
}

/// Zero out everything outside the segmentation mask.
pub fn mask_reference(image: &ImageTensor, mask: &SegMask) -> Result<ImageTensor> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::shape(format!(
            "image {}x{} vs mask {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) == 0 {
                for c in 0..ImageTensor::CHANNELS {
                    out.set(c, y, x, 0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Crop image and mask to the mask bounding box expanded by `policy.margin`.
/// No-op when the policy is disabled or the mask is empty.
pub fn crop_to_object(
    image: &ImageTensor,
    mask: &SegMask,
    policy: CropPolicy,
) -> Result<(ImageTensor, SegMask)> {
    if !policy.enabled {
        return Ok((image.clone(), mask.clone()));
    }
    let Some((top, left, h, w)) = mask.bbox() else {
        return Ok((image.clone(), mask.clone()));
    };
    let my = ((h as f32 * policy.margin).round() as usize).max(1);
    let mx = ((w as f32 * policy.margin).round() as usize).max(1);
    let top = top.saturating_sub(my);
    let left = left.saturating_sub(mx);
    let h = (h + 2 * my).min(image.height() - top);
    let w = (w + 2 * mx).min(image.width() - left);
    Ok((image.crop(top, left, h, w)?, mask.crop(top, left, h, w)?))
}

/// Project raw encoder tokens into the injection width. The class token and
/// every patch row go through the same projector.
pub fn project_tokens(raw: &EncoderOutput, projector: &TwoLayerMlp) -> Result<(Tensor, Tensor)> {
    let class = projector.forward(&raw.class_token)?;
    let patches = projector.forward(&raw.patch_tokens)?;
    Ok((class, patches))
}

/// The full extractor: two frozen encoders and their trainable projectors.
/// Each encoder gets its own projector since the raw widths may differ.
pub struct IdExtractor {
    pub detail_encoder: FrozenEncoder,
    pub recon_encoder: FrozenEncoder,
    pub detail_projector: TwoLayerMlp,
    pub recon_projector: TwoLayerMlp,
    pub crop_policy: CropPolicy,
    pub mode: ExtractionMode,
    pub dtype: DType,
}

impl IdExtractor {
    pub fn new(
        vb: VarBuilder,
        detail_encoder: FrozenEncoder,
        recon_encoder: FrozenEncoder,
        d_model: usize,
        crop_policy: CropPolicy,
        dtype: DType,
    ) -> Result<Self> {
        // hidden width = d_model, GELU between layers
        let detail_projector = TwoLayerMlp::new(
            vb.pp("detail_projector"),
            detail_encoder.spec().d_enc,
            d_model,
            d_model,
            Activation::Gelu,
        )?;
        let recon_projector = TwoLayerMlp::new(
            vb.pp("recon_projector"),
            recon_encoder.spec().d_enc,
            d_model,
            d_model,
            Activation::Gelu,
        )?;
        Ok(Self {
            detail_encoder,
            recon_encoder,
            detail_projector,
            recon_projector,
            crop_policy,
            mode: ExtractionMode::Ensemble,
            dtype,
        })
    }

    /// Cached frozen stage: mask, crop, encode with both encoders. The result
    /// carries no gradients and only depends on frozen weights, so callers may
    /// cache it per sample across training steps.
    pub fn encode_reference(
        &self,
        image: &ImageTensor,
        mask: &SegMask,
    ) -> Result<(EncoderOutput, EncoderOutput)> {
        let masked = mask_reference(image, mask)?;
        let (cropped, _) = crop_to_object(&masked, mask, self.crop_policy)?;
        let detail = self.detail_encoder.encode(&cropped, self.dtype)?;
        let recon = self.recon_encoder.encode(&cropped, self.dtype)?;
        Ok((detail, recon))
    }

    /// Trainable stage: project cached encoder outputs; excluded paths are
    /// zeroed per the extraction mode.
    pub fn project(&self, detail: &EncoderOutput, recon: &EncoderOutput) -> Result<IdTokens> {
        let (mut detail_class, mut detail_patches) =
            project_tokens(detail, &self.detail_projector)?;
        let (mut recon_class, mut recon_patches) = project_tokens(recon, &self.recon_projector)?;
        match self.mode {
            ExtractionMode::Ensemble => {}
            ExtractionMode::DetailOnly => {
                recon_class = recon_class.zeros_like()?;
                recon_patches = recon_patches.zeros_like()?;
            }
            ExtractionMode::ReconOnly => {
                detail_class = detail_class.zeros_like()?;
                detail_patches = detail_patches.zeros_like()?;
            }
        }
        Ok(IdTokens {
            detail_class,
            detail_patches,
            recon_class,
            recon_patches,
            detail_grid: detail.grid,
            recon_grid: recon.grid,
        })
    }

    /// mask -> encode (both encoders) -> project; the composition of the
    /// pipeline stages.
    pub fn extract_id(&self, image: &ImageTensor, mask: &SegMask) -> Result<IdTokens> {
        let (detail, recon) = self.encode_reference(image, mask)?;
        self.project(&detail, &recon)
    }
}
