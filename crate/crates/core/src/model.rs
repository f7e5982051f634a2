//! The assembled customization model: frozen encoder ensemble, trainable
//! projectors and injection MLPs, the denoiser, the feature mask and the
//! frozen target-feature extractor, all built from one `RunConfig`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};

use crate::codec::LatentCodec;
use crate::config::RunConfig;
use crate::denoiser::{ConditionSet, Denoiser};
use crate::encoder::{EncoderOutput, FrozenEncoder};
use crate::error::{Error, Result};
use crate::id_extractor::IdExtractor;
use crate::image_data::{ImageTensor, SegMask};
use crate::injection::InjectionModule;
use crate::sampler;
use crate::schedule::NoiseSchedule;
use crate::text::{embed_prompt, TextEmbedding};
use crate::trainer::FeatureMask;

/// One cached training sample: frozen-encoder outputs, prompt embedding,
/// target latent and target feature. Everything here is constant across
/// steps, so batch assembly can fan out and cache freely.
pub struct TrainItem {
    pub detail: EncoderOutput,
    pub recon: EncoderOutput,
    pub text: TextEmbedding,
    /// `[latent_channels, r, r]`
    pub latent: Tensor,
    /// `[d_model]`
    pub f_tar: Tensor,
}

pub struct CustomizerModel {
    pub config: RunConfig,
    pub varmap: VarMap,
    pub extractor: IdExtractor,
    pub injection: InjectionModule,
    pub denoiser: Denoiser,
    pub feature_mask: FeatureMask,
    pub target_encoder: FrozenEncoder,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
    pub device: Device,
    pub dtype: DType,
}

impl CustomizerModel {
    pub fn new(config: RunConfig, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let detail = FrozenEncoder::from_spec(&config.detail_encoder, device)?;
        let recon = FrozenEncoder::from_spec(&config.recon_encoder, device)?;
        let mut extractor = IdExtractor::new(
            vb.pp("extractor"),
            detail,
            recon,
            config.d_model,
            config.crop_policy,
            dtype,
        )?;
        extractor.mode = config.extraction_mode;
        let injection = InjectionModule::new(vb.pp("injection"), config.d_model)?;
        let denoiser = Denoiser::new(vb.pp("denoiser"), config.denoiser.clone())?;
        let feature_mask = FeatureMask::new(vb.pp("feature_mask"), config.d_model)?;
        let target_encoder = FrozenEncoder::from_spec(&config.target_encoder, device)?;
        let schedule = NoiseSchedule::default_schedule(config.denoiser.t_max)?;
        Ok(Self {
            codec: config.codec,
            schedule,
            config,
            varmap,
            extractor,
            injection,
            denoiser,
            feature_mask,
            target_encoder,
            device: device.clone(),
            dtype,
        })
    }

    pub fn embed_text(&self, prompt: &str, class_word: &str) -> Result<TextEmbedding> {
        embed_prompt(
            prompt,
            class_word,
            self.config.d_model,
            self.config.text_seed,
            &self.device,
            self.dtype,
        )
    }

    /// Frozen target feature `f_tar` (class token of the target encoder).
    pub fn target_feature(&self, target: &ImageTensor) -> Result<Tensor> {
        Ok(self.target_encoder.encode(target, self.dtype)?.class_token)
    }

    /// Encode one dataset sample into a cached `TrainItem`.
    pub fn prepare_item(
        &self,
        ref_image: &ImageTensor,
        ref_mask: &SegMask,
        target: &ImageTensor,
        caption: &str,
        class_word: &str,
    ) -> Result<TrainItem> {
        let (detail, recon) = self.extractor.encode_reference(ref_image, ref_mask)?;
        let text = self.embed_text(caption, class_word)?;
        let side = self.codec.image_side(self.config.denoiser.resolution);
        let target_resized = if target.height() == side && target.width() == side {
            target.clone()
        } else {
            target.resize(side, side)?
        };
        let latent = self
            .codec
            .encode(&target_resized, &self.device, self.dtype)?;
        let f_tar = self.target_feature(&target_resized)?;
        Ok(TrainItem {
            detail,
            recon,
            text,
            latent,
            f_tar,
        })
    }

    /// Build the condition set and fused class token for one reference.
    pub fn build_conditions(
        &self,
        ref_image: &ImageTensor,
        ref_mask: &SegMask,
        prompt: &str,
        class_word: &str,
    ) -> Result<(ConditionSet, Tensor)> {
        let tokens = self.extractor.extract_id(ref_image, ref_mask)?;
        let text = self.embed_text(prompt, class_word)?;
        let (global, local, f_fuse) = self.injection.build_conditions(&text, &tokens)?;
        Ok((ConditionSet::new(&global, &local), f_fuse))
    }

    /// Full generation path: extract ID, build conditions, sample, decode.
    /// The masked non-ID feature is never injected at inference.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        ref_image: &ImageTensor,
        ref_mask: &SegMask,
        prompt: &str,
        class_word: &str,
        steps: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<ImageTensor> {
        let (cond, _) = self.build_conditions(ref_image, ref_mask, prompt, class_word)?;
        sampler::sample(
            &self.denoiser,
            &self.schedule,
            &self.codec,
            &cond,
            steps,
            guidance,
            seed,
        )
    }

    /// Mean `|cos(f_fuse, f_msk)|` over a probe set; the decoupling monitor.
    pub fn probe_abs_cosine(&self, items: &[TrainItem]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::validation("empty probe set"));
        }
        let mut total = 0.0;
        for item in items {
            let tokens = self.extractor.project(&item.detail, &item.recon)?;
            let (_, _, f_fuse) = self.injection.build_conditions(&item.text, &tokens)?;
            let f_msk = crate::trainer::compute_masked_feature(&item.f_tar, &self.feature_mask)?;
            let cos = crate::trainer::contrastive_loss(&f_fuse, &f_msk, 1.0)?;
            total += cos.to_dtype(DType::F64)?.to_scalar::<f64>()?.abs();
        }
        Ok(total / items.len() as f64)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let tensors = data
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        crate::checkpoint::save_checkpoint(&tensors, &self.config, &self.schedule, path)
    }

    /// Rebuild a model from a checkpoint: the echoed config defines the
    /// architecture, then the stored parameter blocks are loaded.
    pub fn load_checkpoint(path: &Path, device: &Device, dtype: DType) -> Result<Self> {
        let (config, schedule) = crate::checkpoint::read_checkpoint_meta(path)?;
        let mut model = Self::new(config, device, dtype)?;
        model.schedule = schedule;
        model.varmap.load(path)?;
        Ok(model)
    }
}
