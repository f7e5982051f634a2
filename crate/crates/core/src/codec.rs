//! Latent codec standing in for a VAE. `Identity` maps pixels affinely into
//! `[-scale, scale]`; `TinyAutoencoder` additionally folds 2x2 pixel blocks
//! into channels (space-to-depth), halving the spatial side. Both round-trip
//! exactly.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::image_data::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    Identity,
    TinyAutoencoder,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatentCodec {
    pub mode: CodecMode,
    pub scale: f64,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self {
            mode: CodecMode::Identity,
            scale: 1.0,
        }
    }
}

impl LatentCodec {
    /// Latent channel count for an RGB input.
    pub fn latent_channels(&self) -> usize {
        match self.mode {
            CodecMode::Identity => 3,
            CodecMode::TinyAutoencoder => 12,
        }
    }

    /// Latent spatial side for a given image side.
    pub fn latent_side(&self, image_side: usize) -> usize {
        match self.mode {
            CodecMode::Identity => image_side,
            CodecMode::TinyAutoencoder => image_side / 2,
        }
    }

    /// Image side required to produce a latent of the given side.
    pub fn image_side(&self, latent_side: usize) -> usize {
        match self.mode {
            CodecMode::Identity => latent_side,
            CodecMode::TinyAutoencoder => latent_side * 2,
        }
    }

    pub fn encode(&self, image: &ImageTensor, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = image.to_tensor(device, dtype)?;
        let centered = (((t * 2.0)? - 1.0)? * self.scale)?;
        match self.mode {
            CodecMode::Identity => Ok(centered),
            CodecMode::TinyAutoencoder => {
                let (c, h, w) = centered.dims3()?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("tiny autoencoder needs even image dims"));
                }
                // space-to-depth 2x2
                let x = centered.reshape((c, h / 2, 2, w / 2, 2))?;
                let x = x.permute((0, 2, 4, 1, 3))?;
                Ok(x.reshape((c * 4, h / 2, w / 2))?.contiguous()?)
            }
        }
    }

    pub fn decode(&self, latent: &Tensor) -> Result<ImageTensor> {
        let pixels = match self.mode {
            CodecMode::Identity => latent.clone(),
            CodecMode::TinyAutoencoder => {
                let (c4, h, w) = latent.dims3()?;
                let c = c4 / 4;
                let x = latent.reshape((c, 2, 2, h, w))?;
                let x = x.permute((0, 3, 1, 4, 2))?;
                x.reshape((c, h * 2, w * 2))?.contiguous()?
            }
        };
        let img = (((pixels / self.scale)? + 1.0)? / 2.0)?;
        let img = img.clamp(0.0, 1.0)?;
        ImageTensor::from_tensor(&img)
    }
}
