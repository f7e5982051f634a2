//! Frozen feature encoders. Real pretrained backbones plug in through
//! `EncoderSpec::weights_ref`; the built-in toy encoders are small frozen
//! patch embedders with a fixed seed, one color-insensitive (detail role) and
//! one color-aware (reconstruction role).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_data::ImageTensor;

/// Which job the encoder does in the ensemble. The detail role discards
/// chroma before embedding, mirroring a backbone trained under color jitter;
/// the reconstruction role sees raw colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderRole {
    Detail,
    Reconstruction,
}

/// Description of a frozen encoder. `weights_ref` is either `toy:<seed>` for
/// the built-in encoder family or a path to a saved weights file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderSpec {
    pub role: EncoderRole,
    pub input_size: usize,
    pub patch_size: usize,
    pub d_enc: usize,
    pub weights_ref: String,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "input_size {} not divisible by patch_size {}",
                self.input_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Raw encoder output: one class token and a row per patch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub class_token: Tensor,
    pub patch_tokens: Tensor,
    /// Side length of the (square) patch grid.
    pub grid: usize,
}

/// Frozen patch encoder: per-patch linear embed, a pointwise tanh mixing
/// layer, and mean pooling into the class token. No positional term, so the
/// token map is equivariant to patch permutation and constant inputs give
/// identical rows.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    spec: EncoderSpec,
    patch_w: Tensor,
    mix_w: Tensor,
    cls_w: Tensor,
    cls_b: Tensor,
}

fn rand_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: f64,
    device: &Device,
) -> Result<Tensor> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Ok(Tensor::from_vec(data, (rows, cols), device)?)
}

impl FrozenEncoder {
    /// Deterministic toy encoder from a seed.
    pub fn toy(spec: EncoderSpec, seed: u64, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = spec.patch_size;
        let d_in = p * p * ImageTensor::CHANNELS;
        let scale = (3.0 / d_in as f64).sqrt();
        let patch_w = rand_matrix(&mut rng, d_in, spec.d_enc, scale, device)?;
        let mix_scale = (1.0 / spec.d_enc as f64).sqrt();
        let mix_w = rand_matrix(&mut rng, spec.d_enc, spec.d_enc, mix_scale, device)?;
        let cls_w = rand_matrix(&mut rng, spec.d_enc, spec.d_enc, mix_scale, device)?;
        let cls_b = rand_matrix(&mut rng, 1, spec.d_enc, 0.1, device)?.squeeze(0)?;
        Ok(Self {
            spec,
            patch_w,
            mix_w,
            cls_w,
            cls_b,
        })
    }

    /// Resolve `weights_ref`: `toy:<seed>` or a weights file path.
    pub fn from_spec(spec: &EncoderSpec, device: &Device) -> Result<Self> {
        spec.validate()?;
        if let Some(seed) = spec.weights_ref.strip_prefix("toy:") {
            let seed: u64 = seed.parse().map_err(|_| {
                Error::config(format!("bad toy encoder seed `{}`", spec.weights_ref))
            })?;
            Self::toy(spec.clone(), seed, device)
        } else {
            Self::load(spec.clone(), Path::new(&spec.weights_ref), device)
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = HashMap::from([
            ("patch_w".to_string(), self.patch_w.clone()),
            ("mix_w".to_string(), self.mix_w.clone()),
            ("cls_w".to_string(), self.cls_w.clone()),
            ("cls_b".to_string(), self.cls_b.clone()),
        ]);
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(spec: EncoderSpec, path: &Path, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config(format!(
                "encoder weights not found: {}",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        let get = |name: &str| {
            tensors.get(name).cloned().ok_or_else(|| {
                Error::config(format!("missing tensor `{name}` in {}", path.display()))
            })
        };
        Ok(Self {
            spec,
            patch_w: get("patch_w")?,
            mix_w: get("mix_w")?,
            cls_w: get("cls_w")?,
            cls_b: get("cls_b")?,
        })
    }

    /// A stable fingerprint of the frozen weights, for freeze audits.
    pub fn weight_checksum(&self) -> Result<f64> {
        let mut total = 0.0;
        for t in [&self.patch_w, &self.mix_w, &self.cls_w, &self.cls_b] {
            total += t
                .to_dtype(DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
        Ok(total)
    }

    /// Run the frozen forward pass. Resizes to `spec.input_size`, embeds each
    /// patch, applies the pointwise mixing layer and mean-pools the class
    /// token. Output is detached from any autodiff graph.
    pub fn encode(&self, image: &ImageTensor, dtype: DType) -> Result<EncoderOutput> {
        let s = self.spec.input_size;
        let img = if image.height() == s && image.width() == s {
            image.clone()
        } else {
            image.resize(s, s)?
        };
        let img = match self.spec.role {
            EncoderRole::Detail => to_grayscale(&img),
            EncoderRole::Reconstruction => img,
        };
        let p = self.spec.patch_size;
        let g = self.spec.grid();
        let n = self.spec.n_patches();
        let d_in = p * p * ImageTensor::CHANNELS;
        let mut patches = vec![0.0f64; n * d_in];
        for gy in 0..g {
            for gx in 0..g {
                let row = gy * g + gx;
                let mut k = 0;
                for c in 0..ImageTensor::CHANNELS {
                    for y in 0..p {
                        for x in 0..p {
                            patches[row * d_in + k] = img.get(c, gy * p + y, gx * p + x) as f64;
                            k += 1;
                        }
                    }
                }
            }
        }
        let device = self.patch_w.device();
        let patches = Tensor::from_vec(patches, (n, d_in), device)?;
        let tok = patches.matmul(&self.patch_w)?;
        let tok = (&tok + tok.matmul(&self.mix_w)?.tanh()?)?;
        let pooled = tok.mean(0)?;
        let class = pooled
            .unsqueeze(0)?
            .matmul(&self.cls_w)?
            .squeeze(0)?
            .add(&self.cls_b)?;
        Ok(EncoderOutput {
            class_token: class.to_dtype(dtype)?.detach(),
            patch_tokens: tok.to_dtype(dtype)?.detach(),
            grid: g,
        })
    }
}

fn to_grayscale(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let gray =
                0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x);
            for c in 0..ImageTensor::CHANNELS {
                out.set(c, y, x, gray.clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn toy_detail_spec(d_enc: usize) -> EncoderSpec {
    EncoderSpec {
        role: EncoderRole::Detail,
        input_size: 32,
        patch_size: 8,
        d_enc,
        weights_ref: "toy:11".to_string(),
    }
}

pub fn toy_recon_spec(d_enc: usize) -> EncoderSpec {
    EncoderSpec {
        role: EncoderRole::Reconstruction,
        input_size: 32,
        patch_size: 8,
        d_enc,
        weights_ref: "toy:23".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_image() -> ImageTensor {
        ImageTensor::new(
            (0..3 * 16 * 16).map(|i| (i % 97) as f32 / 96.0).collect(),
            16,
            16,
        )
        .unwrap()
    }

    #[test]
    fn encode_is_deterministic() {
        let spec = toy_recon_spec(8);
        let enc = FrozenEncoder::from_spec(&spec, &Device::Cpu).unwrap();
        let a = enc.encode(&probe_image(), DType::F64).unwrap();
        let b = enc.encode(&probe_image(), DType::F64).unwrap();
        assert_eq!(
            a.class_token.to_vec1::<f64>().unwrap(),
            b.class_token.to_vec1::<f64>().unwrap()
        );
        assert_eq!(
            a.patch_tokens.to_vec2::<f64>().unwrap(),
            b.patch_tokens.to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn constant_image_gives_equal_patch_rows() {
        let spec = EncoderSpec {
            input_size: 16,
            patch_size: 8,
            ..toy_recon_spec(6)
        };
        let enc = FrozenEncoder::from_spec(&spec, &Device::Cpu).unwrap();
        let img = ImageTensor::constant(0.4, 16, 16).unwrap();
        let out = enc.encode(&img, DType::F64).unwrap();
        let rows = out.patch_tokens.to_vec2::<f64>().unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows[1..] {
            assert_eq!(r, &rows[0]);
        }
    }

    #[test]
    fn detail_role_is_color_insensitive() {
        let spec = EncoderSpec {
            input_size: 16,
            patch_size: 8,
            ..toy_detail_spec(6)
        };
        let enc = FrozenEncoder::from_spec(&spec, &Device::Cpu).unwrap();
        // two images with the same luma but different chroma
        let mut red = ImageTensor::constant(0.0, 16, 16).unwrap();
        let mut blue = ImageTensor::constant(0.0, 16, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                red.set(0, y, x, 0.3); // luma 0.299 * 0.3
                blue.set(1, y, x, 0.299 * 0.3 / 0.587);
            }
        }
        let a = enc
            .encode(&red, DType::F64)
            .unwrap()
            .class_token
            .to_vec1::<f64>()
            .unwrap();
        let b = enc
            .encode(&blue, DType::F64)
            .unwrap()
            .class_token
            .to_vec1::<f64>()
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(
                (x - y).abs() < 1e-6,
                "detail encoder saw chroma: {x} vs {y}"
            );
        }
        // the reconstruction encoder must distinguish them
        let rspec = EncoderSpec {
            input_size: 16,
            patch_size: 8,
            ..toy_recon_spec(6)
        };
        let renc = FrozenEncoder::from_spec(&rspec, &Device::Cpu).unwrap();
        let ra = renc
            .encode(&red, DType::F64)
            .unwrap()
            .class_token
            .to_vec1::<f64>()
            .unwrap();
        let rb = renc
            .encode(&blue, DType::F64)
            .unwrap()
            .class_token
            .to_vec1::<f64>()
            .unwrap();
        let diff: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3, "reconstruction encoder ignored chroma");
    }

    #[test]
    fn bad_patch_divisibility_rejected() {
        let spec = EncoderSpec {
            input_size: 17,
            ..toy_detail_spec(4)
        };
        assert!(FrozenEncoder::from_spec(&spec, &Device::Cpu).is_err());
    }

    #[test]
    fn missing_weights_file_is_config_error() {
        let spec = EncoderSpec {
            weights_ref: "/nonexistent/weights.safetensors".into(),
            ..toy_detail_spec(4)
        };
        assert!(matches!(
            FrozenEncoder::from_spec(&spec, &Device::Cpu),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy_recon_spec(8);
        let enc = FrozenEncoder::from_spec(&spec, &Device::Cpu).unwrap();
        let p = dir.path().join("enc.safetensors");
        enc.save(&p).unwrap();
        let loaded = FrozenEncoder::load(spec, &p, &Device::Cpu).unwrap();
        let a = enc.encode(&probe_image(), DType::F64).unwrap();
        let b = loaded.encode(&probe_image(), DType::F64).unwrap();
        assert_eq!(
            a.class_token.to_vec1::<f64>().unwrap(),
            b.class_token.to_vec1::<f64>().unwrap()
        );
    }
}
