//! Zero-shot object customization on a latent diffusion backbone: identity
//! tokens from an ensemble of frozen encoders, global/local condition
//! injection, decoupled training losses, deterministic sampling, the pair
//! dataset pipeline, and the evaluation suite.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod encoder;
pub mod error;
pub mod id_extractor;
pub mod image_data;
pub mod injection;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod text;
pub mod toy_corpus;
pub mod trainer;

pub use codec::{CodecMode, LatentCodec};
pub use config::{CompareTarget, MetricsConfig, RunConfig, SamplingConfig};
pub use dataset::{Manifest, ManifestRecord, PairImages, SourceGroup};
pub use denoiser::{ConditionSet, Denoiser, DenoiserConfig};
pub use encoder::{EncoderRole, EncoderSpec, FrozenEncoder};
pub use error::{Error, Result};
pub use id_extractor::{ExtractionMode, IdExtractor, IdTokens};
pub use image_data::{ImageTensor, SegMask};
pub use injection::{GlobalCondition, InjectionModule, LocalCondition};
pub use metrics::{MetricReport, ScenarioPromptSet};
pub use model::{CustomizerModel, TrainItem};
pub use sampler::sample;
pub use schedule::NoiseSchedule;
pub use trainer::{TrainConfig, TrainStats};
