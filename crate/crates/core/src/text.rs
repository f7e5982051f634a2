//! Deterministic toy text embedder. Each vocabulary word maps to a fixed
//! pseudo-random vector derived from (word, seed), so prompts embed the same
//! way in every process. A real text encoder can replace this behind the same
//! `TextEmbedding` type.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A prompt embedding with the token span of the class word.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    /// `[seq_len, d_model]`
    pub tokens: Tensor,
    /// Half-open token index range `[start, end)` of the class word.
    pub class_word_span: (usize, usize),
}

impl TextEmbedding {
    pub fn seq_len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (start, end) = self.class_word_span;
        if start >= end || end > self.seq_len() {
            return Err(Error::validation(format!(
                "class word span {start}..{end} invalid for seq_len {}",
                self.seq_len()
            )));
        }
        Ok(())
    }
}

/// Lowercase word tokenization; punctuation splits tokens.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Deterministic embedding vector for one word.
pub fn word_embedding(
    word: &str,
    d_model: usize,
    seed: u64,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let mut hasher = DefaultHasher::new();
    word.hash(&mut hasher);
    seed.hash(&mut hasher);
    let mut rng = ChaCha8Rng::seed_from_u64(hasher.finish());
    let scale = (1.0 / d_model as f64).sqrt();
    let data: Vec<f64> = (0..d_model).map(|_| rng.gen_range(-scale..scale)).collect();
    Ok(Tensor::from_vec(data, d_model, device)?.to_dtype(dtype)?)
}

/// Embed a prompt and locate the class word inside it.
///
/// The span covers every token of a multi-word class word; errors if the
/// class word does not occur in the prompt.
pub fn embed_prompt(
    prompt: &str,
    class_word: &str,
    d_model: usize,
    seed: u64,
    device: &Device,
    dtype: DType,
) -> Result<TextEmbedding> {
    let tokens = tokenize(prompt);
    if tokens.is_empty() {
        return Err(Error::validation("prompt has no tokens"));
    }
    let class_tokens = tokenize(class_word);
    if class_tokens.is_empty() {
        return Err(Error::validation("class word is empty"));
    }
    let span = tokens
        .windows(class_tokens.len())
        .position(|w| w == class_tokens.as_slice())
        .map(|start| (start, start + class_tokens.len()))
        .ok_or_else(|| {
            Error::validation(format!(
                "class word `{class_word}` does not occur in prompt `{prompt}`"
            ))
        })?;
    let rows: Vec<Tensor> = tokens
        .iter()
        .map(|t| word_embedding(t, d_model, seed, device, dtype))
        .collect::<Result<_>>()?;
    let tokens = Tensor::stack(&rows, 0)?;
    let emb = TextEmbedding {
        tokens,
        class_word_span: span,
    };
    emb.validate()?;
    Ok(emb)
}
