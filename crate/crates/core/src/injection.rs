//! Dual-level ID injection: fuse class tokens into the prompt sequence at the
//! class-word position (global condition), fuse patch tokens into a dense
//! sequence (local condition), and the scaled dot-product cross-attention
//! operator both paths share.

use candle_core::Tensor;
use candle_nn::VarBuilder;

use crate::error::{Error, Result};
use crate::id_extractor::IdTokens;
use crate::mlp::{softmax_last_dim, Activation, TwoLayerMlp};
use crate::text::TextEmbedding;

/// The ID-fused text sequence. `fused_index` marks the row holding the fused
/// class token, so the trainer can add the masked non-ID feature there.
#[derive(Debug, Clone)]
pub struct GlobalCondition {
    /// `[seq_len', d_model]`
    pub tokens: Tensor,
    pub fused_index: usize,
}

/// The fused patch sequence, `[n_patches, d_model]`, on the detail grid.
#[derive(Debug, Clone)]
pub struct LocalCondition {
    pub tokens: Tensor,
}

/// Query/key/value projections of one cross-attention operator.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    /// `[d_q_in, d_attn]`
    pub w_q: Tensor,
    /// `[d_kv_in, d_attn]`
    pub w_k: Tensor,
    /// `[d_kv_in, d_attn]`
    pub w_v: Tensor,
}

impl AttentionWeights {
    pub fn new(vb: VarBuilder, d_q_in: usize, d_kv_in: usize, d_attn: usize) -> Result<Self> {
        let init = candle_nn::init::DEFAULT_KAIMING_NORMAL;
        Ok(Self {
            w_q: vb.get_with_hints((d_q_in, d_attn), "w_q", init)?,
            w_k: vb.get_with_hints((d_kv_in, d_attn), "w_k", init)?,
            w_v: vb.get_with_hints((d_kv_in, d_attn), "w_v", init)?,
        })
    }

    pub fn d_attn(&self) -> usize {
        self.w_q.dims()[1]
    }
}

/// Scaled dot-product cross-attention: `softmax(Q K^T / sqrt(d)) V` with
/// `Q = Z W_q`, `K = c W_k`, `V = c W_v`. Accepts `[m, d]` or batched
/// `[b, m, d]` inputs.
pub fn cross_attention(z: &Tensor, c: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    let probs = attention_probs(z, c, w)?;
    let v = c.broadcast_matmul(&w.w_v)?;
    Ok(probs.matmul(&v)?)
}

/// The row-stochastic attention matrix, exposed for property tests.
pub fn attention_probs(z: &Tensor, c: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    if z.rank() != c.rank() || !(z.rank() == 2 || z.rank() == 3) {
        return Err(Error::shape(format!(
            "attention expects rank 2 or 3, got {} / {}",
            z.rank(),
            c.rank()
        )));
    }
    let q = z.broadcast_matmul(&w.w_q)?;
    let k = c.broadcast_matmul(&w.w_k)?;
    let scale = 1.0 / (w.d_attn() as f64).sqrt();
    let kt = k.transpose(k.rank() - 2, k.rank() - 1)?;
    let logits = (q.matmul(&kt)? * scale)?;
    softmax_last_dim(&logits)
}

/// Fused class token from concat(text, detail, recon) class tokens.
pub fn fuse_class_token(
    fusion: &TwoLayerMlp,
    f_text_c: &Tensor,
    f_detail_c: &Tensor,
    f_recon_c: &Tensor,
) -> Result<Tensor> {
    let d = f_text_c
        .dims1()
        .map_err(|_| Error::shape("class tokens must be vectors"))?;
    if f_detail_c.dims1()? != d || f_recon_c.dims1()? != d {
        return Err(Error::shape("class token widths disagree"));
    }
    let cat = Tensor::cat(&[f_text_c, f_detail_c, f_recon_c], 0)?;
    fusion.forward(&cat)
}

/// Mean-pool the class-word span into a single text class token.
pub fn pool_class_word(text: &TextEmbedding) -> Result<Tensor> {
    text.validate()?;
    let (start, end) = text.class_word_span;
    Ok(text.tokens.narrow(0, start, end - start)?.mean(0)?)
}

/// Replace the class-word span with the fused class token; everything outside
/// the span is copied unchanged and order-preserved.
pub fn build_global_condition(text: &TextEmbedding, f_fuse_c: &Tensor) -> Result<GlobalCondition> {
    text.validate()?;
    let (start, end) = text.class_word_span;
    let seq = text.seq_len();
    let fused = f_fuse_c.unsqueeze(0)?;
    let mut parts: Vec<Tensor> = Vec::new();
    if start > 0 {
        parts.push(text.tokens.narrow(0, 0, start)?);
    }
    parts.push(fused);
    if end < seq {
        parts.push(text.tokens.narrow(0, end, seq - end)?);
    }
    Ok(GlobalCondition {
        tokens: Tensor::cat(&parts, 0)?,
        fused_index: start,
    })
}

/// Constant bilinear resampling matrix mapping a `from`x`from` grid onto a
/// `to`x`to` grid; applied as `W @ patches` so gradients pass through.
pub fn grid_resample_matrix(
    from: usize,
    to: usize,
    device: &candle_core::Device,
    dtype: candle_core::DType,
) -> Result<Tensor> {
    let mut w = vec![0.0f64; to * to * from * from];
    for ty in 0..to {
        let fy = if to == 1 {
            0.0
        } else {
            ty as f64 * (from - 1) as f64 / (to - 1) as f64
        };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(from - 1);
        let wy = fy - y0 as f64;
        for tx in 0..to {
            let fx = if to == 1 {
                0.0
            } else {
                tx as f64 * (from - 1) as f64 / (to - 1) as f64
            };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(from - 1);
            let wx = fx - x0 as f64;
            let row = ty * to + tx;
            let base = row * from * from;
            w[base + y0 * from + x0] += (1.0 - wy) * (1.0 - wx);
            w[base + y0 * from + x1] += (1.0 - wy) * wx;
            w[base + y1 * from + x0] += wy * (1.0 - wx);
            w[base + y1 * from + x1] += wy * wx;
        }
    }
    Ok(Tensor::from_vec(w, (to * to, from * from), device)?.to_dtype(dtype)?)
}

/// Local condition `c_l = MLP_a(detail_patches) + MLP_b(recon_patches)`, after
/// resampling the reconstruction grid onto the detail grid when they differ.
pub fn build_local_condition(
    mlp_a: &TwoLayerMlp,
    mlp_b: &TwoLayerMlp,
    tokens: &IdTokens,
) -> Result<LocalCondition> {
    let detail = tokens.detail_patches.clone();
    let recon = if tokens.recon_grid == tokens.detail_grid {
        tokens.recon_patches.clone()
    } else {
        let w = grid_resample_matrix(
            tokens.recon_grid,
            tokens.detail_grid,
            tokens.recon_patches.device(),
            tokens.recon_patches.dtype(),
        )?;
        w.matmul(&tokens.recon_patches)?
    };
    if detail.dims()[0] != recon.dims()[0] {
        return Err(Error::shape("irreconcilable patch grids"));
    }
    let fused = (mlp_a.forward(&detail)? + mlp_b.forward(&recon)?)?;
    Ok(LocalCondition { tokens: fused })
}

/// Trainable fusion stack for both injection paths.
pub struct InjectionModule {
    pub fusion: TwoLayerMlp,
    pub local_a: TwoLayerMlp,
    pub local_b: TwoLayerMlp,
}

impl InjectionModule {
    pub fn new(vb: VarBuilder, d_model: usize) -> Result<Self> {
        Ok(Self {
            fusion: TwoLayerMlp::new(
                vb.pp("fusion"),
                3 * d_model,
                d_model,
                d_model,
                Activation::Gelu,
            )?,
            local_a: TwoLayerMlp::new(
                vb.pp("local_a"),
                d_model,
                d_model,
                d_model,
                Activation::Gelu,
            )?,
            local_b: TwoLayerMlp::new(
                vb.pp("local_b"),
                d_model,
                d_model,
                d_model,
                Activation::Gelu,
            )?,
        })
    }

    /// Build both conditions from a prompt embedding and extracted ID tokens.
    /// Returns the fused class token as well, for the contrastive loss.
    pub fn build_conditions(
        &self,
        text: &TextEmbedding,
        tokens: &IdTokens,
    ) -> Result<(GlobalCondition, LocalCondition, Tensor)> {
        let f_text_c = pool_class_word(text)?;
        let fused = fuse_class_token(
            &self.fusion,
            &f_text_c,
            &tokens.detail_class,
            &tokens.recon_class,
        )?;
        let global = build_global_condition(text, &fused)?;
        let local = build_local_condition(&self.local_a, &self.local_b, tokens)?;
        Ok((global, local, fused))
    }
}
