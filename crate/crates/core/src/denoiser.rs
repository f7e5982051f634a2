//! Toy latent diffusion denoiser: a small UNet with text cross-attention in
//! every block and one additional local cross-attention module in each
//! upblock. The local modules carry zero-initialized output projections, so a
//! freshly built model is bit-identical to its text-only form.

use candle_core::{DType, Device, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Module, VarBuilder};

use crate::error::{Error, Result};
use crate::injection::{cross_attention, AttentionWeights, GlobalCondition, LocalCondition};

/// Shape of the denoiser. Each upblock hosts exactly one local
/// cross-attention module.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    /// Number of down/up block pairs.
    pub depth: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Training horizon of the noise schedule.
    pub t_max: usize,
    /// Spatial side of the latent the denoiser operates on.
    pub resolution: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            base_width: 32,
            depth: 2,
            heads: 4,
            d_model: 64,
            t_max: 1000,
            resolution: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1"));
        }
        if !self.resolution.is_multiple_of(1 << self.depth) {
            return Err(Error::config(format!(
                "resolution {} not divisible by 2^depth = {}",
                self.resolution,
                1 << self.depth
            )));
        }
        for i in 0..=self.depth {
            let w = self.width(i);
            if !w.is_multiple_of(self.heads) {
                return Err(Error::config(format!(
                    "width {w} not divisible by heads {}",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Channel width at pyramid level `i` (0 = full resolution).
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level.min(3)
    }
}

/// Per-sample conditioning passed to the denoiser. `fused_index` is `None`
/// for the learned null condition, where there is no class-word slot.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    /// `[seq, d_model]`
    pub global_tokens: Tensor,
    pub fused_index: Option<usize>,
    /// `[n_patches, d_model]`
    pub local_tokens: Tensor,
}

impl ConditionSet {
    pub fn new(global: &GlobalCondition, local: &LocalCondition) -> Self {
        Self {
            global_tokens: global.tokens.clone(),
            fused_index: Some(global.fused_index),
            local_tokens: local.tokens.clone(),
        }
    }
}

fn sinusoidal_embedding(t: usize, dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0.0f64; dim];
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    Ok(Tensor::from_vec(data, dim, device)?.to_dtype(dtype)?)
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time_proj: candle_nn::Linear,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(vb: VarBuilder, c_in: usize, c_out: usize, d_time: usize) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let conv1 = candle_nn::conv2d(c_in, c_out, 3, cfg, vb.pp("conv1"))?;
        let conv2 = candle_nn::conv2d(c_out, c_out, 3, cfg, vb.pp("conv2"))?;
        let time_proj = candle_nn::linear(d_time, c_out, vb.pp("time_proj"))?;
        let skip = if c_in != c_out {
            Some(candle_nn::conv2d(
                c_in,
                c_out,
                1,
                Conv2dConfig::default(),
                vb.pp("skip"),
            )?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            time_proj,
            skip,
        })
    }

    /// x: [b, c_in, h, w]; t_emb: [b, d_time]
    fn forward(&self, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.silu()?)?;
        let t = self.time_proj.forward(t_emb)?;
        let t = t.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Multi-head cross-attention over a feature map, residual-added through an
/// output projection. Built on the same scaled dot-product operator as the
/// condition paths.
struct CrossAttnBlock {
    heads: Vec<AttentionWeights>,
    out_proj: Tensor,
    out_bias: Tensor,
}

impl CrossAttnBlock {
    fn new(
        vb: VarBuilder,
        channels: usize,
        d_cond: usize,
        n_heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        let d_head = channels / n_heads;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            heads.push(AttentionWeights::new(
                vb.pp(format!("head{h}")),
                channels,
                d_cond,
                d_head,
            )?);
        }
        let out_init = if zero_out {
            candle_nn::Init::Const(0.0)
        } else {
            candle_nn::init::DEFAULT_KAIMING_NORMAL
        };
        let out_proj = vb.get_with_hints((channels, channels), "out_proj", out_init)?;
        let out_bias = vb.get_with_hints(channels, "out_bias", candle_nn::Init::Const(0.0))?;
        Ok(Self {
            heads,
            out_proj,
            out_bias,
        })
    }

    /// x: [b, c, h, w]; cond: [b, n, d_cond]
    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let z = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            outs.push(cross_attention(&z, cond, head)?);
        }
        let cat = Tensor::cat(&outs, 2)?;
        let proj = cat
            .broadcast_matmul(&self.out_proj)?
            .broadcast_add(&self.out_bias)?;
        let proj = proj.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + proj)?)
    }
}

struct DownBlock {
    res: ResBlock,
    attn: CrossAttnBlock,
    down: Conv2d,
}

struct UpBlock {
    up: Conv2d,
    res: ResBlock,
    text_attn: CrossAttnBlock,
    local_attn: CrossAttnBlock,
}

/// The denoiser network with learned null tokens for condition dropout / CFG.
pub struct Denoiser {
    pub config: DenoiserConfig,
    time_mlp: (candle_nn::Linear, candle_nn::Linear),
    conv_in: Conv2d,
    downs: Vec<DownBlock>,
    mid_res: ResBlock,
    mid_attn: CrossAttnBlock,
    ups: Vec<UpBlock>,
    conv_out: Conv2d,
    /// Learned null condition tokens, zero-initialized.
    pub null_global: Tensor,
    pub null_local: Tensor,
    device: Device,
    dtype: DType,
}

impl Denoiser {
    pub fn new(vb: VarBuilder, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let d_time = config.base_width * 2;
        let time_mlp = (
            candle_nn::linear(config.base_width, d_time, vb.pp("time.fc1"))?,
            candle_nn::linear(d_time, d_time, vb.pp("time.fc2"))?,
        );
        let cfg3 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let conv_in = candle_nn::conv2d(
            config.latent_channels,
            config.width(0),
            3,
            cfg3,
            vb.pp("conv_in"),
        )?;
        let mut downs = Vec::new();
        for i in 0..config.depth {
            let vb_i = vb.pp(format!("down{i}"));
            let c_in = config.width(i);
            let c_out = config.width(i + 1);
            downs.push(DownBlock {
                res: ResBlock::new(vb_i.pp("res"), c_in, c_out, d_time)?,
                attn: CrossAttnBlock::new(
                    vb_i.pp("attn"),
                    c_out,
                    config.d_model,
                    config.heads,
                    false,
                )?,
                down: candle_nn::conv2d(
                    c_out,
                    c_out,
                    3,
                    Conv2dConfig {
                        padding: 1,
                        stride: 2,
                        ..Default::default()
                    },
                    vb_i.pp("down"),
                )?,
            });
        }
        let c_mid = config.width(config.depth);
        let mid_res = ResBlock::new(vb.pp("mid.res"), c_mid, c_mid, d_time)?;
        let mid_attn = CrossAttnBlock::new(
            vb.pp("mid.attn"),
            c_mid,
            config.d_model,
            config.heads,
            false,
        )?;
        let mut ups = Vec::new();
        for i in (0..config.depth).rev() {
            let vb_i = vb.pp(format!("up{i}"));
            let c_in = config.width(i + 1);
            let c_out = config.width(i);
            ups.push(UpBlock {
                up: candle_nn::conv2d(c_in, c_in, 3, cfg3, vb_i.pp("up"))?,
                // input is upsampled features concatenated with the skip
                res: ResBlock::new(vb_i.pp("res"), c_in * 2, c_out, d_time)?,
                text_attn: CrossAttnBlock::new(
                    vb_i.pp("text_attn"),
                    c_out,
                    config.d_model,
                    config.heads,
                    false,
                )?,
                local_attn: CrossAttnBlock::new(
                    vb_i.pp("local_attn"),
                    c_out,
                    config.d_model,
                    config.heads,
                    true,
                )?,
            });
        }
        let conv_out = candle_nn::conv2d(
            config.width(0),
            config.latent_channels,
            3,
            cfg3,
            vb.pp("conv_out"),
        )?;
        let null_global =
            vb.get_with_hints(config.d_model, "null.global", candle_nn::Init::Const(0.0))?;
        let null_local =
            vb.get_with_hints(config.d_model, "null.local", candle_nn::Init::Const(0.0))?;
        Ok(Self {
            config,
            time_mlp,
            conv_in,
            downs,
            mid_res,
            mid_attn,
            ups,
            conv_out,
            null_global,
            null_local,
            device: vb.device().clone(),
            dtype: vb.dtype(),
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// The learned null condition, used for dropout and the CFG
    /// unconditional pass.
    pub fn null_condition(&self) -> Result<ConditionSet> {
        Ok(ConditionSet {
            global_tokens: self.null_global.unsqueeze(0)?,
            fused_index: None,
            local_tokens: self.null_local.unsqueeze(0)?,
        })
    }

    fn time_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        let rows: Vec<Tensor> = ts
            .iter()
            .map(|t| sinusoidal_embedding(*t, self.config.base_width, &self.device, self.dtype))
            .collect::<Result<_>>()?;
        let emb = Tensor::stack(&rows, 0)?;
        let h = self.time_mlp.0.forward(&emb)?.silu()?;
        Ok(self.time_mlp.1.forward(&h)?)
    }

    /// Stack per-sample conditions into batched tensors, padding shorter
    /// global sequences with the learned null token.
    fn batch_conditions(
        &self,
        conds: &[ConditionSet],
        f_msk: Option<&[Option<Tensor>]>,
    ) -> Result<(Tensor, Tensor)> {
        let max_seq = conds
            .iter()
            .map(|c| c.global_tokens.dims()[0])
            .max()
            .unwrap_or(1);
        let max_local = conds
            .iter()
            .map(|c| c.local_tokens.dims()[0])
            .max()
            .unwrap_or(1);
        let mut globals = Vec::with_capacity(conds.len());
        let mut locals = Vec::with_capacity(conds.len());
        for (i, c) in conds.iter().enumerate() {
            let mut g = c.global_tokens.clone();
            if let (Some(masks), Some(idx)) = (f_msk, c.fused_index) {
                if let Some(m) = &masks[i] {
                    // element-wise addition onto the fused class token
                    let row = (g.narrow(0, idx, 1)? + m.unsqueeze(0)?)?;
                    let mut parts = Vec::new();
                    if idx > 0 {
                        parts.push(g.narrow(0, 0, idx)?);
                    }
                    parts.push(row);
                    let rest = g.dims()[0] - idx - 1;
                    if rest > 0 {
                        parts.push(g.narrow(0, idx + 1, rest)?);
                    }
                    g = Tensor::cat(&parts, 0)?;
                }
            }
            let seq = g.dims()[0];
            if seq < max_seq {
                let pad = self.null_global.unsqueeze(0)?.repeat((max_seq - seq, 1))?;
                g = Tensor::cat(&[g, pad], 0)?;
            }
            globals.push(g);
            let mut l = c.local_tokens.clone();
            let l_seq = l.dims()[0];
            if l_seq < max_local {
                // extra copies of the null token leave softmax attention
                // over an all-null sequence unchanged
                let pad = self
                    .null_local
                    .unsqueeze(0)?
                    .repeat((max_local - l_seq, 1))?;
                l = Tensor::cat(&[l, pad], 0)?;
            }
            locals.push(l);
        }
        Ok((Tensor::stack(&globals, 0)?, Tensor::stack(&locals, 0)?))
    }

    /// Batched noise prediction. `x_t` is `[b, c, r, r]`, one timestep and one
    /// condition set per sample. `f_msk[i]`, when present, is added onto the
    /// fused class token of sample `i` before conditioning. `use_local`
    /// disables the upblock local-attention modules for the text-only path.
    pub fn predict_noise_batch(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        conds: &[ConditionSet],
        f_msk: Option<&[Option<Tensor>]>,
        use_local: bool,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if b != ts.len() || b != conds.len() {
            return Err(Error::shape(
                "batch size mismatch between latents, timesteps and conditions",
            ));
        }
        if c != self.config.latent_channels
            || h != self.config.resolution
            || w != self.config.resolution
        {
            return Err(Error::shape(format!(
                "latent [{b}, {c}, {h}, {w}] does not match config [{}, {}]",
                self.config.latent_channels, self.config.resolution
            )));
        }
        let t_emb = self.time_embedding(ts)?;
        let (c_g, c_l) = self.batch_conditions(conds, f_msk)?;

        let mut x = self.conv_in.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        for down in &self.downs {
            x = down.res.forward(&x, &t_emb)?;
            x = down.attn.forward(&x, &c_g)?;
            skips.push(x.clone());
            x = down.down.forward(&x)?;
        }
        x = self.mid_res.forward(&x, &t_emb)?;
        x = self.mid_attn.forward(&x, &c_g)?;
        for up in &self.ups {
            x = x.upsample_nearest2d(x.dims()[2] * 2, x.dims()[3] * 2)?;
            x = up.up.forward(&x)?;
            let skip = skips.pop().expect("skip per upblock");
            x = Tensor::cat(&[x, skip], 1)?;
            x = up.res.forward(&x, &t_emb)?;
            x = up.text_attn.forward(&x, &c_g)?;
            if use_local {
                x = up.local_attn.forward(&x, &c_l)?;
            }
        }
        Ok(self.conv_out.forward(&x.silu()?)?)
    }

    /// Single-sample convenience wrapper; `x_t` is `[c, r, r]`.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: &ConditionSet,
        f_msk: Option<&Tensor>,
    ) -> Result<Tensor> {
        let x = x_t.unsqueeze(0)?;
        let masks = [f_msk.cloned()];
        let out =
            self.predict_noise_batch(&x, &[t], std::slice::from_ref(cond), Some(&masks), true)?;
        Ok(out.squeeze(0)?)
    }
}

/// Classifier-free guidance: `eps_u + s * (eps_c - eps_u)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_uncond.dims() != eps_cond.dims() {
        return Err(Error::shape("cfg_combine inputs must share a shape"));
    }
    if scale == 1.0 {
        // bit-exact identity at s = 1
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}
