//! Deterministic CFG sampler: DDIM stride over the DDPM schedule, a
//! classifier-free-guided noise prediction per step, then codec decoding.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::LatentCodec;
use crate::denoiser::{cfg_combine, ConditionSet, Denoiser};
use crate::error::{Error, Result};
use crate::image_data::ImageTensor;
use crate::schedule::NoiseSchedule;

/// Seeded standard-normal tensor (Box-Muller over ChaCha draws).
pub fn seeded_normal(seed: u64, shape: &[usize], denoiser: &Denoiser) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        data.push(r * th.cos());
        if data.len() < n {
            data.push(r * th.sin());
        }
    }
    let t = Tensor::from_vec(data, shape, denoiser.device())?;
    Ok(t.to_dtype(denoiser.dtype())?)
}

/// Run `steps` DDIM denoising iterations with CFG scale `guidance` and decode
/// the result. Deterministic for a fixed seed.
pub fn sample(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    cond: &ConditionSet,
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<ImageTensor> {
    if steps == 0 {
        return Err(Error::validation("steps must be >= 1"));
    }
    if schedule.t_max() != denoiser.config.t_max {
        return Err(Error::config(
            "schedule length does not match denoiser config",
        ));
    }
    let r = denoiser.config.resolution;
    let c = denoiser.config.latent_channels;
    let x = seeded_normal(seed, &[c, r, r], denoiser)?;
    let null = denoiser.null_condition()?;
    let x0 = denoise_loop(x, schedule, steps, Some(codec.scale), |x_t, t| {
        let eps_cond = denoiser.predict_noise(x_t, t, cond, None)?;
        if guidance == 1.0 {
            Ok(eps_cond)
        } else {
            let eps_uncond = denoiser.predict_noise(x_t, t, &null, None)?;
            cfg_combine(&eps_uncond, &eps_cond, guidance)
        }
    })?;
    codec.decode(&x0)
}

/// The bare DDIM loop over an arbitrary noise predictor, exposed so tests can
/// plug in analytic oracles in place of the network. When `x0_bound` is set,
/// each step statically thresholds the predicted clean sample to that range.
pub fn denoise_loop(
    x_start: Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    x0_bound: Option<f64>,
    predict: impl Fn(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let timesteps = schedule.ddim_timesteps(steps)?;
    let mut x = x_start;
    for (i, &t) in timesteps.iter().enumerate() {
        let eps = predict(&x, t)?;
        let t_prev = timesteps.get(i + 1).copied();
        x = match x0_bound {
            Some(b) => schedule.ddim_step_thresholded(&x, &eps, t, t_prev, b)?,
            None => schedule.ddim_step(&x, &eps, t, t_prev)?,
        };
    }
    Ok(x)
}
