//! DDPM noise schedule and the deterministic DDIM stride used for sampling.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// β/α/ᾱ tables. `alpha_bars[t]` is the cumulative product through step `t`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 2e-2;

    /// Linear β schedule over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "invalid beta range [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                t as f64 / (t_max - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn default_schedule(t_max: usize) -> Result<Self> {
        Self::linear(t_max, Self::DEFAULT_BETA_START, Self::DEFAULT_BETA_END)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.len() != self.alphas.len() || self.betas.len() != self.alpha_bars.len() {
            return Err(Error::config("schedule tables disagree in length"));
        }
        let mut prev = f64::INFINITY;
        for (t, ((b, a), ab)) in self
            .betas
            .iter()
            .zip(&self.alphas)
            .zip(&self.alpha_bars)
            .enumerate()
        {
            if !(0.0 < *b && *b < 1.0) {
                return Err(Error::config(format!("beta[{t}] = {b} out of (0, 1)")));
            }
            if (a - (1.0 - b)).abs() > 1e-12 {
                return Err(Error::config(format!("alpha[{t}] != 1 - beta[{t}]")));
            }
            if *ab >= prev {
                return Err(Error::config("alpha_bar must be strictly decreasing"));
            }
            prev = *ab;
        }
        Ok(())
    }

    /// Closed-form forward process: `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`.
    pub fn forward_diffuse(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if t >= self.t_max() {
            return Err(Error::validation(format!(
                "t = {t} out of range 0..{}",
                self.t_max()
            )));
        }
        if x0.dims() != eps.dims() {
            return Err(Error::shape("x0 and eps must share a shape"));
        }
        let ab = self.alpha_bars[t];
        Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    /// Evenly strided DDIM timesteps, descending, always starting at
    /// `t_max - 1`; the final update targets ᾱ = 1.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(Error::validation("steps must be >= 1"));
        }
        let t_max = self.t_max();
        let steps = steps.min(t_max);
        let mut ts: Vec<usize> = (0..steps).map(|i| (i + 1) * t_max / steps - 1).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }

    /// One deterministic DDIM update from `t` to `t_prev` (`None` for the
    /// final step, which targets ᾱ = 1).
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        eps_pred: &Tensor,
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Tensor> {
        let ab_t = self.alpha_bars[t];
        let ab_prev = t_prev.map_or(1.0, |tp| self.alpha_bars[tp]);
        let x0_pred = ((x_t - (eps_pred * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
        Ok(((x0_pred * ab_prev.sqrt())? + (eps_pred * (1.0 - ab_prev).sqrt())?)?)
    }

    /// DDIM update with static thresholding: the predicted clean sample is
    /// clamped to `[-bound, bound]` (the valid latent range) and the noise
    /// estimate is re-derived from the clamped prediction before the update.
    /// Because the retained noise coefficient is strictly below 1, the
    /// recursion stays bounded for any noise predictor, trained or not.
    pub fn ddim_step_thresholded(
        &self,
        x_t: &Tensor,
        eps_pred: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        bound: f64,
    ) -> Result<Tensor> {
        if bound.is_nan() || bound <= 0.0 {
            return Err(Error::validation(format!(
                "threshold bound must be > 0, got {bound}"
            )));
        }
        let ab_t = self.alpha_bars[t];
        let ab_prev = t_prev.map_or(1.0, |tp| self.alpha_bars[tp]);
        let x0_pred = ((x_t - (eps_pred * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
        let x0_pred = x0_pred.clamp(-bound, bound)?;
        let eps = ((x_t - (&x0_pred * ab_t.sqrt())?)? / (1.0 - ab_t).sqrt())?;
        Ok(((&x0_pred * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn default_schedule_is_valid_and_tail_small() {
        let s = NoiseSchedule::default_schedule(1000).unwrap();
        s.validate().unwrap();
        assert!(
            s.alpha_bars[999] < 0.05,
            "final alpha_bar = {}",
            s.alpha_bars[999]
        );
    }

    #[test]
    fn thresholded_step_stays_bounded_under_huge_predictions() {
        let s = NoiseSchedule::default_schedule(100).unwrap();
        let dev = Device::Cpu;
        let mut x = Tensor::rand(-1.0f64, 1.0, (3, 4, 4), &dev).unwrap();
        // an adversarial predictor that always returns an enormous eps
        let eps = Tensor::full(1e9f64, (3, 4, 4), &dev).unwrap();
        let ts = s.ddim_timesteps(20).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            x = s
                .ddim_step_thresholded(&x, &eps, t, ts.get(i + 1).copied(), 1.0)
                .unwrap();
            let m = x
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(m.is_finite() && m < 1e6, "state blew up to {m} at t = {t}");
        }
        // the final state is a clean sample inside the clamp range
        let m = x
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(m <= 1.0 + 1e-9, "final sample out of range: {m}");
    }

    #[test]
    fn thresholded_step_matches_plain_step_inside_the_bound() {
        let s = NoiseSchedule::default_schedule(100).unwrap();
        let dev = Device::Cpu;
        let x0 = Tensor::rand(-0.9f64, 0.9, (3, 4, 4), &dev).unwrap();
        let eps = Tensor::rand(-1.0f64, 1.0, (3, 4, 4), &dev).unwrap();
        let xt = s.forward_diffuse(&x0, 80, &eps).unwrap();
        // with the true noise, x0_pred == x0 lies inside the bound, so
        // thresholding must be a no-op
        let plain = s.ddim_step(&xt, &eps, 80, Some(40)).unwrap();
        let thresh = s
            .ddim_step_thresholded(&xt, &eps, 80, Some(40), 1.0)
            .unwrap();
        let diff = (&plain - &thresh)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(
            diff < 1e-9,
            "thresholding changed an in-range step by {diff}"
        );
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::default_schedule(64).unwrap();
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn forward_zero_x0_is_scaled_noise() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::default_schedule(10).unwrap();
        let x0 = Tensor::zeros(8, DType::F64, &dev).unwrap();
        let eps = Tensor::new(&[1.0f64, -1.0, 2.0, 0.5, 0.0, 3.0, -2.0, 1.5], &dev).unwrap();
        let xt = s.forward_diffuse(&x0, 4, &eps).unwrap();
        let expect = (&eps * (1.0 - s.alpha_bars[4]).sqrt()).unwrap();
        let diff = (&xt - &expect)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn t_out_of_range_rejected() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::default_schedule(10).unwrap();
        let z = Tensor::zeros(2, DType::F64, &dev).unwrap();
        assert!(s.forward_diffuse(&z, 10, &z).is_err());
    }

    // closed form vs iterative single-step forward chain:
    // x_t = sqrt(a_t) x_{t-1} + sqrt(1 - a_t) e_t gives the same marginal mean
    // when the same eps drives the closed form; check the deterministic part
    // by propagating a fixed x0 with eps = 0 through both routes.
    #[test]
    fn closed_form_matches_iterative_chain() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x0 = Tensor::new(&[1.0f64, -0.5, 2.0], &dev).unwrap();
        let zero = Tensor::zeros(3, DType::F64, &dev).unwrap();
        let t = 3;
        let closed = s.forward_diffuse(&x0, t, &zero).unwrap();
        let mut x = x0.clone();
        for step in 0..=t {
            x = (&x * s.alphas[step].sqrt()).unwrap();
        }
        let diff = (&closed - &x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-6);
        // and the noise coefficient matches the closed form variance identity
        let coeff = (1.0 - s.alpha_bars[t]).sqrt();
        let mut var = 0.0;
        let mut scale = 1.0;
        for step in (0..=t).rev() {
            var += scale * s.betas[step];
            scale *= s.alphas[step];
        }
        assert!((coeff * coeff - var).abs() < 1e-6);
    }

    #[test]
    fn ddim_timesteps_cover_range() {
        let s = NoiseSchedule::default_schedule(1000).unwrap();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.ddim_timesteps(1).unwrap(), vec![999]);
        assert!(s.ddim_timesteps(0).is_err());
    }

    // plugging the analytic forward noise back in inverts a single DDIM step
    #[test]
    fn one_step_inversion_with_exact_noise() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::default_schedule(100).unwrap();
        let x0 = Tensor::new(&[0.25f64, -1.0, 0.75, 0.1], &dev).unwrap();
        let eps = Tensor::new(&[0.5f64, 1.5, -0.5, -1.0], &dev).unwrap();
        let t = 99;
        let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
        let rec = s.ddim_step(&xt, &eps, t, None).unwrap();
        let diff = (&rec - &x0)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-4);
    }
}
