//! ID-aware decoupled training: the trainable feature mask, the two
//! denoising branches, the contrastive loss, condition dropout and the
//! optimization loop.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{Optimizer, VarBuilder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::ConditionSet;
use crate::error::{Error, Result};
use crate::model::{CustomizerModel, TrainItem};

/// Trainable per-dimension mask. The effective mask is `sigmoid(logits)`, so
/// it stays in (0, 1); logits start at zero (mask 0.5).
pub struct FeatureMask {
    pub logits: Tensor,
}

impl FeatureMask {
    pub fn new(vb: VarBuilder, d_feat: usize) -> Result<Self> {
        Ok(Self {
            logits: vb.get_with_hints(d_feat, "logits", candle_nn::Init::Const(0.0))?,
        })
    }

    pub fn from_logits(logits: Tensor) -> Self {
        Self { logits }
    }

    pub fn d_feat(&self) -> usize {
        self.logits.dims()[0]
    }

    /// `m_id = sigmoid(logits)`.
    pub fn mask(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits)?)
    }
}

/// `f_msk = f_tar ⊙ sigmoid(logits)`.
pub fn compute_masked_feature(f_tar: &Tensor, mask: &FeatureMask) -> Result<Tensor> {
    let d = f_tar
        .dims1()
        .map_err(|_| Error::shape("f_tar must be a vector"))?;
    if d != mask.d_feat() {
        return Err(Error::shape(format!(
            "f_tar width {d} != mask width {}",
            mask.d_feat()
        )));
    }
    Ok((f_tar * mask.mask()?)?)
}

/// Signed cosine similarity, `σ · cos(f_fuse, f_msk)`. With the default
/// σ = +1 minimization drives the two representations apart. Degenerate
/// near-zero vectors contribute 0 and emit a warning.
pub fn contrastive_loss(f_fuse: &Tensor, f_msk: &Tensor, sigma: f64) -> Result<Tensor> {
    if f_fuse.dims() != f_msk.dims() {
        return Err(Error::shape("contrastive loss inputs must share a shape"));
    }
    let norm_a = f_fuse.sqr()?.sum_all()?.sqrt()?;
    let norm_b = f_msk.sqr()?.sum_all()?.sqrt()?;
    let na = norm_a.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let nb = norm_b.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if na < 1e-12 || nb < 1e-12 {
        eprintln!("warning: degenerate direction in contrastive loss (norms {na:.3e}, {nb:.3e}); contributing 0");
        return Ok(Tensor::zeros((), f_fuse.dtype(), f_fuse.device())?);
    }
    let dot = (f_fuse * f_msk)?.sum_all()?;
    let cos = dot.div(&(norm_a * norm_b)?)?;
    Ok((cos * sigma)?)
}

/// Loss weights and optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub cond_dropout: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps regardless of epochs; `None`
    /// trains for the full epoch budget.
    pub max_steps: Option<usize>,
    /// Sign σ of the contrastive term; +1 pushes the representations apart.
    pub contrast_sign: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 32,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 0.01,
            cond_dropout: 0.1,
            epochs: 6,
            max_steps: None,
            contrast_sign: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || self.alpha3 < 0.0 {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::config("cond_dropout must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-step loss summary. `l_total` recomposes from the three parts by
/// construction.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub l_normal: f64,
    pub l_decouple: f64,
    pub l_contrast: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_normal: f64, l_decouple: f64, l_contrast: f64, cfg: &TrainConfig) -> Self {
        let l_total = cfg.alpha1 * l_normal + cfg.alpha2 * l_decouple + cfg.alpha3 * l_contrast;
        Self {
            l_normal,
            l_decouple,
            l_contrast,
            l_total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_normal.is_finite() && self.l_decouple.is_finite() && self.l_contrast.is_finite()
    }
}

/// Replace each condition path by its learned null tokens when its uniform
/// draw falls below the dropout ratio. Draws are caller-supplied so the
/// branch logic stays deterministic under test.
pub fn apply_condition_dropout(
    cond: &ConditionSet,
    null: &ConditionSet,
    u_g: f64,
    u_l: f64,
    p: f64,
) -> ConditionSet {
    let (global_tokens, fused_index) = if u_g < p {
        (null.global_tokens.clone(), None)
    } else {
        (cond.global_tokens.clone(), cond.fused_index)
    };
    let local_tokens = if u_l < p {
        null.local_tokens.clone()
    } else {
        cond.local_tokens.clone()
    };
    ConditionSet {
        global_tokens,
        fused_index,
        local_tokens,
    }
}

/// Differentiable per-batch losses for both branches.
pub struct BranchLosses {
    pub l_normal: Tensor,
    pub l_decouple: Tensor,
    pub l_contrast: Tensor,
    pub l_total: Tensor,
    pub report: LossReport,
}

/// Compute the two denoising losses and the contrastive loss on one batch.
/// Timesteps, noises and dropout draws come from the caller for determinism.
pub fn branch_losses(
    model: &CustomizerModel,
    items: &[&TrainItem],
    ts: &[usize],
    eps: &[Tensor],
    dropout_draws: &[(f64, f64)],
    cfg: &TrainConfig,
) -> Result<BranchLosses> {
    let b = items.len();
    if b == 0 || ts.len() != b || eps.len() != b || dropout_draws.len() != b {
        return Err(Error::shape("batch inputs must agree in length"));
    }
    let null = model.denoiser.null_condition()?;
    let mut latents = Vec::with_capacity(b);
    let mut noises = Vec::with_capacity(b);
    let mut conds = Vec::with_capacity(b);
    let mut masks: Vec<Option<Tensor>> = Vec::with_capacity(b);
    let mut contrast_terms = Vec::with_capacity(b);
    for (i, item) in items.iter().enumerate() {
        let tokens = model.extractor.project(&item.detail, &item.recon)?;
        let (global, local, f_fuse) = model.injection.build_conditions(&item.text, &tokens)?;
        let f_msk = compute_masked_feature(&item.f_tar, &model.feature_mask)?;
        contrast_terms.push(contrastive_loss(&f_fuse, &f_msk, cfg.contrast_sign)?);
        let cond = ConditionSet::new(&global, &local);
        let (u_g, u_l) = dropout_draws[i];
        let cond = apply_condition_dropout(&cond, &null, u_g, u_l, cfg.cond_dropout);
        latents.push(
            model
                .schedule
                .forward_diffuse(&item.latent, ts[i], &eps[i])?,
        );
        noises.push(eps[i].clone());
        conds.push(cond);
        masks.push(Some(f_msk));
    }
    let x_t = Tensor::stack(&latents, 0)?;
    let eps_true = Tensor::stack(&noises, 0)?;
    // branch carrying f_msk on the fused token
    let pred_normal = model
        .denoiser
        .predict_noise_batch(&x_t, ts, &conds, Some(&masks), true)?;
    let l_normal = (pred_normal - &eps_true)?.sqr()?.mean_all()?;
    // plain branch
    let pred_decouple = model
        .denoiser
        .predict_noise_batch(&x_t, ts, &conds, None, true)?;
    let l_decouple = (pred_decouple - &eps_true)?.sqr()?.mean_all()?;
    let l_contrast = (Tensor::stack(&contrast_terms, 0)?.sum_all()? / b as f64)?;
    let l_total =
        (((&l_normal * cfg.alpha1)? + (&l_decouple * cfg.alpha2)?)? + (&l_contrast * cfg.alpha3)?)?;
    let report = LossReport::new(
        l_normal.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        l_decouple.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        l_contrast.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        cfg,
    );
    Ok(BranchLosses {
        l_normal,
        l_decouple,
        l_contrast,
        l_total,
        report,
    })
}

/// Outcome of a training run.
pub struct TrainStats {
    pub steps: usize,
    pub skipped: usize,
    pub reports: Vec<LossReport>,
}

/// Optimize the denoiser, injection MLPs, projectors, feature-mask logits and
/// null tokens with AdamW. Frozen encoders are untouched (they are not in the
/// var map). Writes a per-step loss CSV and an epoch checkpoint when
/// `out_dir` is given. Fails if more than 1% of steps skip on non-finite
/// losses or gradients.
pub fn train(
    model: &CustomizerModel,
    items: &[TrainItem],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainStats> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::validation("no training samples"));
    }
    let params = candle_nn::ParamsAdamW {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut opt = candle_nn::AdamW::new(model.varmap.all_vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t_max = model.schedule.t_max();
    let mut stats = TrainStats {
        steps: 0,
        skipped: 0,
        reports: Vec::new(),
    };
    let mut csv: Option<std::fs::File> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss_log.csv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "step,l_normal,l_decouple,l_contrast,l_total")
                .map_err(|e| Error::io(&path, e))?;
            Some(f)
        }
        None => None,
    };
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..items.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if stats.steps >= budget {
                break 'epochs;
            }
            let batch: Vec<&TrainItem> = chunk.iter().map(|i| &items[*i]).collect();
            let ts: Vec<usize> = batch.iter().map(|_| rng.gen_range(0..t_max)).collect();
            let eps: Vec<Tensor> = batch
                .iter()
                .map(|item| {
                    crate::sampler::seeded_normal(rng.gen(), item.latent.dims(), &model.denoiser)
                })
                .collect::<Result<_>>()?;
            let draws: Vec<(f64, f64)> = batch
                .iter()
                .map(|_| (rng.gen::<f64>(), rng.gen::<f64>()))
                .collect();
            let losses = branch_losses(model, &batch, &ts, &eps, &draws, cfg)?;
            stats.steps += 1;
            if !losses.report.is_finite() {
                stats.skipped += 1;
                eprintln!("warning: non-finite loss at step {}, skipping", stats.steps);
                continue;
            }
            let grads = losses.l_total.backward()?;
            let mut finite = true;
            for var in model.varmap.all_vars() {
                if let Some(g) = grads.get(&var) {
                    let s = g.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
                    if !s.is_finite() {
                        finite = false;
                        break;
                    }
                }
            }
            if !finite {
                stats.skipped += 1;
                eprintln!(
                    "warning: non-finite gradient at step {}, skipping",
                    stats.steps
                );
                continue;
            }
            opt.step(&grads)?;
            if let Some(f) = csv.as_mut() {
                let r = &losses.report;
                let _ = writeln!(
                    f,
                    "{},{},{},{},{}",
                    stats.steps, r.l_normal, r.l_decouple, r.l_contrast, r.l_total
                );
            }
            stats.reports.push(losses.report);
        }
        if let Some(dir) = out_dir {
            model.save_checkpoint(&dir.join(format!("checkpoint-epoch{epoch}.safetensors")))?;
        }
    }
    if stats.steps > 0 && stats.skipped * 100 > stats.steps {
        return Err(Error::validation(format!(
            "{} of {} steps skipped on non-finite values",
            stats.skipped, stats.steps
        )));
    }
    Ok(stats)
}
