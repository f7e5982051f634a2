//! Hand-coded reference implementations shared by the integration suites.
//! Everything here is written with plain loops, independently of the library
//! code it checks.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)] // index loops mirror the textbook formulas

use idforge_core::config::RunConfig;
use idforge_core::denoiser::DenoiserConfig;
use idforge_core::encoder::{toy_detail_spec, toy_recon_spec, EncoderRole, EncoderSpec};
use idforge_core::trainer::TrainConfig;

/// Dense softmax cross-attention evaluated with scalar loops:
/// out = softmax(zWq (cWk)^T / sqrt(d)) (cWv).
pub fn attention_oracle(
    z: &[Vec<f64>],
    c: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let matmul = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let (m, k, n) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; n]; m];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i][j] += a[i][l] * b[l][j];
                }
            }
        }
        out
    };
    let q = matmul(z, wq);
    let k = matmul(c, wk);
    let v = matmul(c, wv);
    let d = wq[0].len() as f64;
    let m = q.len();
    let n = k.len();
    let mut out = vec![vec![0.0; v[0].len()]; m];
    for i in 0..m {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            for l in 0..q[i].len() {
                logits[j] += q[i][l] * k[j][l];
            }
            logits[j] /= d.sqrt();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for j in 0..n {
            let p = exps[j] / denom;
            for l in 0..v[j].len() {
                out[i][l] += p * v[j][l];
            }
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns).
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p][q] * m[p][q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for i in 0..n {
                    let (mip, miq) = (m[i][p], m[i][q]);
                    m[i][p] = cos * mip - sin * miq;
                    m[i][q] = sin * mip + cos * miq;
                }
                for j in 0..n {
                    let (mpj, mqj) = (m[p][j], m[q][j]);
                    m[p][j] = cos * mpj - sin * mqj;
                    m[q][j] = sin * mpj + cos * mqj;
                }
                for i in 0..n {
                    let (vip, viq) = (v[i][p], v[i][q]);
                    v[i][p] = cos * vip - sin * viq;
                    v[i][q] = sin * vip + cos * viq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    (eigvals, v)
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

fn sym_sqrt(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let (vals, vecs) = jacobi_eigen(a);
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for (l, val) in vals.iter().enumerate() {
                out[i][j] += vecs[i][l] * val.max(0.0).sqrt() * vecs[j][l];
            }
        }
    }
    out
}

/// Literal-formula Fréchet distance between Gaussian fits, computed with the
/// Jacobi solver above and unbiased covariances.
pub fn frechet_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let stats = |x: &[Vec<f64>]| {
        let n = x.len() as f64;
        let mut mu = vec![0.0; d];
        for row in x {
            for (i, v) in row.iter().enumerate() {
                mu[i] += v / n;
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for row in x {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += (row[i] - mu[i]) * (row[j] - mu[j]) / (n - 1.0);
                }
            }
        }
        (mu, cov)
    };
    let (mu_a, cov_a) = stats(a);
    let (mu_b, cov_b) = stats(b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let half = sym_sqrt(&cov_a);
    let inner = mat_mul(&mat_mul(&half, &cov_b), &half);
    // symmetrize before the eigen solve
    let sym: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| 0.5 * (inner[i][j] + inner[j][i])).collect())
        .collect();
    let (vals, _) = jacobi_eigen(&sym);
    let cross: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[i][i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i][i]).sum();
    mean_term + tr_a + tr_b - 2.0 * cross
}

/// Small model profile for fast end-to-end runs: 16x16 rasters, narrow
/// denoiser, short toy encoders, desk-scale optimizer settings. Loss
/// weights, condition dropout and the contrastive sign stay at defaults.
pub fn tiny_config(seed: u64) -> RunConfig {
    let denoiser = DenoiserConfig {
        latent_channels: 3,
        base_width: 8,
        depth: 2,
        heads: 2,
        d_model: 16,
        t_max: 1000,
        resolution: 16,
    };
    RunConfig {
        seed,
        d_model: 16,
        detail_encoder: EncoderSpec {
            input_size: 16,
            ..toy_detail_spec(12)
        },
        recon_encoder: EncoderSpec {
            input_size: 16,
            ..toy_recon_spec(10)
        },
        target_encoder: EncoderSpec {
            role: EncoderRole::Reconstruction,
            input_size: 16,
            patch_size: 8,
            d_enc: 16,
            weights_ref: "toy:37".to_string(),
        },
        denoiser,
        train: TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs: usize::MAX / 2,
            seed,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}
