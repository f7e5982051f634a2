//! Evaluation suite: embedding-similarity scores on a 0–100 scale, Fréchet
//! distance between feature distributions, cross-scenario diversity, and the
//! report aggregator driven by a manifest plus a directory of generations.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CompareTarget, MetricsConfig};
use crate::dataset::{resolve_path, Manifest};
use crate::error::{Error, Result};
use crate::image_data::ImageTensor;
use crate::text::tokenize;

/// Deterministic image embedder. Implementations must be frozen: the same
/// image always maps to the same vector.
pub trait ImageEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImageTensor) -> Vec<f32>;
}

/// Joint image/text embedder used for prompt-faithfulness scoring.
pub trait JointEmbedder: ImageEmbedder {
    fn embed_text(&self, prompt: &str) -> Vec<f32>;
}

const POOL_SIDE: usize = 8;

fn pooled_pixels(image: &ImageTensor) -> Vec<f32> {
    let small = image
        .resize(POOL_SIDE, POOL_SIDE)
        .expect("fixed nonzero pool size");
    small.data().to_vec()
}

/// Frozen random linear probe over an 8x8 average pool of the image. Distinct
/// seeds give independent embedding spaces, standing in for distinct
/// pretrained backbones.
pub struct ToyImageEmbedder {
    projection: Vec<f32>, // [dim, 3*POOL_SIDE*POOL_SIDE] row-major
    dim: usize,
}

impl ToyImageEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let d_in = 3 * POOL_SIDE * POOL_SIDE;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * d_in)
            .map(|_| rng.gen_range(-1.0..1.0f32))
            .collect();
        Self { projection, dim }
    }
}

impl ImageEmbedder for ToyImageEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &ImageTensor) -> Vec<f32> {
        let x = pooled_pixels(image);
        let d_in = x.len();
        (0..self.dim)
            .map(|r| {
                let row = &self.projection[r * d_in..(r + 1) * d_in];
                row.iter().zip(&x).map(|(w, v)| w * v).sum()
            })
            .collect()
    }
}

/// Joint toy space: images via the random probe, text as the mean of hashed
/// word vectors drawn in the same space. Shared seed components keep color
/// and shape words weakly correlated with pixel statistics only through the
/// projection seed, which is enough for relative comparisons in tests.
pub struct ToyJointEmbedder {
    image: ToyImageEmbedder,
    text_seed: u64,
}

impl ToyJointEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            image: ToyImageEmbedder::new(dim, seed),
            text_seed: seed ^ 0x9e37_79b9,
        }
    }
}

impl ImageEmbedder for ToyJointEmbedder {
    fn dim(&self) -> usize {
        self.image.dim()
    }

    fn embed(&self, image: &ImageTensor) -> Vec<f32> {
        self.image.embed(image)
    }
}

impl JointEmbedder for ToyJointEmbedder {
    fn embed_text(&self, prompt: &str) -> Vec<f32> {
        let words = tokenize(prompt);
        let dim = self.dim();
        let mut acc = vec![0.0f32; dim];
        for w in &words {
            use std::hash::{Hash, Hasher};
            let mut h = std::collections::hash_map::DefaultHasher::new();
            (w.as_str(), self.text_seed).hash(&mut h);
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
            for a in acc.iter_mut() {
                *a += rng.gen_range(-1.0..1.0f32);
            }
        }
        if !words.is_empty() {
            for a in acc.iter_mut() {
                *a /= words.len() as f32;
            }
        }
        acc
    }
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64) * (*y as f64))
        .sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::validation("degenerate zero embedding"));
    }
    Ok(dot / (na * nb))
}

/// 100 · cosine similarity of the two image embeddings.
pub fn pairwise_sim(embedder: &dyn ImageEmbedder, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(100.0 * cosine(&embedder.embed(a), &embedder.embed(b))?)
}

/// 100 · cosine similarity between an image and a prompt in a joint space.
pub fn prompt_sim(embedder: &dyn JointEmbedder, image: &ImageTensor, prompt: &str) -> Result<f64> {
    Ok(100.0 * cosine(&embedder.embed(image), &embedder.embed_text(prompt))?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidOutcome {
    pub value: f64,
    /// True when the covariance product needed the εI fallback.
    pub regularized: bool,
}

fn mean_and_cov(features: &[Vec<f32>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::validation("need at least 2 feature rows per side"));
    }
    let d = features[0].len();
    let mut mean = DVector::zeros(d);
    for f in features {
        if f.len() != d {
            return Err(Error::shape("ragged feature matrix"));
        }
        for (i, v) in f.iter().enumerate() {
            mean[i] += *v as f64;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let x = DVector::from_iterator(d, f.iter().map(|v| *v as f64)) - &mean;
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose()
}

fn sqrt_trace(cov_a: &DMatrix<f64>, cov_b: &DMatrix<f64>) -> f64 {
    // tr((Σa Σb)^{1/2}) via the symmetric form √Σa Σb √Σa
    let half = psd_sqrt(cov_a);
    let inner = &half * cov_b * &half;
    let sym = (&inner + inner.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// ||μa−μb||² + tr(Σa + Σb − 2(Σa Σb)^{1/2}).
pub fn fid(features_a: &[Vec<f32>], features_b: &[Vec<f32>]) -> Result<FidOutcome> {
    let (mu_a, cov_a) = mean_and_cov(features_a)?;
    let (mu_b, cov_b) = mean_and_cov(features_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::shape("feature dims differ between sides"));
    }
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let mut regularized = false;
    let mut cross = sqrt_trace(&cov_a, &cov_b);
    if !cross.is_finite() {
        regularized = true;
        let eye = DMatrix::identity(mu_a.len(), mu_a.len()) * 1e-6;
        cross = sqrt_trace(&(&cov_a + &eye), &(&cov_b + &eye));
    }
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(FidOutcome {
        value: value.max(0.0),
        regularized,
    })
}

/// Average pairwise similarity among generations from different scenarios
/// (`all_pairs` additionally counts within-scenario pairs). Returns
/// (mean, std) over the enumerated pairs.
pub fn diversim_i(
    generations_by_scenario: &BTreeMap<String, Vec<ImageTensor>>,
    embedder: &dyn ImageEmbedder,
    all_pairs: bool,
) -> Result<(f64, f64)> {
    if generations_by_scenario.len() < 2 {
        return Err(Error::validation("diversity needs at least 2 scenarios"));
    }
    for (name, images) in generations_by_scenario {
        if images.is_empty() {
            return Err(Error::validation(format!(
                "scenario {name} has no generations"
            )));
        }
    }
    let mut tagged = Vec::new();
    for (si, (_, images)) in generations_by_scenario.iter().enumerate() {
        for img in images {
            tagged.push((si, embedder.embed(img)));
        }
    }
    let mut sims = Vec::new();
    for i in 0..tagged.len() {
        for j in (i + 1)..tagged.len() {
            if all_pairs || tagged[i].0 != tagged[j].0 {
                sims.push(100.0 * cosine(&tagged[i].1, &tagged[j].1)?);
            }
        }
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Scenario names with their verbatim prompt suffixes for diversity scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioPromptSet {
    pub scenarios: Vec<(String, Vec<String>)>,
}

impl Default for ScenarioPromptSet {
    fn default() -> Self {
        let mk = |name: &str, place: &str| {
            (
                name.to_string(),
                vec![
                    format!("The scene of the picture is {place}."),
                    format!("The background of the picture is {place}."),
                ],
            )
        };
        Self {
            scenarios: vec![
                mk("Snow", "in the snow"),
                mk("Grass", "on the grass"),
                mk("Beach", "on the beach"),
                mk("Jungle", "in the jungle"),
                mk("Eiffel Tower", "beside the Eiffel Tower"),
            ],
        }
    }
}

impl ScenarioPromptSet {
    /// Expand a base prompt: every (scenario, suffix) combination, suffix
    /// appended verbatim after a space.
    pub fn expand(&self, prompt: &str) -> Vec<(String, String)> {
        self.scenarios
            .iter()
            .flat_map(|(name, suffixes)| {
                suffixes
                    .iter()
                    .map(move |s| (name.clone(), format!("{prompt} {s}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub fid_regularized: bool,
    pub clip_i: f64,
    pub clip_t: f64,
    pub dino_i: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversim_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversim_std: Option<f64>,
    pub n_evaluated: usize,
    pub missing: Vec<String>,
}

pub struct EmbedderSet {
    pub clip: ToyJointEmbedder,
    pub dino: ToyImageEmbedder,
    pub face: Option<ToyImageEmbedder>,
}

impl EmbedderSet {
    pub fn from_config(cfg: &MetricsConfig) -> Result<Self> {
        let face = match &cfg.face_embedder {
            None => None,
            Some(spec) => {
                let seed = spec
                    .strip_prefix("toy:")
                    .and_then(|s| s.parse::<u64>().ok())
                    .ok_or_else(|| {
                        Error::config(format!("face embedder spec must be toy:<seed>, got {spec}"))
                    })?;
                Some(ToyImageEmbedder::new(cfg.embed_dim, seed))
            }
        };
        Ok(Self {
            clip: ToyJointEmbedder::new(cfg.embed_dim, cfg.clip_seed),
            dino: ToyImageEmbedder::new(cfg.embed_dim, cfg.dino_seed),
            face,
        })
    }
}

/// Score a directory of generations against a manifest. Generations are
/// PNGs named `{sample_id}.png`; scenario subdirectories named
/// `scenario-{name}` feed the diversity score when present. Samples with a
/// missing generation are listed and excluded; more than 5% missing is an
/// error.
pub fn evaluate(
    manifest: &Manifest,
    manifest_path: &Path,
    generations_dir: &Path,
    embedders: &EmbedderSet,
    config: &MetricsConfig,
) -> Result<MetricReport> {
    let mut missing = Vec::new();
    let mut gen_images = Vec::new();
    let mut id_images = Vec::new(); // comparison side per sample
    let mut prompts = Vec::new();
    for r in &manifest.records {
        let gen_path = generations_dir.join(format!("{}.png", r.sample_id));
        if !gen_path.exists() {
            missing.push(r.sample_id.clone());
            continue;
        }
        let compare_path = match config.compare_to {
            CompareTarget::Reference => &r.ref_image_path,
            CompareTarget::Target => &r.target_image_path,
        };
        gen_images.push(ImageTensor::load_png(&gen_path)?);
        id_images.push(ImageTensor::load_png(&resolve_path(
            manifest_path,
            compare_path,
        ))?);
        prompts.push(r.caption.clone());
    }
    if manifest.records.is_empty() {
        return Err(Error::validation("empty manifest"));
    }
    let missing_frac = missing.len() as f64 / manifest.records.len() as f64;
    if missing_frac > 0.05 {
        return Err(Error::validation(format!(
            "{} of {} generations missing ({:.1}%): {}",
            missing.len(),
            manifest.records.len(),
            100.0 * missing_frac,
            missing.join(", ")
        )));
    }
    let n = gen_images.len();
    let mut clip_i = 0.0;
    let mut clip_t = 0.0;
    let mut dino_i = 0.0;
    let mut face_sum = 0.0;
    for i in 0..n {
        clip_i += pairwise_sim(&embedders.clip, &gen_images[i], &id_images[i])?;
        dino_i += pairwise_sim(&embedders.dino, &gen_images[i], &id_images[i])?;
        clip_t += prompt_sim(&embedders.clip, &gen_images[i], &prompts[i])?;
        if let Some(face) = &embedders.face {
            face_sum += pairwise_sim(face, &gen_images[i], &id_images[i])?;
        }
    }
    let feats_gen: Vec<Vec<f32>> = gen_images.iter().map(|i| embedders.dino.embed(i)).collect();
    let feats_id: Vec<Vec<f32>> = id_images.iter().map(|i| embedders.dino.embed(i)).collect();
    let fid_out = fid(&feats_gen, &feats_id)?;

    // optional per-scenario subdirectories for the diversity score
    let mut by_scenario = BTreeMap::new();
    if let Ok(entries) = std::fs::read_dir(generations_dir) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if let Some(scenario) = name.strip_prefix("scenario-") {
                let mut images = Vec::new();
                let mut paths: Vec<_> = std::fs::read_dir(e.path())
                    .map_err(|err| Error::io(e.path(), err))?
                    .flatten()
                    .map(|f| f.path())
                    .filter(|p| p.extension().is_some_and(|x| x == "png"))
                    .collect();
                paths.sort();
                for p in paths {
                    images.push(ImageTensor::load_png(&p)?);
                }
                if !images.is_empty() {
                    by_scenario.insert(scenario.to_string(), images);
                }
            }
        }
    }
    let diversim = if by_scenario.len() >= 2 {
        Some(diversim_i(
            &by_scenario,
            &embedders.dino,
            config.diversim_all_pairs,
        )?)
    } else {
        None
    };

    Ok(MetricReport {
        fid: fid_out.value,
        fid_regularized: fid_out.regularized,
        clip_i: clip_i / n as f64,
        clip_t: clip_t / n as f64,
        dino_i: dino_i / n as f64,
        face_sim: embedders.face.as_ref().map(|_| face_sum / n as f64),
        diversim_mean: diversim.map(|d| d.0),
        diversim_std: diversim.map(|d| d.1),
        n_evaluated: n,
        missing,
    })
}

/// Pearson correlation of 8-bin-per-channel color histograms restricted to
/// the masked object region (whole image when `mask` is None). Used as the
/// toy color-fidelity score in ablation comparisons.
pub fn color_hist_correlation(
    a: &ImageTensor,
    a_mask: Option<&crate::image_data::SegMask>,
    b: &ImageTensor,
    b_mask: Option<&crate::image_data::SegMask>,
) -> f64 {
    let ha = color_histogram(a, a_mask);
    let hb = color_histogram(b, b_mask);
    let n = ha.len() as f64;
    let ma = ha.iter().sum::<f64>() / n;
    let mb = hb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ha.iter().zip(&hb) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    if da < 1e-12 || db < 1e-12 {
        return 0.0;
    }
    num / (da.sqrt() * db.sqrt())
}

fn color_histogram(image: &ImageTensor, mask: Option<&crate::image_data::SegMask>) -> Vec<f64> {
    const BINS: usize = 8;
    let mut hist = vec![0.0f64; 3 * BINS];
    let mut count = 0.0;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if let Some(m) = mask {
                if m.get(y, x) == 0 {
                    continue;
                }
            }
            count += 1.0;
            for c in 0..3 {
                let v = image.get(c, y, x).clamp(0.0, 1.0);
                let bin = ((v * BINS as f32) as usize).min(BINS - 1);
                hist[c * BINS + bin] += 1.0;
            }
        }
    }
    if count > 0.0 {
        for h in hist.iter_mut() {
            *h /= count;
        }
    }
    hist
}
