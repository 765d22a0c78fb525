//! Metrics: pairwise diversity, text alignment, Fréchet distance between
//! Gaussian summaries, the sparse-activation diversity protocol, oracle factor
//! correlation and slider auto-labeling.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::DiffusionBackend;
use crate::composer::{
    encode_png, generate, sparse_random_activation, GenerationRequest, SignPolicy, SliderLibrary, TimestepGate,
};
use crate::encoder::{embed_image, SemanticEmbedding, SemanticEncoder, FACTOR_ORACLE_ID};
use crate::error::{contract, Error, Result};
use crate::pca::SampleMatrix;

/// Tolerance for symmetry, positive semidefiniteness and imaginary residue.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Distance between two embeddings of the same encoder.
pub trait EmbeddingDistance: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &[f32], b: &[f32]) -> f64;
}

/// `1 - cos(a, b)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CosineDistance;

impl EmbeddingDistance for CosineDistance {
    fn name(&self) -> &str {
        "cosine"
    }

    fn distance(&self, a: &[f32], b: &[f32]) -> f64 {
        1.0 - cosine(a, b)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn check_common_encoder(embeddings: &[SemanticEmbedding]) -> Result<()> {
    if let Some(first) = embeddings.first() {
        if let Some(other) = embeddings.iter().find(|e| e.encoder_id != first.encoder_id) {
            return Err(contract(format!(
                "mixed encoders '{}' and '{}'",
                first.encoder_id, other.encoder_id
            )));
        }
    }
    Ok(())
}

fn distance_matrix(embeddings: &[SemanticEmbedding], distance: &dyn EmbeddingDistance) -> Vec<Vec<f64>> {
    let n = embeddings.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = distance.distance(&embeddings[i].vector, &embeddings[j].vector);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn mean_pairwise(d: &[Vec<f64>], idx: &[usize]) -> f64 {
    let n = idx.len();
    let mut s = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            s += d[idx[a]][idx[b]];
        }
    }
    s / (n * (n - 1) / 2) as f64
}

/// Mean distance over all unordered pairs.
pub fn pairwise_diversity(embeddings: &[SemanticEmbedding], distance: &dyn EmbeddingDistance) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::Validation("pairwise diversity needs at least two embeddings".into()));
    }
    check_common_encoder(embeddings)?;
    let d = distance_matrix(embeddings, distance);
    Ok(mean_pairwise(&d, &(0..embeddings.len()).collect::<Vec<_>>()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentConvention {
    #[default]
    RawCosine,
    /// `100 * max(0, cos)`.
    ClipScore,
}

fn alignment_value(cos: f64, convention: AlignmentConvention) -> f64 {
    match convention {
        AlignmentConvention::RawCosine => cos,
        AlignmentConvention::ClipScore => 100.0 * cos.max(0.0),
    }
}

/// Mean similarity between each image embedding and the prompt's text embedding.
pub fn text_alignment(
    images: &[SemanticEmbedding],
    prompt: &str,
    encoder: &dyn SemanticEncoder,
    convention: AlignmentConvention,
) -> Result<f64> {
    let text = encoder.embed_text(prompt)?;
    text_alignment_with(images, &text, convention)
}

pub fn text_alignment_with(
    images: &[SemanticEmbedding],
    text: &SemanticEmbedding,
    convention: AlignmentConvention,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Validation("text alignment needs at least one image".into()));
    }
    check_common_encoder(images)?;
    if images[0].encoder_id != text.encoder_id {
        return Err(contract("image and text embeddings come from different encoders"));
    }
    let total: f64 = images
        .iter()
        .map(|e| alignment_value(cosine(&e.vector, &text.vector), convention))
        .sum();
    Ok(total / images.len() as f64)
}

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `D x D`.
    pub covariance: Vec<f64>,
}

impl GaussianSummary {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(contract(format!("covariance must be {d}x{d}")));
        }
        let s = Self { mean, covariance };
        s.check_psd()?;
        Ok(s)
    }

    /// Sample mean and unbiased covariance of the rows of `x`.
    pub fn from_samples(x: &SampleMatrix) -> Result<Self> {
        if x.rows < 2 {
            return Err(Error::Validation("need at least two samples".into()));
        }
        let (n, d) = (x.rows, x.cols);
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.data[i * d + j]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let row = x.row(i);
            for a in 0..d {
                let da = row[a] - mean[a];
                for b in a..d {
                    cov[a * d + b] += da * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] / (n - 1) as f64;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        Self::new(mean, cov)
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dimension();
        DMatrix::from_row_slice(d, d, &self.covariance)
    }

    fn check_psd(&self) -> Result<()> {
        let m = self.matrix();
        let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if (&m - m.transpose()).amax() > PSD_TOLERANCE * scale {
            return Err(Error::Validation("covariance is not symmetric".into()));
        }
        let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
        if eig.eigenvalues.iter().any(|l| *l < -PSD_TOLERANCE * scale) {
            return Err(Error::Validation("covariance is not positive semidefinite".into()));
        }
        Ok(())
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn summary_order(a: &GaussianSummary, b: &GaussianSummary) -> std::cmp::Ordering {
    let key = |s: &GaussianSummary| -> Vec<f64> { s.mean.iter().chain(&s.covariance).copied().collect() };
    let (ka, kb) = (key(a), key(b));
    for (x, y) in ka.iter().zip(&kb) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The trace of the cross term is computed as the trace of
/// `(S_a^{1/2} S_b S_a^{1/2})^{1/2}`, which is symmetric. Arguments are put in
/// a canonical order first so the result is exactly symmetric.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dimension() != b.dimension() {
        return Err(contract(format!(
            "summaries have dimensions {} and {}",
            a.dimension(),
            b.dimension()
        )));
    }
    a.check_psd()?;
    b.check_psd()?;
    let (a, b) = if summary_order(a, b).is_gt() { (b, a) } else { (a, b) };
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (ma, mb) = (a.matrix(), b.matrix());
    let root_a = psd_sqrt(&ma);
    let inner = &root_a * &mb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, l| m.max(l.abs()));
    if eig.eigenvalues.iter().any(|l| *l < -PSD_TOLERANCE * scale) {
        return Err(Error::Validation("covariance product has a non-negligible imaginary square root".into()));
    }
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = mean_term + ma.trace() + mb.trace() - 2.0 * cross;
    if value < -PSD_TOLERANCE {
        log::warn!("Fréchet distance {value} below numerical floor");
    }
    Ok(value.max(0.0))
}

/// Percentile bootstrap interval of `statistic` over resampled index sets.
pub fn bootstrap_ci(
    n: usize,
    statistic: &dyn Fn(&[usize]) -> f64,
    resamples: usize,
    level: f64,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..resamples)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            statistic(&idx)
        })
        .filter(|v| v.is_finite())
        .collect();
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| values[((q * (values.len() - 1) as f64).round() as usize).min(values.len() - 1)];
    (pick(alpha), pick(1.0 - alpha))
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub sample_count: usize,
    pub encoder_id: String,
    pub protocol: serde_json::Value,
    pub confidence_interval: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityProtocolConfig {
    pub num_images: usize,
    pub k: usize,
    pub magnitude: f64,
    pub signs: SignPolicy,
    pub seed: u64,
    pub prompt: Option<String>,
    pub gate: Option<TimestepGate>,
    pub convention: AlignmentConvention,
}

impl Default for DiversityProtocolConfig {
    fn default() -> Self {
        Self {
            num_images: 64,
            k: 3,
            magnitude: 1.0,
            signs: SignPolicy::Random,
            seed: 1000,
            prompt: None,
            gate: None,
            convention: AlignmentConvention::RawCosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub base_diversity: MetricReport,
    pub augmented_diversity: MetricReport,
    pub base_alignment: MetricReport,
    pub augmented_alignment: MetricReport,
}

impl DiversityReport {
    pub fn diversity_ratio(&self) -> f64 {
        self.augmented_diversity.value / self.base_diversity.value
    }

    /// Relative alignment drop, positive when the augmented set aligns worse.
    pub fn alignment_drop(&self) -> f64 {
        (self.base_alignment.value - self.augmented_alignment.value) / self.base_alignment.value.abs()
    }
}

/// Base and sparse-`k` augmented image sets over the same seeds, with
/// diversity and text alignment for both.
pub fn diversity_protocol(
    library: &SliderLibrary,
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    cfg: &DiversityProtocolConfig,
) -> Result<DiversityReport> {
    if cfg.num_images < 2 {
        return Err(Error::Validation("diversity protocol needs at least two images".into()));
    }
    let prompt = cfg.prompt.clone().unwrap_or_else(|| library.prompt.clone());
    let ids = library.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut base = Vec::with_capacity(cfg.num_images);
    let mut augmented = Vec::with_capacity(cfg.num_images);
    let mut requests = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let seed = cfg.seed + i as u64;
        let mut req = GenerationRequest::new(prompt.clone(), seed);
        req.gate = cfg.gate;
        let base_img = generate(&req, library, backend)?;
        req.activations = sparse_random_activation(&ids, cfg.k, cfg.magnitude, cfg.signs, &mut rng)?;
        let aug_img = if req.activations.is_empty() {
            base_img.clone()
        } else {
            generate(&req, library, backend)?
        };
        let embed = |rgb: &[f32]| -> Result<SemanticEmbedding> {
            let shape = base_img.latent.shape();
            let t = candle_core::Tensor::from_slice(rgb, (1, shape[0], shape[1], shape[2]), backend.device())?;
            embed_image(encoder, &t)
        };
        base.push(embed(&base_img.rgb)?);
        augmented.push(embed(&aug_img.rgb)?);
        requests.push(req.activations);
    }
    let text = encoder.embed_text(&prompt)?;
    let distance = CosineDistance;
    let protocol = serde_json::json!({
        "prompt": prompt,
        "num_images": cfg.num_images,
        "k": cfg.k,
        "magnitude": cfg.magnitude,
        "signs": cfg.signs,
        "seed": cfg.seed,
        "gate": cfg.gate,
        "distance": distance.name(),
        "convention": cfg.convention,
        "bootstrap_resamples": BOOTSTRAP_RESAMPLES,
        "activations": requests,
    });
    let encoder_id = encoder.descriptor().encoder_id.clone();
    let diversity_report = |set: &[SemanticEmbedding], name: &str, salt: u64| -> Result<MetricReport> {
        let d = distance_matrix(set, &distance);
        let value = pairwise_diversity(set, &distance)?;
        let ci = bootstrap_ci(set.len(), &|idx| mean_pairwise(&d, idx), BOOTSTRAP_RESAMPLES, 0.95, cfg.seed ^ salt);
        Ok(MetricReport {
            metric: name.into(),
            value,
            sample_count: set.len(),
            encoder_id: encoder_id.clone(),
            protocol: protocol.clone(),
            confidence_interval: Some(ci),
        })
    };
    let alignment_report = |set: &[SemanticEmbedding], name: &str, salt: u64| -> Result<MetricReport> {
        let per: Vec<f64> = set
            .iter()
            .map(|e| alignment_value(cosine(&e.vector, &text.vector), cfg.convention))
            .collect();
        let value = text_alignment_with(set, &text, cfg.convention)?;
        let ci = bootstrap_ci(
            per.len(),
            &|idx| idx.iter().map(|i| per[*i]).sum::<f64>() / idx.len() as f64,
            BOOTSTRAP_RESAMPLES,
            0.95,
            cfg.seed ^ salt,
        );
        Ok(MetricReport {
            metric: name.into(),
            value,
            sample_count: set.len(),
            encoder_id: encoder_id.clone(),
            protocol: protocol.clone(),
            confidence_interval: Some(ci),
        })
    };
    Ok(DiversityReport {
        base_diversity: diversity_report(&base, "pairwise_diversity/base", 1)?,
        augmented_diversity: diversity_report(&augmented, "pairwise_diversity/augmented", 1)?,
        base_alignment: alignment_report(&base, "text_alignment/base", 2)?,
        augmented_alignment: alignment_report(&augmented, "text_alignment/augmented", 2)?,
    })
}

/// Average ranks with ties sharing their mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[order[k]] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub const MIN_CORRELATION_SEEDS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRho {
    pub factor: String,
    /// Correlation between the scales and the seed-averaged factor values.
    pub rho: f64,
    /// Per-seed correlations averaged over seeds; constant seeds count as zero.
    pub mean_seed_rho: f64,
    /// Set when the factor means are constant across scales.
    pub degenerate: bool,
    /// Mean factor value at each scale.
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCorrelation {
    pub slider_id: String,
    pub prompt: String,
    pub scales: Vec<f64>,
    pub seeds: Vec<u64>,
    pub factors: Vec<FactorRho>,
}

impl FactorCorrelation {
    pub fn factor(&self, name: &str) -> Option<&FactorRho> {
        self.factors.iter().find(|f| f.factor == name)
    }

    /// Factor with the largest `|rho|`.
    pub fn dominant(&self) -> Option<&FactorRho> {
        self.factors.iter().max_by(|a, b| a.rho.abs().total_cmp(&b.rho.abs()))
    }
}

/// Spearman correlation between slider scale and the mean oracle factor value
/// over `seeds`, for every factor the oracle reports.
#[allow(clippy::too_many_arguments)]
pub fn factor_correlation(
    library: &SliderLibrary,
    backend: &dyn DiffusionBackend,
    oracle: &dyn SemanticEncoder,
    factor_names: &[&str],
    slider_id: &str,
    scales: &[f64],
    seeds: &[u64],
    prompt: Option<&str>,
    gate: Option<TimestepGate>,
) -> Result<FactorCorrelation> {
    if oracle.descriptor().encoder_id != FACTOR_ORACLE_ID {
        return Err(Error::Capability(format!(
            "factor correlation needs the factor oracle, got '{}'",
            oracle.descriptor().encoder_id
        )));
    }
    if scales.len() < 3 {
        return Err(Error::Validation("correlation needs at least three scales".into()));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation("scales must be strictly increasing".into()));
    }
    if seeds.len() < MIN_CORRELATION_SEEDS {
        return Err(Error::Validation(format!(
            "correlation needs at least {MIN_CORRELATION_SEEDS} seeds"
        )));
    }
    library.get(slider_id)?;
    let prompt = prompt.unwrap_or(&library.prompt).to_string();
    let dim = oracle.descriptor().dimension;
    // values[scale][seed][factor]
    let mut values = vec![vec![vec![0.0f64; dim]; seeds.len()]; scales.len()];
    for (si, scale) in scales.iter().enumerate() {
        for (ki, seed) in seeds.iter().enumerate() {
            let mut req = GenerationRequest::new(prompt.clone(), *seed).with(slider_id, *scale);
            req.gate = gate;
            let img = generate(&req, library, backend)?;
            let shape = img.latent.shape();
            let t = candle_core::Tensor::from_slice(&img.rgb, (1, shape[0], shape[1], shape[2]), backend.device())?;
            let e = embed_image(oracle, &t)?;
            for (slot, v) in values[si][ki].iter_mut().zip(&e.vector) {
                *slot = *v as f64;
            }
        }
    }
    let n = seeds.len() as f64;
    let factors = (0..dim)
        .map(|f| {
            let means: Vec<f64> = values
                .iter()
                .map(|per_seed| per_seed.iter().map(|v| v[f]).sum::<f64>() / n)
                .collect();
            let (rho, degenerate) = match spearman(scales, &means) {
                Some(r) => (r, false),
                None => (0.0, true),
            };
            let mean_seed_rho = (0..seeds.len())
                .map(|k| {
                    let ys: Vec<f64> = values.iter().map(|per_seed| per_seed[k][f]).collect();
                    spearman(scales, &ys).unwrap_or(0.0)
                })
                .sum::<f64>()
                / n;
            FactorRho {
                factor: factor_names.get(f).map(|s| s.to_string()).unwrap_or_else(|| format!("factor-{f}")),
                rho,
                mean_seed_rho,
                degenerate,
                means,
            }
        })
        .collect();
    Ok(FactorCorrelation {
        slider_id: slider_id.to_string(),
        prompt,
        scales: scales.to_vec(),
        seeds: seeds.to_vec(),
        factors,
    })
}

/// One generated image pair for labeling: the same seed at scale -1 and +1.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub seed: u64,
    pub negative_png: Vec<u8>,
    pub positive_png: Vec<u8>,
}

pub const LABEL_INSTRUCTION: &str = "Each pair shows the same image before (left) and after (right) one edit. \
Name the single visual attribute that the edit changes, in at most four words.";

/// External vision-language client.
pub trait CaptionClient: Send + Sync {
    fn describe(&self, instruction: &str, pairs: &[ImagePair]) -> Result<String>;
}

pub const UNLABELED: &str = "unlabeled";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliderLabel {
    pub label: String,
    /// `machine-generated` labels may be inaccurate; `none` marks failures.
    pub source: String,
}

/// Labels every slider from `pairs_per_slider` image pairs. Client failures
/// leave that slider unlabeled and labeling continues.
pub fn label_sliders(
    library: &SliderLibrary,
    backend: &dyn DiffusionBackend,
    client: &dyn CaptionClient,
    pairs_per_slider: usize,
    first_seed: u64,
) -> Result<BTreeMap<String, SliderLabel>> {
    if pairs_per_slider == 0 {
        return Err(Error::Validation("pairs_per_slider must be positive".into()));
    }
    let mut out = BTreeMap::new();
    for id in library.ids() {
        let mut pairs = Vec::with_capacity(pairs_per_slider);
        for k in 0..pairs_per_slider {
            let seed = first_seed + k as u64;
            let neg = generate(&GenerationRequest::new(library.prompt.clone(), seed).with(&id, -1.0), library, backend)?;
            let pos = generate(&GenerationRequest::new(library.prompt.clone(), seed).with(&id, 1.0), library, backend)?;
            pairs.push(ImagePair {
                seed,
                negative_png: encode_png(&neg.rgb, neg.latent.shape())?,
                positive_png: encode_png(&pos.rgb, pos.latent.shape())?,
            });
        }
        let label = match client.describe(LABEL_INSTRUCTION, &pairs) {
            Ok(text) if !text.trim().is_empty() => SliderLabel {
                label: text.trim().to_string(),
                source: "machine-generated".into(),
            },
            Ok(_) => SliderLabel {
                label: UNLABELED.into(),
                source: "none".into(),
            },
            Err(e) => {
                log::warn!("labeling {id} failed: {e}");
                SliderLabel {
                    label: UNLABELED.into(),
                    source: "none".into(),
                }
            }
        };
        out.insert(id, label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f32]) -> SemanticEmbedding {
        SemanticEmbedding {
            vector: v.to_vec(),
            encoder_id: "e".into(),
            normalized: false,
        }
    }

    #[test]
    fn diversity_fixtures() {
        let same = vec![emb(&[1.0, 0.0]); 4];
        assert_eq!(pairwise_diversity(&same, &CosineDistance).unwrap(), 0.0);
        let ortho = [emb(&[1.0, 0.0]), emb(&[0.0, 1.0])];
        assert!((pairwise_diversity(&ortho, &CosineDistance).unwrap() - 1.0).abs() < 1e-12);
        assert!(pairwise_diversity(&ortho[..1], &CosineDistance).is_err());
        let mut mixed = ortho.to_vec();
        mixed[1].encoder_id = "other".into();
        assert!(pairwise_diversity(&mixed, &CosineDistance).is_err());
    }

    #[test]
    fn alignment_fixtures() {
        let text = emb(&[1.0, 0.0]);
        let imgs = [emb(&[2.0, 0.0]), emb(&[0.0, 3.0])];
        assert_eq!(text_alignment_with(&imgs[..1], &text, AlignmentConvention::RawCosine).unwrap(), 1.0);
        assert_eq!(text_alignment_with(&imgs[1..], &text, AlignmentConvention::RawCosine).unwrap(), 0.0);
        assert_eq!(text_alignment_with(&imgs, &text, AlignmentConvention::RawCosine).unwrap(), 0.5);
        let neg = [emb(&[-1.0, 0.0])];
        assert_eq!(text_alignment_with(&neg, &text, AlignmentConvention::ClipScore).unwrap(), 0.0);
        assert_eq!(text_alignment_with(&imgs[..1], &text, AlignmentConvention::ClipScore).unwrap(), 100.0);
    }

    #[test]
    fn spearman_and_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 2.0, 1.0]), vec![4.0, 1.5, 3.0, 1.5]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
    }

    #[test]
    fn psd_checks() {
        assert!(GaussianSummary::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1.0]).is_err());
        assert!(GaussianSummary::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0]).is_err());
        assert!(GaussianSummary::new(vec![0.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn bootstrap_brackets_statistic() {
        let data: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let (lo, hi) = bootstrap_ci(data.len(), &|idx| idx.iter().map(|i| data[*i]).sum::<f64>() / idx.len() as f64, 1000, 0.95, 3);
        assert!(lo < 24.5 && 24.5 < hi && hi - lo < 20.0);
    }
}
