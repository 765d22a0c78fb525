//! Semantic embedding encoders.
//!
//! Encoders map decoded RGB batches `(B, 3, H, W)` to `(B, D)` embeddings.
//! Three are built in:
//!
//! * [`ToySemanticEncoder`] (`toy-semantic`): a fixed, differentiable,
//!   object-centric feature extractor for the shapes world. It plays the role a
//!   CLIP-style encoder plays for real backends and supports text.
//! * [`FactorOracleEncoder`] (`factor-oracle`): emits the measured ground-truth
//!   factors `[hue, size, shape, background]`. Not differentiable.
//! * [`PixelEncoder`] (`pixel-space`): the flattened image itself, used by the
//!   output-space training objective.
//!
//! Other encoders plug in through [`SemanticEncoder`] and [`EncoderRegistry`].

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backend::DiffusionBackend;
use crate::error::{contract, Error, Result};
use crate::schedule::LatentImage;
use crate::shapes::{self, CANVAS, CENTER, CHANNELS};

pub const TOY_SEMANTIC_ID: &str = "toy-semantic";
pub const FACTOR_ORACLE_ID: &str = "factor-oracle";
pub const PIXEL_SPACE_ID: &str = "pixel-space";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticEmbedding {
    pub vector: Vec<f32>,
    pub encoder_id: String,
    pub normalized: bool,
}

impl SemanticEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub encoder_id: String,
    pub dimension: usize,
    pub supports_text: bool,
    /// Whether gradients flow from the embedding back to the input pixels.
    pub differentiable: bool,
    pub normalized: bool,
    /// Human-readable input recipe, recorded in manifests.
    pub preprocessing: String,
}

pub trait SemanticEncoder: Send + Sync {
    fn descriptor(&self) -> &EncoderDescriptor;

    /// `(B, 3, H, W)` RGB in `[0, 1]` to `(B, D)` embeddings.
    fn embed_rgb_batch(&self, rgb: &Tensor) -> Result<Tensor>;

    fn embed_text(&self, text: &str) -> Result<SemanticEmbedding> {
        let _ = text;
        Err(Error::Capability(format!(
            "encoder '{}' has no text pathway",
            self.descriptor().encoder_id
        )))
    }
}

fn check_rgb(desc: &EncoderDescriptor, rgb: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let dims = rgb.dims4().map_err(|_| {
        Error::Preprocessing(format!(
            "encoder '{}' expects (B, 3, H, W) input, got {:?}",
            desc.encoder_id,
            rgb.dims()
        ))
    })?;
    if dims.1 != CHANNELS {
        return Err(Error::Preprocessing(format!(
            "encoder '{}' expects {CHANNELS} channels, got {}",
            desc.encoder_id, dims.1
        )));
    }
    Ok(dims)
}

fn row_to_embedding(desc: &EncoderDescriptor, row: &Tensor) -> Result<SemanticEmbedding> {
    Ok(SemanticEmbedding {
        vector: row.flatten_all()?.to_vec1::<f32>()?,
        encoder_id: desc.encoder_id.clone(),
        normalized: desc.normalized,
    })
}

/// Embeds one RGB image given as `(3, H, W)` or `(1, 3, H, W)`.
pub fn embed_image(encoder: &dyn SemanticEncoder, rgb: &Tensor) -> Result<SemanticEmbedding> {
    let batch = match rgb.rank() {
        3 => rgb.unsqueeze(0)?,
        4 if rgb.dims()[0] == 1 => rgb.clone(),
        _ => {
            return Err(Error::Preprocessing(format!(
                "expected a single (3, H, W) image, got {:?}",
                rgb.dims()
            )))
        }
    };
    let out = encoder.embed_rgb_batch(&batch)?;
    row_to_embedding(encoder.descriptor(), &out)
}

/// Decodes a latent through the backend (clamped to its value range) and embeds it.
pub fn embed_latent(
    encoder: &dyn SemanticEncoder,
    backend: &dyn DiffusionBackend,
    latent: &LatentImage,
) -> Result<SemanticEmbedding> {
    let x = latent.clamped().to_tensor(backend.device())?.unsqueeze(0)?;
    let rgb = backend.decode_rgb(&x)?.clamp(0f32, 1f32)?;
    embed_image(encoder, &rgb)
}

/// `a - b` for two embeddings from the same encoder.
pub fn embedding_delta(a: &SemanticEmbedding, b: &SemanticEmbedding) -> Result<Vec<f32>> {
    if a.encoder_id != b.encoder_id {
        return Err(contract(format!(
            "embeddings come from different encoders ('{}' vs '{}')",
            a.encoder_id, b.encoder_id
        )));
    }
    if a.vector.len() != b.vector.len() {
        return Err(contract(format!(
            "embedding dimensions differ ({} vs {})",
            a.vector.len(),
            b.vector.len()
        )));
    }
    Ok(a.vector.iter().zip(&b.vector).map(|(x, y)| x - y).collect())
}

fn l2_normalize_rows(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12f32, f32::MAX)?;
    Ok(t.broadcast_div(&norm)?)
}

/// Object-centric features of a shapes image.
///
/// From the center patch color it takes two opponent chroma channels and a
/// luminance term; from the center row and diagonal coverage profiles it takes
/// an extent and an outline descriptor; from the corners it takes the
/// background level. A constant term anchors the embedding before
/// normalization. Chroma carries the largest weights, so hue dominates the
/// embedding's variance.
#[derive(Debug, Clone)]
pub struct ToySemanticEncoder {
    descriptor: EncoderDescriptor,
    weights: [f32; 7],
}

impl Default for ToySemanticEncoder {
    fn default() -> Self {
        Self::new(true)
    }
}

impl ToySemanticEncoder {
    pub const DIM: usize = 7;

    pub fn new(normalize: bool) -> Self {
        Self {
            descriptor: EncoderDescriptor {
                encoder_id: TOY_SEMANTIC_ID.into(),
                dimension: Self::DIM,
                supports_text: true,
                differentiable: true,
                normalized: normalize,
                preprocessing: "rgb [0,1], 3x32x32, no resize".into(),
            },
            weights: [1.0, 1.0, 0.5, 0.25, 0.25, 0.3, 1.0],
        }
    }

    fn features(&self, rgb: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = rgb.dims4()?;
        if h != CANVAS || w != CANVAS {
            return Err(Error::Preprocessing(format!(
                "toy-semantic expects {CANVAS}x{CANVAS} images, got {h}x{w}"
            )));
        }
        let dev = rgb.device();
        let patch_mean = |y: usize, x: usize| -> Result<Tensor> {
            Ok(rgb.narrow(2, y, 3)?.narrow(3, x, 3)?.mean((2, 3))?)
        };
        let color = patch_mean(CENTER - 1, CENTER - 1)?;
        let bg = ((patch_mean(0, 0)?
            + patch_mean(0, CANVAS - 3)?)?
            + (patch_mean(CANVAS - 3, 0)? + patch_mean(CANVAS - 3, CANVAS - 3)?)?)?
            .affine(0.25, 0.0)?;
        let r = color.narrow(1, 0, 1)?;
        let g = color.narrow(1, 1, 1)?;
        let bl = color.narrow(1, 2, 1)?;
        let u = (&r - &g)?;
        let v = ((&r + &g)? - (&bl * 2.0)?)?.affine(1.0 / 3f64.sqrt(), 0.0)?;
        let lum = color.mean_keepdim(1)?.affine(1.0, -0.5)?;
        let contrast = (&color - &bg)?;
        let denom = contrast.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-2)?;

        let coverage = |pixels: &Tensor| -> Result<Tensor> {
            // pixels: (B, 3, L)
            let diff = pixels.broadcast_sub(&bg.unsqueeze(2)?)?;
            let dot = diff.broadcast_mul(&contrast.unsqueeze(2)?)?.sum(1)?;
            Ok(dot.broadcast_div(&denom)?)
        };
        let row = rgb.narrow(2, CENTER, 1)?.squeeze(2)?;
        let radius = coverage(&row)?.sum_keepdim(1)?.affine(0.5, 0.0)?;
        let idx: Vec<u32> = (1..CANVAS - CENTER)
            .map(|j| ((CENTER + j) * CANVAS + CENTER + j) as u32)
            .collect();
        let idx = Tensor::from_vec(idx, CANVAS - CENTER - 1, dev)?;
        let diag = rgb.reshape((b, CHANNELS, h * w))?.index_select(&idx, 2)?;
        let diag_sum = coverage(&diag)?.sum_keepdim(1)?;
        let ratio = (diag_sum.affine(1.0, 0.5)? / radius.affine(1.0, 0.5)?)?;
        let bg_level = bg.mean_keepdim(1)?;

        let wts = &self.weights;
        let cols = [
            u.affine(wts[0] as f64, 0.0)?,
            v.affine(wts[1] as f64, 0.0)?,
            lum.affine(wts[2] as f64, 0.0)?,
            radius.affine(wts[3] as f64 / 3.0, -7.0 * wts[3] as f64 / 3.0)?,
            ratio.affine(wts[4] as f64 / 0.25, -0.73 * wts[4] as f64 / 0.25)?,
            bg_level.affine(wts[5] as f64 / 0.3, -0.35 * wts[5] as f64 / 0.3)?,
            Tensor::full(wts[6], (b, 1), dev)?,
        ];
        Ok(Tensor::cat(&cols, 1)?)
    }
}

impl SemanticEncoder for ToySemanticEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn embed_rgb_batch(&self, rgb: &Tensor) -> Result<Tensor> {
        check_rgb(&self.descriptor, rgb)?;
        let f = self.features(rgb)?;
        if self.descriptor.normalized {
            l2_normalize_rows(&f)
        } else {
            Ok(f)
        }
    }

    /// The prompt's factor targets rendered as a canonical image and embedded.
    fn embed_text(&self, text: &str) -> Result<SemanticEmbedding> {
        let factors = shapes::parse_prompt(text).resolve();
        let rgb = Tensor::from_vec(shapes::render(&factors), (1, CHANNELS, CANVAS, CANVAS), &Device::Cpu)?;
        embed_image(self, &rgb)
    }
}

/// Ground-truth factor extractor for the shapes world.
#[derive(Debug, Clone)]
pub struct FactorOracleEncoder {
    descriptor: EncoderDescriptor,
}

impl Default for FactorOracleEncoder {
    fn default() -> Self {
        Self {
            descriptor: EncoderDescriptor {
                encoder_id: FACTOR_ORACLE_ID.into(),
                dimension: 4,
                supports_text: true,
                differentiable: false,
                normalized: false,
                preprocessing: "rgb [0,1], 3x32x32; coordinates [hue, size, shape, background]".into(),
            },
        }
    }
}

impl FactorOracleEncoder {
    pub const FACTORS: [&'static str; 4] = ["hue", "size", "shape", "background"];
}

impl SemanticEncoder for FactorOracleEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn embed_rgb_batch(&self, rgb: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = check_rgb(&self.descriptor, rgb)?;
        if h != CANVAS || w != CANVAS {
            return Err(Error::Preprocessing(format!("factor oracle expects {CANVAS}x{CANVAS}, got {h}x{w}")));
        }
        let flat = rgb.detach().reshape((b, CHANNELS * h * w))?.to_vec2::<f32>()?;
        let mut out = Vec::with_capacity(b * 4);
        for img in flat {
            out.extend(shapes::measure_factors(&img).to_vec());
        }
        Ok(Tensor::from_vec(out, (b, 4), rgb.device())?)
    }

    /// Factor targets named by the prompt; unnamed factors take dataset midpoints.
    fn embed_text(&self, text: &str) -> Result<SemanticEmbedding> {
        Ok(SemanticEmbedding {
            vector: shapes::parse_prompt(text).resolve().to_vec().to_vec(),
            encoder_id: self.descriptor.encoder_id.clone(),
            normalized: false,
        })
    }
}

/// Identity embedding of the flattened RGB image.
#[derive(Debug, Clone)]
pub struct PixelEncoder {
    descriptor: EncoderDescriptor,
}

impl PixelEncoder {
    pub fn new(latent_shape: [usize; 3]) -> Self {
        Self {
            descriptor: EncoderDescriptor {
                encoder_id: PIXEL_SPACE_ID.into(),
                dimension: latent_shape.iter().product(),
                supports_text: false,
                differentiable: true,
                normalized: false,
                preprocessing: "rgb [0,1], flattened channel-major".into(),
            },
        }
    }
}

impl SemanticEncoder for PixelEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn embed_rgb_batch(&self, rgb: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = check_rgb(&self.descriptor, rgb)?;
        if c * h * w != self.descriptor.dimension {
            return Err(Error::Preprocessing(format!(
                "pixel encoder expects {} values per image, got {}",
                self.descriptor.dimension,
                c * h * w
            )));
        }
        Ok(rgb.reshape((b, c * h * w))?)
    }
}

/// Encoders keyed by id. Descriptors are fixed once registered.
#[derive(Clone, Default)]
pub struct EncoderRegistry {
    inner: Arc<RwLock<HashMap<String, Arc<dyn SemanticEncoder>>>>,
}

impl EncoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry pre-populated with the toy semantic encoder, the factor oracle
    /// and the pixel-space encoder for 3x32x32 images.
    pub fn with_builtins() -> Self {
        let r = Self::new();
        r.register(Arc::new(ToySemanticEncoder::default()));
        r.register(Arc::new(FactorOracleEncoder::default()));
        r.register(Arc::new(PixelEncoder::new([CHANNELS, CANVAS, CANVAS])));
        r
    }

    /// Registers an encoder. An id that is already present keeps its original encoder.
    pub fn register(&self, encoder: Arc<dyn SemanticEncoder>) -> bool {
        let id = encoder.descriptor().encoder_id.clone();
        let mut map = self.inner.write().expect("registry lock");
        if map.contains_key(&id) {
            return false;
        }
        map.insert(id, encoder);
        true
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn SemanticEncoder>> {
        self.inner
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("encoder '{id}' is not registered")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{ShapeClass, ShapeFactors};

    fn image(f: &ShapeFactors) -> Tensor {
        Tensor::from_vec(shapes::render(f), (CHANNELS, CANVAS, CANVAS), &Device::Cpu).unwrap()
    }

    fn factors(hue: f32, size: f32) -> ShapeFactors {
        ShapeFactors {
            hue,
            size,
            shape: ShapeClass::Circle,
            background: 0.4,
        }
    }

    #[test]
    fn toy_semantic_is_deterministic_and_unit_norm() {
        let enc = ToySemanticEncoder::default();
        let img = image(&factors(0.2, 0.3));
        let a = embed_image(&enc, &img).unwrap();
        let b = embed_image(&enc, &img).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-5);
        assert_eq!(a.vector.len(), ToySemanticEncoder::DIM);
        let t = enc.embed_text("a green square").unwrap();
        assert!((t.norm() - 1.0).abs() < 1e-5);
        assert_eq!(t, enc.embed_text("a green square").unwrap());
    }

    #[test]
    fn oracle_reproduces_labels() {
        let enc = FactorOracleEncoder::default();
        let e = embed_image(&enc, &image(&factors(0.3, 0.5))).unwrap();
        assert!((e.vector[0] - 0.3).abs() < 1e-5);
        assert!((e.vector[1] - 0.5).abs() < 1e-4);
        assert_eq!(e.vector[2], 0.0);
        assert!((e.vector[3] - 0.4).abs() < 1e-5);
        let t = enc.embed_text("a large cyan square").unwrap();
        assert_eq!(t.vector, vec![0.5, 5.0 / 6.0, 1.0, 0.5]);
    }

    #[test]
    fn wrong_channel_count_is_a_preprocessing_error() {
        let enc = ToySemanticEncoder::default();
        let gray = Tensor::zeros((1, 1, CANVAS, CANVAS), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.embed_rgb_batch(&gray), Err(Error::Preprocessing(_))));
    }

    #[test]
    fn pixel_encoder_has_no_text() {
        let enc = PixelEncoder::new([3, 32, 32]);
        assert!(matches!(enc.embed_text("a shape"), Err(Error::Capability(_))));
    }

    #[test]
    fn deltas() {
        let enc = ToySemanticEncoder::default();
        let a = embed_image(&enc, &image(&factors(0.0, 0.1))).unwrap();
        let b = embed_image(&enc, &image(&factors(0.5, 0.9))).unwrap();
        assert!(embedding_delta(&a, &a).unwrap().iter().all(|v| *v == 0.0));
        let d = embedding_delta(&a, &b).unwrap();
        let n = d.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((0.0..=2.0).contains(&n));
        let oracle = embed_image(&FactorOracleEncoder::default(), &image(&factors(0.0, 0.1))).unwrap();
        let mut padded = oracle.clone();
        padded.vector.resize(ToySemanticEncoder::DIM, 0.0);
        assert!(embedding_delta(&a, &padded).is_err());
    }

    #[test]
    fn hue_moves_the_embedding_most() {
        let enc = ToySemanticEncoder::default();
        let base = embed_image(&enc, &image(&factors(0.25, 0.5))).unwrap();
        let hue = embed_image(&enc, &image(&factors(0.45, 0.5))).unwrap();
        let size = embed_image(&enc, &image(&factors(0.25, 0.9))).unwrap();
        let dist = |a: &SemanticEmbedding, b: &SemanticEmbedding| {
            embedding_delta(a, b).unwrap().iter().map(|v| v * v).sum::<f32>()
        };
        assert!(dist(&base, &hue) > dist(&base, &size));
    }

    #[test]
    fn registry_keeps_first_descriptor() {
        let reg = EncoderRegistry::with_builtins();
        let first = reg.get(TOY_SEMANTIC_ID).unwrap().descriptor().clone();
        assert!(!reg.register(Arc::new(ToySemanticEncoder::new(false))));
        assert_eq!(reg.get(TOY_SEMANTIC_ID).unwrap().descriptor(), &first);
        assert!(matches!(reg.get("clip"), Err(Error::NotFound(_))));
    }
}
