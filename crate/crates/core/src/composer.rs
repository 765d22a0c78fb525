//! Slider-controlled generation: sparse signed activations, timestep gating,
//! transfer to other prompts, and image encoding.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::Slider;
use crate::backend::{initial_noise, run_trajectory, slider_deltas, DiffusionBackend, LayerDeltas};
use crate::error::{Error, Result};
use crate::schedule::LatentImage;

/// Inference step interval `[start_step, end_step)` in which sliders act.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGate {
    pub start_step: usize,
    pub end_step: usize,
}

impl TimestepGate {
    pub fn full(num_steps: usize) -> Self {
        Self {
            start_step: 0,
            end_step: num_steps,
        }
    }

    /// Skips the first step so the base model lays out the structure.
    pub fn precise(num_steps: usize) -> Self {
        Self {
            start_step: 1.min(num_steps),
            end_step: num_steps,
        }
    }

    pub fn contains(&self, step: usize) -> bool {
        (self.start_step..self.end_step).contains(&step)
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if self.start_step > self.end_step || self.end_step > num_steps {
            return Err(Error::Validation(format!(
                "gate [{}, {}) must satisfy 0 <= start <= end <= {num_steps}",
                self.start_step, self.end_step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatePreset {
    Exploration,
    PreciseEdit,
}

impl GatePreset {
    pub fn gate(self, num_steps: usize) -> TimestepGate {
        match self {
            Self::Exploration => TimestepGate::full(num_steps),
            Self::PreciseEdit => TimestepGate::precise(num_steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub seed: u64,
    #[serde(default)]
    pub activations: BTreeMap<String, f64>,
    pub gate: Option<TimestepGate>,
    pub num_steps: Option<usize>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            seed,
            activations: BTreeMap::new(),
            gate: None,
            num_steps: None,
        }
    }

    pub fn with(mut self, slider_id: impl Into<String>, scale: f64) -> Self {
        self.activations.insert(slider_id.into(), scale);
        self
    }

    pub fn with_gate(mut self, gate: TimestepGate) -> Self {
        self.gate = Some(gate);
        self
    }
}

/// Trained sliders of one slider space, keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct SliderLibrary {
    /// Prompt the sliders were discovered for.
    pub prompt: String,
    pub sliders: BTreeMap<String, Slider>,
}

impl SliderLibrary {
    pub fn new(prompt: impl Into<String>, sliders: Vec<Slider>) -> Self {
        Self {
            prompt: prompt.into(),
            sliders: sliders.into_iter().map(|s| (s.id.clone(), s)).collect(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.sliders.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.sliders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sliders.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&Slider> {
        self.sliders
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("unknown slider '{id}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub request: GenerationRequest,
    pub timesteps: Vec<usize>,
    pub gate: TimestepGate,
    /// Prompt of the slider space that supplied the sliders.
    pub library_prompt: String,
    /// True when the request prompt differs from the library prompt.
    pub transfer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub latent: LatentImage,
    /// Channel-major RGB in `[0, 1]`.
    pub rgb: Vec<f32>,
    pub metadata: GenerationMetadata,
}

impl GeneratedImage {
    pub fn png(&self) -> Result<Vec<u8>> {
        encode_png(&self.rgb, self.latent.shape())
    }
}

/// Generates one image. Empty or all-zero activations give the base image
/// bit-for-bit.
pub fn generate(
    req: &GenerationRequest,
    library: &SliderLibrary,
    backend: &dyn DiffusionBackend,
) -> Result<GeneratedImage> {
    let desc = backend.descriptor();
    let num_steps = req.num_steps.unwrap_or(desc.schedule.num_steps());
    let timesteps = desc.schedule.inference_timesteps(num_steps).map_err(|e| Error::Validation(e.to_string()))?;
    let gate = req.gate.unwrap_or(TimestepGate::full(num_steps));
    gate.validate(num_steps)?;
    if req.activations.len() > library.len() {
        return Err(Error::Validation(format!(
            "{} activations for a space of {} sliders",
            req.activations.len(),
            library.len()
        )));
    }
    let mut acts: Vec<(&Slider, f64)> = Vec::with_capacity(req.activations.len());
    for (id, scale) in &req.activations {
        let slider = library.get(id)?;
        if !scale.is_finite() {
            return Err(Error::Validation(format!("activations.{id}: scale must be finite")));
        }
        acts.push((slider, *scale));
    }
    let deltas = slider_deltas(backend, &acts)?;
    let x = initial_noise(req.seed, desc.latent_shape, backend.device())?;
    let ctx = backend.encode_text(&req.prompt);
    let deltas_at = |i: usize| -> Option<LayerDeltas> {
        if !deltas.is_empty() && gate.contains(i) {
            Some(deltas.clone())
        } else {
            None
        }
    };
    let traj = run_trajectory(backend, &x, &ctx, &timesteps, &deltas_at, &[])?;
    let latent = LatentImage::from_tensor(&traj.final_latent.squeeze(0)?)?;
    let rgb = backend
        .decode_rgb(&traj.final_latent)?
        .clamp(0f32, 1f32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(GeneratedImage {
        latent,
        rgb,
        metadata: GenerationMetadata {
            request: req.clone(),
            timesteps,
            gate,
            library_prompt: library.prompt.clone(),
            transfer: req.prompt != library.prompt,
        },
    })
}

/// Generation with sliders discovered for a different prompt.
pub fn transfer_generate(
    req: &GenerationRequest,
    library: &SliderLibrary,
    backend: &dyn DiffusionBackend,
) -> Result<GeneratedImage> {
    let out = generate(req, library, backend)?;
    if out.metadata.transfer {
        log::info!(
            "transferring sliders from '{}' to '{}'",
            library.prompt,
            req.prompt
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SignPolicy {
    #[default]
    Random,
    Positive,
}

/// `k` distinct sliders at `±magnitude`.
pub fn sparse_random_activation<R: Rng + ?Sized>(
    slider_ids: &[String],
    k: usize,
    magnitude: f64,
    signs: SignPolicy,
    rng: &mut R,
) -> Result<BTreeMap<String, f64>> {
    if k > slider_ids.len() {
        return Err(Error::Validation(format!(
            "cannot activate {k} of {} sliders",
            slider_ids.len()
        )));
    }
    if !magnitude.is_finite() {
        return Err(Error::Validation("magnitude must be finite".into()));
    }
    let mut sorted = slider_ids.to_vec();
    sorted.sort();
    let chosen: Vec<String> = sorted.choose_multiple(rng, k).cloned().collect();
    let mut out = BTreeMap::new();
    for id in chosen {
        let sign = match signs {
            SignPolicy::Random if rng.random_bool(0.5) => -1.0,
            _ => 1.0,
        };
        out.insert(id, sign * magnitude);
    }
    Ok(out)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lossless PNG of a channel-major RGB image in `[0, 1]`.
pub fn encode_png(rgb: &[f32], shape: [usize; 3]) -> Result<Vec<u8>> {
    let [c, h, w] = shape;
    if c != 3 || rgb.len() != c * h * w {
        return Err(Error::Validation(format!("cannot encode {shape:?} as RGB")));
    }
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                pixels.push(to_u8(rgb[ch * h * w + y * w + x]));
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Validation("pixel buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Validation(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Tiles equally sized RGB images row-major into one sheet with `cols` columns
/// and a one-pixel white gutter.
pub fn image_sheet(images: &[&[f32]], shape: [usize; 3], cols: usize) -> Result<(Vec<f32>, [usize; 3])> {
    let [c, h, w] = shape;
    if images.is_empty() || cols == 0 {
        return Err(Error::Validation("image sheet needs images and a positive column count".into()));
    }
    let rows = images.len().div_ceil(cols);
    let cols = cols.min(images.len());
    let (sh, sw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut sheet = vec![1.0f32; c * sh * sw];
    for (k, img) in images.iter().enumerate() {
        if img.len() != c * h * w {
            return Err(Error::Validation("image sheet inputs differ in size".into()));
        }
        let (oy, ox) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    sheet[ch * sh * sw + (oy + y) * sw + ox + x] = img[ch * h * w + y * w + x];
                }
            }
        }
    }
    Ok((sheet, [c, sh, sw]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn gates() {
        assert!(TimestepGate::full(50).validate(50).is_ok());
        assert_eq!(TimestepGate::precise(50).start_step, 1);
        assert!(TimestepGate { start_step: 3, end_step: 2 }.validate(50).is_err());
        assert!(TimestepGate { start_step: 0, end_step: 51 }.validate(50).is_err());
        let g = TimestepGate { start_step: 2, end_step: 4 };
        assert!(!g.contains(1) && g.contains(2) && g.contains(3) && !g.contains(4));
        assert_eq!(GatePreset::PreciseEdit.gate(10), TimestepGate::precise(10));
    }

    #[test]
    fn sparse_activation_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sparse_random_activation(&ids(4), 0, 1.0, SignPolicy::Random, &mut rng)
            .unwrap()
            .is_empty());
        let all = sparse_random_activation(&ids(4), 4, 1.0, SignPolicy::Random, &mut rng).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.values().all(|v| v.abs() == 1.0));
        assert!(sparse_random_activation(&ids(4), 5, 1.0, SignPolicy::Random, &mut rng).is_err());
        let a = sparse_random_activation(&ids(32), 3, 1.0, SignPolicy::Random, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sparse_random_activation(&ids(32), 3, 1.0, SignPolicy::Random, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let pos = sparse_random_activation(&ids(32), 8, 0.5, SignPolicy::Positive, &mut rng).unwrap();
        assert!(pos.values().all(|v| *v == 0.5));
    }

    #[test]
    fn png_round_trip() {
        let rgb: Vec<f32> = (0..3 * 4 * 5).map(|i| (i % 7) as f32 / 6.0).collect();
        let png = encode_png(&rgb, [3, 4, 5]).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (5, 4));
        assert_eq!(img.get_pixel(1, 2)[2], to_u8(rgb[2 * 20 + 2 * 5 + 1]));
        assert!(encode_png(&rgb, [1, 4, 15]).is_err());
    }

    #[test]
    fn sheet_layout() {
        let a = vec![0.0f32; 3 * 2 * 2];
        let b = vec![0.5f32; 3 * 2 * 2];
        let (sheet, shape) = image_sheet(&[&a, &b, &a], [3, 2, 2], 2).unwrap();
        assert_eq!(shape, [3, 5, 5]);
        assert_eq!(sheet[3], 0.5);
        assert_eq!(sheet[2], 1.0);
    }
}
