//! Diffusion backends: the plug-in contract, a registry, and the sampling
//! trajectory shared by distribution sampling and slider-controlled generation.

pub mod toy;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{summed_delta, LowRankAdapter, Matrix, Slider};
use crate::error::{config, contract, Error, Result};
use crate::schedule::{LatentImage, NoiseSchedule};

pub use toy::{ToyBackend, ToyBackendConfig};

/// A layer that accepts low-rank updates, with its weight shape `(d, k)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub shape: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub latent_shape: [usize; 3],
    pub adapter_target_layers: Vec<LayerSpec>,
    pub schedule: NoiseSchedule,
}

impl BackendDescriptor {
    pub fn layer(&self, id: &str) -> Result<&LayerSpec> {
        self.adapter_target_layers
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| config(format!("unknown adapter target layer '{id}'")))
    }
}

/// Prompt plus the conditioning vector produced by a backend's text pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningContext {
    pub prompt_text: String,
    pub conditioning_embedding: Vec<f32>,
}

/// Per-layer dense weight updates, already scaled and summed.
pub type LayerDeltas = BTreeMap<String, Tensor>;

/// Minimal interface to a noise-predicting diffusion model.
///
/// Implementations must treat their own weights as read-only: adapters arrive
/// per call as weight deltas and are never written into shared state.
pub trait DiffusionBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn device(&self) -> &Device;

    fn encode_text(&self, prompt: &str) -> ConditioningContext;

    /// Noise prediction for a `(B, C, H, W)` batch with per-element timesteps.
    /// `deltas` keys must be declared adapter target layers. The result is
    /// differentiable with respect to the delta tensors.
    fn predict_noise_with_deltas(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        ctx: &ConditioningContext,
        deltas: &LayerDeltas,
    ) -> Result<Tensor>;

    /// Latent to RGB in `[0, 1]` nominal range, without clamping so that
    /// gradients survive.
    fn decode_rgb(&self, latents: &Tensor) -> Result<Tensor>;

    /// Frozen base weight of a target layer.
    fn base_weight(&self, layer: &str) -> Result<Matrix>;

    /// Digest over every model weight.
    fn weights_checksum(&self) -> String;

    fn schedule(&self) -> &NoiseSchedule {
        &self.descriptor().schedule
    }
}

/// Builds per-layer deltas from adapter activations, checking every target layer.
pub fn adapter_deltas(
    backend: &dyn DiffusionBackend,
    activations: &[(&LowRankAdapter, f64)],
) -> Result<LayerDeltas> {
    let desc = backend.descriptor();
    let mut by_layer: BTreeMap<&str, Vec<(&LowRankAdapter, f64)>> = BTreeMap::new();
    for (a, s) in activations {
        desc.layer(&a.target_layer)?;
        by_layer.entry(a.target_layer.as_str()).or_default().push((a, *s));
    }
    let mut out = LayerDeltas::new();
    for (layer, acts) in by_layer {
        let spec = desc.layer(layer)?;
        if let Some(delta) = summed_delta(spec.shape, &acts)? {
            let data: Vec<f32> = delta.into_iter().map(|v| v as f32).collect();
            out.insert(
                layer.to_string(),
                Tensor::from_vec(data, spec.shape, backend.device())?,
            );
        }
    }
    Ok(out)
}

/// Deltas for whole sliders at the given scales.
pub fn slider_deltas(backend: &dyn DiffusionBackend, activations: &[(&Slider, f64)]) -> Result<LayerDeltas> {
    let flat: Vec<(&LowRankAdapter, f64)> = activations
        .iter()
        .flat_map(|(s, scale)| s.adapters.iter().map(move |a| (a, *scale)))
        .collect();
    adapter_deltas(backend, &flat)
}

/// Single-image noise prediction with a set of scaled adapters.
pub fn predict_noise(
    backend: &dyn DiffusionBackend,
    x_t: &LatentImage,
    t: usize,
    ctx: &ConditioningContext,
    activations: &[(&LowRankAdapter, f64)],
) -> Result<LatentImage> {
    let desc = backend.descriptor();
    desc.schedule.check_t(t)?;
    if x_t.shape() != desc.latent_shape {
        return Err(contract(format!(
            "latent shape {:?} does not match backend shape {:?}",
            x_t.shape(),
            desc.latent_shape
        )));
    }
    let deltas = adapter_deltas(backend, activations)?;
    let x = x_t.to_tensor(backend.device())?.unsqueeze(0)?;
    let eps = backend.predict_noise_with_deltas(&x, &[t], ctx, &deltas)?;
    LatentImage::from_tensor(&eps.squeeze(0)?)
}

/// Seeded standard-normal latent of shape `(1, C, H, W)`.
pub fn initial_noise(seed: u64, shape: [usize; 3], device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(data, (1, shape[0], shape[1], shape[2]), device)?)
}

/// Result of one sampler run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Clamped final sample `(B, C, H, W)`.
    pub final_latent: Tensor,
    /// `(t, x_t, x0_estimate)` for every harvested timestep, in trajectory order.
    pub harvested: Vec<(usize, Tensor, Tensor)>,
}

/// Deterministic sampler over `timesteps` (descending), starting from `x_start`.
///
/// `deltas_at(i)` supplies the adapter deltas for the i-th step, or `None` to
/// run that step on the base model. At each timestep listed in `harvest` the
/// final-image extrapolation of the current latent is recorded.
pub fn run_trajectory(
    backend: &dyn DiffusionBackend,
    x_start: &Tensor,
    ctx: &ConditioningContext,
    timesteps: &[usize],
    deltas_at: &dyn Fn(usize) -> Option<LayerDeltas>,
    harvest: &[usize],
) -> Result<Trajectory> {
    let schedule = backend.schedule();
    for t in harvest {
        if !timesteps.contains(t) {
            return Err(config(format!("harvest timestep {t} is not visited by the sampler")));
        }
    }
    let batch = x_start.dims()[0];
    let empty = LayerDeltas::new();
    let mut x = x_start.clone();
    let mut harvested = Vec::new();
    for (i, &t) in timesteps.iter().enumerate() {
        let ts = vec![t; batch];
        let deltas = deltas_at(i);
        let eps = backend.predict_noise_with_deltas(&x, &ts, ctx, deltas.as_ref().unwrap_or(&empty))?;
        let x0 = schedule.extrapolate_final_batch(&x, &eps, &ts)?;
        if harvest.contains(&t) {
            harvested.push((t, x.clone(), x0.clone()));
        }
        let x0 = x0.clamp(-1f32, 1f32)?;
        x = match timesteps.get(i + 1) {
            Some(&tp) => {
                let ab = schedule.alpha_bar(tp)?;
                ((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?
            }
            None => x0,
        };
    }
    Ok(Trajectory {
        final_latent: x.clamp(-1f32, 1f32)?,
        harvested,
    })
}

/// Registry of backends keyed by `backend_id`.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    inner: Arc<RwLock<HashMap<String, Arc<dyn DiffusionBackend>>>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, backend: Arc<dyn DiffusionBackend>) {
        let id = backend.descriptor().backend_id.clone();
        self.inner.write().expect("registry lock").insert(id, backend);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn DiffusionBackend>> {
        self.inner
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("backend '{id}' is not registered")))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.read().expect("registry lock").keys().cloned().collect();
        ids.sort();
        ids
    }
}
