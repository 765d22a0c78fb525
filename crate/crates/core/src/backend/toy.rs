//! Pixel-space toy denoiser trained on the synthetic shapes dataset.
//!
//! The network is a small residual MLP over the flattened 3x32x32 image. The
//! prompt enters through two conditioning projections (`cond_proj.0`,
//! `cond_proj.1`), which are the layers exposed to low-rank adapters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BackendDescriptor, ConditioningContext, DiffusionBackend, LayerDeltas, LayerSpec};
use crate::adapter::Matrix;
use crate::error::{config as config_error, contract, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::shapes::{self, CaptionMask, ShapeFactors, CANVAS, CHANNELS, HUE_MAX};
use crate::tensor_file::{sha256_hex, TensorFile, TensorRecord};

pub const TOY_BACKEND_ID: &str = "toy-shapes";
pub const COND_DIM: usize = 10;
pub const TIME_DIM: usize = 32;
pub const COND_LAYERS: [&str; 2] = ["cond_proj.0", "cond_proj.1"];
const PIXELS: usize = CHANNELS * CANVAS * CANVAS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackendConfig {
    pub hidden: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub validation_size: usize,
    /// Training fails when the final validation noise MSE exceeds this.
    pub validation_threshold: f64,
    /// Probability that a caption mentions each factor.
    pub caption_probability: f64,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            train_steps: 3000,
            batch_size: 64,
            learning_rate: 2e-3,
            seed: 0,
            validation_size: 256,
            validation_threshold: 0.25,
            caption_probability: 0.5,
        }
    }
}

impl ToyBackendConfig {
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))[..16].to_string()
    }
}

/// Maps prompt vocabulary to the fixed conditioning vector.
///
/// Layout: `[bias, has_color, hue, circle, square, diamond, has_size, size, has_bg, bg]`
/// with continuous entries rescaled to `[-1, 1]`.
pub fn toy_conditioning(prompt: &str) -> Vec<f32> {
    let t = shapes::parse_prompt(prompt);
    let mut c = vec![0.0f32; COND_DIM];
    c[0] = 1.0;
    if let Some(h) = t.hue {
        c[1] = 1.0;
        c[2] = 2.0 * h / HUE_MAX - 1.0;
    }
    if let Some(s) = t.shape {
        c[3 + s.index()] = 1.0;
    }
    if let Some(s) = t.size {
        c[6] = 1.0;
        c[7] = 2.0 * s - 1.0;
    }
    if let Some(b) = t.background {
        c[8] = 1.0;
        c[9] = 2.0 * b - 1.0;
    }
    c
}

fn time_embedding(ts: &[usize], total: usize, device: &Device) -> Result<Tensor> {
    let half = TIME_DIM / 2;
    let mut data = Vec::with_capacity(ts.len() * TIME_DIM);
    for &t in ts {
        let pos = t as f32 / total as f32 * 100.0;
        for i in 0..half {
            let freq = (-(i as f32) / half as f32 * 8f32.ln()).exp();
            data.push((pos * freq).sin());
        }
        for i in 0..half {
            let freq = (-(i as f32) / half as f32 * 8f32.ln()).exp();
            data.push((pos * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), TIME_DIM), device)?)
}

struct Params<'a> {
    get: &'a dyn Fn(&str) -> Result<Tensor>,
}

/// Variance assumed for clean latents when preconditioning the skip path.
const DATA_VARIANCE: f64 = 0.5;
/// Signal-to-noise cap for the training loss weight.
const MIN_SNR_GAMMA: f64 = 5.0;

/// Per-element `(B, 1)` coefficients derived from `alpha_bar`.
fn coefficients(schedule: &NoiseSchedule, ts: &[usize], f: impl Fn(f64) -> f64, device: &Device) -> Result<Tensor> {
    let vals = ts
        .iter()
        .map(|&t| schedule.alpha_bar(t).map(|ab| f(ab) as f32))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_vec(vals, (ts.len(), 1), device)?)
}

/// The network estimates the clean image as a preconditioned skip of `x_t`
/// plus a learned residual; the noise prediction follows from the forward
/// process in closed form.
fn forward(
    p: &Params,
    x_t: &Tensor,
    ts: &[usize],
    schedule: &NoiseSchedule,
    cond: &Tensor,
    deltas: &LayerDeltas,
) -> Result<Tensor> {
    let (b, c, h, w) = x_t.dims4()?;
    let dev = x_t.device();
    let x = x_t.reshape((b, c * h * w))?;
    let temb = time_embedding(ts, schedule.num_steps(), dev)?;
    let cond_weight = |name: &str| -> Result<Tensor> {
        let base = (p.get)(name)?;
        Ok(match deltas.get(name) {
            Some(d) => base.add(d)?,
            None => base,
        })
    };
    let c0 = cond.matmul(&cond_weight(COND_LAYERS[0])?.t()?)?;
    let h1 = x
        .matmul(&(p.get)("input_proj")?.t()?)?
        .add(&temb.matmul(&(p.get)("time_proj")?.t()?)?)?
        .broadcast_add(&c0)?
        .broadcast_add(&(p.get)("bias.0")?)?
        .silu()?;
    let c1 = cond.matmul(&cond_weight(COND_LAYERS[1])?.t()?)?;
    let h2 = h1
        .matmul(&(p.get)("hidden.0")?.t()?)?
        .broadcast_add(&c1)?
        .broadcast_add(&(p.get)("bias.1")?)?
        .silu()?
        .add(&h1)?;
    let residual = h2
        .matmul(&(p.get)("output_proj")?.t()?)?
        .broadcast_add(&(p.get)("output_bias")?)?;
    let skip = coefficients(
        schedule,
        ts,
        |ab| ab.sqrt() * DATA_VARIANCE / (ab * DATA_VARIANCE + 1.0 - ab),
        dev,
    )?;
    let x0 = x.broadcast_mul(&skip)?.add(&residual)?;
    let signal = coefficients(schedule, ts, |ab| ab.sqrt(), dev)?;
    let inv_noise = coefficients(schedule, ts, |ab| 1.0 / (1.0 - ab).sqrt(), dev)?;
    let eps = x.sub(&x0.broadcast_mul(&signal)?)?.broadcast_mul(&inv_noise)?;
    Ok(eps.reshape((b, c, h, w))?)
}

fn parameter_shapes(hidden: usize) -> Vec<(&'static str, Vec<usize>, f64)> {
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    vec![
        ("input_proj", vec![hidden, PIXELS], fan(PIXELS)),
        ("time_proj", vec![hidden, TIME_DIM], fan(TIME_DIM)),
        (COND_LAYERS[0], vec![hidden, COND_DIM], fan(COND_DIM)),
        ("bias.0", vec![hidden], 0.0),
        ("hidden.0", vec![hidden, hidden], fan(hidden)),
        (COND_LAYERS[1], vec![hidden, COND_DIM], fan(COND_DIM)),
        ("bias.1", vec![hidden], 0.0),
        ("output_proj", vec![PIXELS, hidden], fan(hidden) * 0.1),
        ("output_bias", vec![PIXELS], 0.0),
    ]
}

/// Trained toy denoiser with its descriptor.
#[derive(Debug)]
pub struct ToyBackend {
    descriptor: BackendDescriptor,
    device: Device,
    weights: BTreeMap<String, Tensor>,
    config: ToyBackendConfig,
    validation_loss: f64,
    checksum: String,
}

/// One batch of training data: clean latents, noise, timesteps and prompts.
struct Batch {
    x0: Tensor,
    noise: Tensor,
    ts: Vec<usize>,
    cond: Tensor,
}

fn make_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    total_steps: usize,
    caption_p: f64,
    device: &Device,
) -> Result<Batch> {
    let mut x0 = Vec::with_capacity(n * PIXELS);
    let mut cond = Vec::with_capacity(n * COND_DIM);
    let mut ts = Vec::with_capacity(n);
    for _ in 0..n {
        let f = ShapeFactors::sample(rng);
        x0.extend(shapes::rgb_to_latent(&shapes::render(&f)));
        let mask = CaptionMask::sample(rng, caption_p);
        cond.extend(toy_conditioning(&shapes::caption(&f, mask)));
        ts.push(rng.random_range(0..total_steps));
    }
    let noise: Vec<f32> = (0..n * PIXELS).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Batch {
        x0: Tensor::from_vec(x0, (n, CHANNELS, CANVAS, CANVAS), device)?,
        noise: Tensor::from_vec(noise, (n, CHANNELS, CANVAS, CANVAS), device)?,
        ts,
        cond: Tensor::from_vec(cond, (n, COND_DIM), device)?,
    })
}

impl ToyBackend {
    pub fn descriptor_for(config: &ToyBackendConfig) -> BackendDescriptor {
        BackendDescriptor {
            backend_id: TOY_BACKEND_ID.to_string(),
            latent_shape: [CHANNELS, CANVAS, CANVAS],
            adapter_target_layers: COND_LAYERS
                .iter()
                .map(|id| LayerSpec {
                    id: id.to_string(),
                    shape: (config.hidden, COND_DIM),
                })
                .collect(),
            schedule: NoiseSchedule::toy_default(),
        }
    }

    /// Trains the denoiser from scratch. Deterministic for a fixed config.
    pub fn train(config: ToyBackendConfig) -> Result<Self> {
        if config.hidden == 0 || config.batch_size == 0 || config.validation_size == 0 {
            return Err(config_error("hidden, batch_size and validation_size must be positive"));
        }
        let device = Device::Cpu;
        let descriptor = Self::descriptor_for(&config);
        let total = descriptor.schedule.num_steps();
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut vars: BTreeMap<String, Var> = BTreeMap::new();
        for (name, shape, std) in parameter_shapes(config.hidden) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut init_rng);
                    z * std as f32
                })
                .collect();
            vars.insert(name.to_string(), Var::from_tensor(&Tensor::from_vec(data, shape, &device)?)?);
        }
        let mut opt = AdamW::new(
            vars.values().cloned().collect(),
            ParamsAdamW {
                lr: config.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
        let val = make_batch(&mut val_rng, config.validation_size, total, config.caption_probability, &device)?;
        let schedule = descriptor.schedule.clone();
        let no_deltas = LayerDeltas::new();
        let mut recent = Vec::new();
        for step in 0..config.train_steps {
            let progress = step as f64 / config.train_steps.max(1) as f64;
            opt.set_learning_rate(
                config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())),
            );
            let b = make_batch(&mut data_rng, config.batch_size, total, config.caption_probability, &device)?;
            let x_t = schedule.forward_noise_batch(&b.x0, &b.noise, &b.ts)?;
            let get = |name: &str| -> Result<Tensor> {
                vars.get(name)
                    .map(|v| v.as_tensor().clone())
                    .ok_or_else(|| contract(format!("missing parameter {name}")))
            };
            let pred = forward(&Params { get: &get }, &x_t, &b.ts, &schedule, &b.cond, &no_deltas)?;
            let weight = coefficients(&schedule, &b.ts, |ab| (MIN_SNR_GAMMA * (1.0 - ab) / ab).min(1.0), &device)?;
            let loss = (pred - &b.noise)?
                .sqr()?
                .flatten_from(1)?
                .mean(1)?
                .unsqueeze(1)?
                .mul(&weight)?
                .mean_all()?;
            opt.backward_step(&loss)?;
            let l = loss.to_scalar::<f32>()? as f64;
            if !l.is_finite() {
                return Err(Error::Training(format!("toy backend loss diverged at step {step}")));
            }
            recent.push(l);
            if step % 500 == 0 {
                log::debug!("toy backend step {step}: loss {l:.4}");
            }
        }
        let weights: BTreeMap<String, Tensor> = vars
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().detach()))
            .collect();
        let mut backend = Self {
            descriptor,
            device,
            checksum: String::new(),
            weights,
            config,
            validation_loss: f64::NAN,
        };
        backend.checksum = backend.compute_checksum()?;
        let x_t = schedule.forward_noise_batch(&val.x0, &val.noise, &val.ts)?;
        let pred = backend.forward_cond(&x_t, &val.ts, &val.cond, &no_deltas)?;
        backend.validation_loss = (pred - &val.noise)?.sqr()?.mean_all()?.to_scalar::<f32>()? as f64;
        if !(backend.validation_loss <= backend.config.validation_threshold) {
            let tail: Vec<f64> = recent.iter().rev().take(5).copied().collect();
            return Err(Error::Training(format!(
                "toy backend did not converge: validation MSE {:.4} > threshold {:.4} after {} steps (last losses {:?})",
                backend.validation_loss, backend.config.validation_threshold, backend.config.train_steps, tail
            )));
        }
        Ok(backend)
    }

    /// Loads a cached model for this config from `cache_dir`, training and
    /// caching it when absent.
    pub fn load_or_train(config: ToyBackendConfig, cache_dir: &Path) -> Result<Self> {
        let path = Self::cache_path(&config, cache_dir);
        if path.exists() {
            match Self::load(&path) {
                Ok(b) if b.config == config => return Ok(b),
                Ok(_) => log::warn!("cached toy backend at {} has a different config", path.display()),
                Err(e) => log::warn!("ignoring unreadable toy backend cache {}: {e}", path.display()),
            }
        }
        let backend = Self::train(config)?;
        std::fs::create_dir_all(cache_dir)?;
        let tmp = path.with_extension("tmp");
        backend.save(&tmp)?;
        std::fs::rename(&tmp, &path)?;
        Ok(backend)
    }

    pub fn cache_path(config: &ToyBackendConfig, cache_dir: &Path) -> PathBuf {
        cache_dir.join(format!("toy-backend-{}.sstr", config.digest()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records = self
            .weights
            .iter()
            .map(|(name, t)| -> Result<TensorRecord> {
                Ok(TensorRecord::f32(name.clone(), t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?))
            })
            .collect::<Result<Vec<_>>>()?;
        let file = TensorFile {
            metadata: serde_json::json!({
                "backend_id": TOY_BACKEND_ID,
                "config": self.config,
                "validation_loss": self.validation_loss,
            }),
            records,
        };
        std::fs::write(path, file.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::from_bytes(&std::fs::read(path)?)?;
        let config: ToyBackendConfig = serde_json::from_value(file.metadata["config"].clone())
            .map_err(|e| Error::Parse(format!("toy backend config: {e}")))?;
        let validation_loss = file.metadata["validation_loss"].as_f64().unwrap_or(f64::NAN);
        let device = Device::Cpu;
        let mut weights = BTreeMap::new();
        for (name, shape, _) in parameter_shapes(config.hidden) {
            let rec = file.require(name)?;
            if rec.shape != shape {
                return Err(Error::Parse(format!("{name}: shape {:?}, expected {shape:?}", rec.shape)));
            }
            weights.insert(name.to_string(), Tensor::from_vec(rec.data.to_f32(), shape, &device)?);
        }
        let mut backend = Self {
            descriptor: Self::descriptor_for(&config),
            device,
            weights,
            config,
            validation_loss,
            checksum: String::new(),
        };
        backend.checksum = backend.compute_checksum()?;
        Ok(backend)
    }

    pub fn config(&self) -> &ToyBackendConfig {
        &self.config
    }

    pub fn validation_loss(&self) -> f64 {
        self.validation_loss
    }

    fn compute_checksum(&self) -> Result<String> {
        let mut bytes = Vec::new();
        for (name, t) in &self.weights {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(sha256_hex(&bytes))
    }

    fn forward_cond(&self, x_t: &Tensor, ts: &[usize], cond: &Tensor, deltas: &LayerDeltas) -> Result<Tensor> {
        let get = |name: &str| -> Result<Tensor> {
            self.weights
                .get(name)
                .cloned()
                .ok_or_else(|| contract(format!("missing parameter {name}")))
        };
        forward(
            &Params { get: &get },
            x_t,
            ts,
            &self.descriptor.schedule,
            cond,
            deltas,
        )
    }
}

impl DiffusionBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn encode_text(&self, prompt: &str) -> ConditioningContext {
        ConditioningContext {
            prompt_text: prompt.to_string(),
            conditioning_embedding: toy_conditioning(prompt),
        }
    }

    fn predict_noise_with_deltas(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        ctx: &ConditioningContext,
        deltas: &LayerDeltas,
    ) -> Result<Tensor> {
        let dims = x_t.dims();
        if dims.len() != 4 || dims[1..] != self.descriptor.latent_shape {
            return Err(contract(format!(
                "expected (B, {:?}) latents, got {dims:?}",
                self.descriptor.latent_shape
            )));
        }
        if dims[0] != ts.len() {
            return Err(contract(format!("{} timesteps for a batch of {}", ts.len(), dims[0])));
        }
        for t in ts {
            self.descriptor.schedule.check_t(*t)?;
        }
        for (layer, d) in deltas {
            let spec = self.descriptor.layer(layer)?;
            if d.dims() != [spec.shape.0, spec.shape.1] {
                return Err(contract(format!(
                    "delta for '{layer}' has shape {:?}, layer is {:?}",
                    d.dims(),
                    spec.shape
                )));
            }
        }
        if ctx.conditioning_embedding.len() != COND_DIM {
            return Err(contract("conditioning vector has the wrong length"));
        }
        let cond = Tensor::from_slice(&ctx.conditioning_embedding, (1, COND_DIM), &self.device)?;
        self.forward_cond(x_t, ts, &cond, deltas)
    }

    fn decode_rgb(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(((latents + 1.0)? * 0.5)?)
    }

    fn base_weight(&self, layer: &str) -> Result<Matrix> {
        self.descriptor.layer(layer)?;
        Matrix::from_tensor(&self.weights[layer])
    }

    fn weights_checksum(&self) -> String {
        self.checksum.clone()
    }
}
