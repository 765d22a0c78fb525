//! Slider training: one low-rank adapter per principal direction, optimized so
//! that the embedding shift it induces points along its direction.

use std::path::Path;
use std::time::Instant;

use candle_core::{Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, serialize_slider, InitPolicy, LowRankAdapter, Matrix, Slider};
use crate::backend::{ConditioningContext, DiffusionBackend, LayerDeltas};
use crate::encoder::SemanticEncoder;
use crate::error::{config, contract, Error, Result};
use crate::pca::PrincipalDirections;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMode {
    /// Cosine alignment of the embedding shift with a principal direction.
    #[default]
    SemanticSpace,
    /// The same alignment loss on decoded pixels, with directions fitted in pixel space.
    OutputSpace,
    /// Plain denoising loss on the concept's samples, no direction targets.
    CustomizationNoPca,
}

impl ObjectiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SemanticSpace => "semantic-space",
            Self::OutputSpace => "output-space",
            Self::CustomizationNoPca => "customization-no-pca",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Adapter strength during the adapter pass.
    pub train_scale: f64,
    pub rank: usize,
    pub epsilon_norm: f64,
    pub objective_mode: ObjectiveMode,
    /// Standard deviation of the initial `A` factor.
    pub init_std: f32,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    /// Write a checkpoint every `k` steps when a checkpoint directory is given.
    pub checkpoint_every: Option<usize>,
    /// Samples in the fixed batch used for the report's alignment statistics.
    pub report_samples: usize,
    /// Target layers; empty means every layer the backend declares.
    pub target_layers: Vec<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            learning_rate: 2.75e-3,
            train_scale: 1.0,
            rank: 1,
            epsilon_norm: 1e-8,
            objective_mode: ObjectiveMode::SemanticSpace,
            init_std: 1.0,
            max_grad_norm: Some(1.0),
            seed: 0,
            checkpoint_every: None,
            report_samples: 32,
            target_layers: Vec::new(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scale == 0.0 || !self.train_scale.is_finite() {
            return Err(config("train_scale must be finite and nonzero"));
        }
        if !(self.epsilon_norm > 0.0) {
            return Err(config("epsilon_norm must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.rank == 0 {
            return Err(config("steps, batch_size and rank must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(config("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Training data for one prompt: clean base-model samples that are re-noised
/// at random timesteps from the harvest subset.
#[derive(Debug, Clone)]
pub struct TrainingCorpus {
    pub ctx: ConditioningContext,
    /// `(M, C, H, W)` clean samples.
    pub clean: Tensor,
    pub timesteps: Vec<usize>,
}

impl TrainingCorpus {
    fn len(&self) -> usize {
        self.clean.dims()[0]
    }

    /// Forward-noised batch: `(x_t, ts, noise)`.
    fn draw(&self, rng: &mut ChaCha8Rng, batch: usize, schedule: &crate::schedule::NoiseSchedule) -> Result<(Tensor, Vec<usize>, Tensor)> {
        let idx: Vec<u32> = (0..batch).map(|_| rng.random_range(0..self.len()) as u32).collect();
        let ts: Vec<usize> = (0..batch)
            .map(|_| self.timesteps[rng.random_range(0..self.timesteps.len())])
            .collect();
        let x0 = self
            .clean
            .index_select(&Tensor::from_vec(idx, batch, self.clean.device())?, 0)?;
        let n = x0.elem_count();
        let noise: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let noise = Tensor::from_vec(noise, x0.dims(), x0.device())?;
        let x_t = schedule.forward_noise_batch(&x0, &noise, &ts)?;
        Ok((x_t, ts, noise))
    }
}

/// `1 - <delta, v> / max(|delta|, eps)`.
pub fn sliderspace_loss(delta_phi: &[f64], v: &[f64], epsilon_norm: f64) -> Result<f64> {
    if delta_phi.len() != v.len() {
        return Err(contract(format!(
            "delta has dimension {}, direction has {}",
            delta_phi.len(),
            v.len()
        )));
    }
    let dot: f64 = delta_phi.iter().zip(v).map(|(a, b)| a * b).sum();
    let norm = delta_phi.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(1.0 - dot / norm.max(epsilon_norm))
}

/// Gradient of [`sliderspace_loss`] with respect to `delta_phi`.
pub fn sliderspace_loss_grad(delta_phi: &[f64], v: &[f64], epsilon_norm: f64) -> Result<Vec<f64>> {
    if delta_phi.len() != v.len() {
        return Err(contract("delta and direction dimensions differ"));
    }
    let dot: f64 = delta_phi.iter().zip(v).map(|(a, b)| a * b).sum();
    let norm = delta_phi.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < epsilon_norm {
        return Ok(v.iter().map(|vi| -vi / epsilon_norm).collect());
    }
    let n3 = norm * norm * norm;
    Ok(delta_phi
        .iter()
        .zip(v)
        .map(|(d, vi)| -vi / norm + dot * d / n3)
        .collect())
}

/// Row-wise guarded cosine loss on `(B, D)` deltas against a `(D,)` direction.
fn cosine_loss_rows(delta: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor> {
    let dot = delta.broadcast_mul(&v.unsqueeze(0)?)?.sum(D::Minus1)?;
    // Clamp before the square root: sqrt has an infinite slope at zero, and
    // a freshly initialized slider produces exactly zero shift.
    let norm = delta
        .sqr()?
        .sum(D::Minus1)?
        .clamp((eps * eps) as f32, f32::MAX)?
        .sqrt()?;
    Ok((1.0 - dot.div(&norm)?)?)
}

/// Trainable state of one slider.
pub struct SliderParams {
    pub slider_id: String,
    layers: Vec<(String, Var, Var)>,
    trained_scale: f32,
}

impl SliderParams {
    pub fn init(
        slider_id: &str,
        backend: &dyn DiffusionBackend,
        config: &TrainingConfig,
        seed: u64,
    ) -> Result<Self> {
        let desc = backend.descriptor();
        let layers: Vec<String> = if config.target_layers.is_empty() {
            desc.adapter_target_layers.iter().map(|l| l.id.clone()).collect()
        } else {
            config.target_layers.clone()
        };
        let mut out = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let spec = desc.layer(layer)?;
            let adapter = init_adapter(
                &format!("{slider_id}.{layer}"),
                layer,
                spec.shape,
                config.rank,
                InitPolicy::new(config.init_std, seed.wrapping_add(i as u64)),
            )?;
            out.push((
                layer.clone(),
                Var::from_tensor(&adapter.b().to_tensor(backend.device())?)?,
                Var::from_tensor(&adapter.a().to_tensor(backend.device())?)?,
            ));
        }
        Ok(Self {
            slider_id: slider_id.to_string(),
            layers: out,
            trained_scale: config.train_scale as f32,
        })
    }

    fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|(_, b, a)| [b.clone(), a.clone()])
            .collect()
    }

    /// Differentiable deltas `scale * B A` per layer.
    pub fn deltas(&self, scale: f64) -> Result<LayerDeltas> {
        let mut out = LayerDeltas::new();
        for (layer, b, a) in &self.layers {
            out.insert(layer.clone(), (b.as_tensor().matmul(a.as_tensor())? * scale)?);
        }
        Ok(out)
    }

    pub fn to_slider(&self) -> Result<Slider> {
        let adapters = self
            .layers
            .iter()
            .map(|(layer, b, a)| {
                LowRankAdapter::new(
                    format!("{}.{layer}", self.slider_id),
                    layer.clone(),
                    Matrix::from_tensor(b.as_tensor())?,
                    Matrix::from_tensor(a.as_tensor())?,
                    self.trained_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Slider {
            id: self.slider_id.clone(),
            adapters,
        })
    }
}

/// Paired embedding shift for a batch: adapter pass minus base pass on the
/// same `x_t`, both pushed through final-image extrapolation, decoding and the
/// encoder. Returns `(B, D)`.
pub fn paired_delta_phi(
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    ctx: &ConditioningContext,
    x_t: &Tensor,
    ts: &[usize],
    deltas: &LayerDeltas,
) -> Result<Tensor> {
    let schedule = backend.schedule();
    let base_eps = backend
        .predict_noise_with_deltas(x_t, ts, ctx, &LayerDeltas::new())?
        .detach();
    let eps = backend.predict_noise_with_deltas(x_t, ts, ctx, deltas)?;
    let base_x0 = schedule.extrapolate_final_batch(x_t, &base_eps, ts)?;
    let x0 = schedule.extrapolate_final_batch(x_t, &eps, ts)?;
    let base_phi = encoder.embed_rgb_batch(&backend.decode_rgb(&base_x0)?)?.detach();
    let phi = encoder.embed_rgb_batch(&backend.decode_rgb(&x0)?)?;
    Ok(phi.sub(&base_phi)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: f64,
    pub applied: bool,
    pub grad_norm: f64,
}

/// One optimization step for one slider.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    params: &SliderParams,
    optimizer: &mut AdamW,
    direction: Option<&Tensor>,
    batch: (&Tensor, &[usize], &Tensor),
    ctx: &ConditioningContext,
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    config: &TrainingConfig,
) -> Result<StepOutcome> {
    let (x_t, ts, noise) = batch;
    let deltas = params.deltas(config.train_scale)?;
    let loss = match config.objective_mode {
        ObjectiveMode::SemanticSpace | ObjectiveMode::OutputSpace => {
            let v = direction.ok_or_else(|| contract("alignment objectives need a direction"))?;
            let delta = paired_delta_phi(backend, encoder, ctx, x_t, ts, &deltas)?;
            cosine_loss_rows(&delta, v, config.epsilon_norm)?.mean_all()?
        }
        ObjectiveMode::CustomizationNoPca => {
            let eps = backend.predict_noise_with_deltas(x_t, ts, ctx, &deltas)?;
            eps.sub(noise)?.sqr()?.mean_all()?
        }
    };
    let value = loss.to_scalar::<f32>()? as f64;
    if !value.is_finite() {
        log::warn!("slider {}: non-finite loss, step rejected", params.slider_id);
        return Ok(StepOutcome {
            loss: value,
            applied: false,
            grad_norm: f64::NAN,
        });
    }
    let mut grads = loss.backward()?;
    let vars = params.vars();
    let mut sq = 0.0f64;
    for v in &vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        log::warn!("slider {}: non-finite gradient, step rejected", params.slider_id);
        return Ok(StepOutcome {
            loss: value,
            applied: false,
            grad_norm,
        });
    }
    if let Some(cap) = config.max_grad_norm {
        if grad_norm > cap {
            let factor = cap / grad_norm;
            for v in &vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * factor)?);
                }
            }
        }
    }
    optimizer.step(&grads)?;
    Ok(StepOutcome {
        loss: value,
        applied: true,
        grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliderReport {
    pub slider_id: String,
    pub pc_index: usize,
    pub losses: Vec<f64>,
    pub rejected_steps: usize,
    pub diverged: bool,
    /// Mean of `cos(delta_phi, v)` over the report batch.
    pub final_alignment: f64,
    /// Mean `|delta_phi|` over the report batch.
    pub mean_delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub objective_mode: ObjectiveMode,
    pub sliders: Vec<SliderReport>,
    /// Per-sample `|cos(delta_phi_i, delta_phi_j)|` averaged over the report batch.
    pub pairwise_abs_cosine: Vec<Vec<f64>>,
    pub wall_clock_seconds: f64,
    pub backend_checksum: String,
}

impl TrainingReport {
    pub fn mean_alignment(&self) -> f64 {
        mean(self.sliders.iter().map(|s| s.final_alignment))
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.pairwise_abs_cosine.len();
        mean((0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| self.pairwise_abs_cosine[i][j]))
    }

    /// Mean diagonal alignment minus mean off-diagonal similarity.
    pub fn orthogonality_gap(&self) -> f64 {
        self.mean_alignment() - self.mean_off_diagonal()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Independent per-slider RNG stream.
pub fn slider_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Direction row `i` as a `(D,)` f32 tensor.
fn direction_tensor(directions: &PrincipalDirections, i: usize, device: &candle_core::Device) -> Result<Tensor> {
    let v: Vec<f32> = directions.component(i)?.iter().map(|x| *x as f32).collect();
    Ok(Tensor::from_vec(v, directions.dimension(), device)?)
}

/// Trains a single slider against direction `pc_index`.
#[allow(clippy::too_many_arguments)]
pub fn train_slider(
    slider_id: &str,
    pc_index: usize,
    directions: &PrincipalDirections,
    corpus: &TrainingCorpus,
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    config: &TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Slider, Vec<f64>, usize, bool)> {
    config.validate()?;
    if encoder.descriptor().dimension != directions.dimension() {
        return Err(contract(format!(
            "encoder dimension {} does not match direction dimension {}",
            encoder.descriptor().dimension,
            directions.dimension()
        )));
    }
    if config.objective_mode != ObjectiveMode::CustomizationNoPca && !encoder.descriptor().differentiable {
        return Err(Error::Capability(format!(
            "encoder '{}' is not differentiable",
            encoder.descriptor().encoder_id
        )));
    }
    let device = backend.device();
    let v = direction_tensor(directions, pc_index, device)?;
    let mut rng = slider_rng(config.seed, pc_index);
    let init_seed: u64 = rng.random();
    let params = SliderParams::init(slider_id, backend, config, init_seed)?;
    let mut opt = AdamW::new(
        params.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let schedule = backend.schedule().clone();
    let mut losses = Vec::with_capacity(config.steps);
    let mut rejected = 0usize;
    let mut consecutive = 0usize;
    let mut diverged = false;
    for step in 0..config.steps {
        let (x_t, ts, noise) = corpus.draw(&mut rng, config.batch_size, &schedule)?;
        let out = training_step(
            &params,
            &mut opt,
            Some(&v),
            (&x_t, &ts, &noise),
            &corpus.ctx,
            backend,
            encoder,
            config,
        )?;
        losses.push(out.loss);
        if out.applied {
            consecutive = 0;
        } else {
            rejected += 1;
            consecutive += 1;
            if consecutive >= 10 {
                diverged = true;
                log::warn!("slider {slider_id} diverged at step {step}");
                break;
            }
        }
        if let (Some(k), Some(dir)) = (config.checkpoint_every, checkpoint_dir) {
            if k > 0 && (step + 1) % k == 0 {
                std::fs::create_dir_all(dir)?;
                let bytes = serialize_slider(&params.to_slider()?)?;
                std::fs::write(dir.join(format!("{slider_id}.step{:06}.sstr", step + 1)), bytes)?;
            }
        }
    }
    Ok((params.to_slider()?, losses, rejected, diverged))
}

/// Trains one slider per principal direction and reports alignment statistics.
pub fn train_sliderspace(
    directions: &PrincipalDirections,
    corpus: &TrainingCorpus,
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    config: &TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Vec<Slider>, TrainingReport)> {
    config.validate()?;
    if corpus.timesteps.is_empty() || corpus.len() == 0 {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let checksum_before = backend.weights_checksum();
    let started = Instant::now();
    let mut sliders = Vec::with_capacity(directions.n());
    let mut reports = Vec::with_capacity(directions.n());
    for i in 0..directions.n() {
        let id = slider_id(i);
        let (slider, losses, rejected, diverged) =
            train_slider(&id, i, directions, corpus, backend, encoder, config, checkpoint_dir)?;
        log::info!(
            "slider {id}: final loss {:.4}",
            losses.last().copied().unwrap_or(f64::NAN)
        );
        sliders.push(slider);
        reports.push(SliderReport {
            slider_id: id,
            pc_index: i,
            losses,
            rejected_steps: rejected,
            diverged,
            final_alignment: 0.0,
            mean_delta_norm: 0.0,
        });
    }
    let (alignment, norms, pairwise) = alignment_statistics(&sliders, directions, corpus, backend, encoder, config)?;
    for ((r, a), n) in reports.iter_mut().zip(alignment).zip(norms) {
        r.final_alignment = a;
        r.mean_delta_norm = n;
    }
    if backend.weights_checksum() != checksum_before {
        return Err(contract("backend weights changed during slider training"));
    }
    Ok((
        sliders,
        TrainingReport {
            objective_mode: config.objective_mode,
            sliders: reports,
            pairwise_abs_cosine: pairwise,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            backend_checksum: checksum_before,
        },
    ))
}

/// Runs [`train_sliderspace`] with an ablation objective.
pub fn train_variant(
    mode: ObjectiveMode,
    directions: &PrincipalDirections,
    corpus: &TrainingCorpus,
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    config: &TrainingConfig,
) -> Result<(Vec<Slider>, TrainingReport)> {
    let cfg = TrainingConfig {
        objective_mode: mode,
        ..config.clone()
    };
    train_sliderspace(directions, corpus, backend, encoder, &cfg, None)
}

pub fn slider_id(index: usize) -> String {
    format!("slider-{index:03}")
}

/// Evaluates every slider on one fixed report batch: alignment with its own
/// direction, mean shift norm, and per-sample pairwise `|cos|` between sliders.
pub fn alignment_statistics(
    sliders: &[Slider],
    directions: &PrincipalDirections,
    corpus: &TrainingCorpus,
    backend: &dyn DiffusionBackend,
    encoder: &dyn SemanticEncoder,
    config: &TrainingConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_4e90_47a1);
    let (x_t, ts, _) = corpus.draw(&mut rng, config.report_samples.max(1), backend.schedule())?;
    let mut deltas: Vec<Vec<Vec<f64>>> = Vec::with_capacity(sliders.len());
    for slider in sliders {
        let acts: Vec<(&Slider, f64)> = vec![(slider, config.train_scale)];
        let d = crate::backend::slider_deltas(backend, &acts)?;
        let delta = paired_delta_phi(backend, encoder, &corpus.ctx, &x_t, &ts, &d)?;
        let rows: Vec<Vec<f64>> = delta
            .to_vec2::<f32>()?
            .into_iter()
            .map(|r| r.into_iter().map(f64::from).collect())
            .collect();
        deltas.push(rows);
    }
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (dot / (na.max(config.epsilon_norm) * nb.max(config.epsilon_norm))).clamp(-1.0, 1.0)
    };
    let mut alignment = Vec::with_capacity(sliders.len());
    let mut norms = Vec::with_capacity(sliders.len());
    for (i, rows) in deltas.iter().enumerate() {
        let v = directions.component(i.min(directions.n() - 1))?;
        alignment.push(mean(rows.iter().map(|r| cos(r, v))));
        norms.push(mean(rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())));
    }
    let n = sliders.len();
    let mut pairwise = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            pairwise[i][j] = mean(deltas[i].iter().zip(&deltas[j]).map(|(a, b)| cos(a, b).abs()));
        }
    }
    Ok((alignment, norms, pairwise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loss_fixtures() {
        let v = [0.6, 0.8];
        assert_eq!(sliderspace_loss(&v, &v, 1e-8).unwrap(), 0.0);
        assert_eq!(sliderspace_loss(&[-0.6, -0.8], &v, 1e-8).unwrap(), 2.0);
        assert_eq!(sliderspace_loss(&[0.8, -0.6], &v, 1e-8).unwrap(), 1.0);
        assert_eq!(sliderspace_loss(&[0.0, 0.0], &v, 1e-8).unwrap(), 1.0);
        assert!(sliderspace_loss(&[1.0], &v, 1e-8).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainingConfig::default();
        assert!(c.validate().is_ok());
        c.train_scale = 0.0;
        assert!(c.validate().is_err());
        c = TrainingConfig {
            epsilon_norm: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn tensor_loss_matches_scalar() {
        let dev = candle_core::Device::Cpu;
        let rows = [[0.3f32, -1.2, 0.5], [0.0, 0.0, 0.0]];
        let v = [0.0f64, 0.6, 0.8];
        let t = Tensor::new(&rows, &dev).unwrap();
        let vt = Tensor::new(&[0.0f32, 0.6, 0.8], &dev).unwrap();
        let got = cosine_loss_rows(&t, &vt, 1e-8).unwrap().to_vec1::<f32>().unwrap();
        for (r, g) in rows.iter().zip(got) {
            let d: Vec<f64> = r.iter().map(|x| *x as f64).collect();
            assert!((sliderspace_loss(&d, &v, 1e-8).unwrap() - g as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_is_finite_at_zero_shift() {
        let dev = candle_core::Device::Cpu;
        let delta = candle_core::Var::from_tensor(&Tensor::zeros((2, 3), candle_core::DType::F32, &dev).unwrap()).unwrap();
        let v = Tensor::new(&[0.0f32, 0.6, 0.8], &dev).unwrap();
        let loss = cosine_loss_rows(delta.as_tensor(), &v, 1e-8).unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(delta.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            ObjectiveMode::SemanticSpace,
            ObjectiveMode::OutputSpace,
            ObjectiveMode::CustomizationNoPca,
        ] {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s, format!("\"{}\"", m.as_str()));
            assert_eq!(serde_json::from_str::<ObjectiveMode>(&s).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn loss_in_range(d in proptest::collection::vec(-5.0f64..5.0, 4), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            let l = sliderspace_loss(&d, &v, 1e-8).unwrap();
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        }
    }
}
