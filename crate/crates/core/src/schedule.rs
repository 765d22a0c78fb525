//! Discrete noise schedule and the closed-form update rules built on it.
//!
//! Single-image operations work on [`LatentImage`] and evaluate the update
//! formulas in `f64` before rounding back to `f32`. Batched variants operate on
//! candle tensors of shape `(B, C, H, W)` and are what the sampler and trainer
//! use.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};

/// Per-step `alpha_t` values and their running products `alpha_bar_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(config("noise schedule needs at least one step"));
        }
        if let Some((t, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0 && **a <= 1.0))
        {
            return Err(config(format!("alpha[{t}] = {a} is outside (0, 1]")));
        }
        let alpha_bar = alpha
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alpha, alpha_bar })
    }

    /// Betas spaced linearly between `beta_start` and `beta_end`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(config("noise schedule needs at least one step"));
        }
        let alphas = (0..num_steps)
            .map(|i| {
                let frac = if num_steps == 1 {
                    0.0
                } else {
                    i as f64 / (num_steps - 1) as f64
                };
                1.0 - (beta_start + frac * (beta_end - beta_start))
            })
            .collect();
        Self::from_alphas(alphas)
    }

    /// The schedule shipped with the toy backend: 50 steps, betas from 1e-3 to 0.2.
    pub fn toy_default() -> Self {
        Self::linear(50, 1e-3, 0.2).expect("static schedule is valid")
    }

    pub fn num_steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(contract(format!(
                "timestep {t} outside [0, {})",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// One reverse step: `x_{t-1} = (x_t - sqrt(1 - alpha_t) * eps) / sqrt(alpha_t)`.
    pub fn denoise_step(&self, x_t: &LatentImage, eps: &LatentImage, t: usize) -> Result<LatentImage> {
        let a = self.alpha(t)?;
        x_t.zip_map(eps, |x, e| (x - (1.0 - a).sqrt() * e) / a.sqrt())
    }

    /// Final image extrapolation:
    /// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)`.
    pub fn extrapolate_final(
        &self,
        x_t: &LatentImage,
        eps: &LatentImage,
        t: usize,
    ) -> Result<LatentImage> {
        let ab = self.alpha_bar(t)?;
        x_t.zip_map(eps, |x, e| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
    }

    /// Closed-form forward process `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
    pub fn forward_noise(&self, x0: &LatentImage, t: usize, noise: &LatentImage) -> Result<LatentImage> {
        let ab = self.alpha_bar(t)?;
        x0.zip_map(noise, |x, n| ab.sqrt() * x + (1.0 - ab).sqrt() * n)
    }

    /// Deterministic (eta = 0) sampler step from `t` to `t_prev`, or to the
    /// clean image when `t_prev` is `None`. The intermediate x0 estimate is
    /// clamped to `clip` when given.
    pub fn ddim_step(
        &self,
        x_t: &LatentImage,
        eps: &LatentImage,
        t: usize,
        t_prev: Option<usize>,
        clip: Option<(f32, f32)>,
    ) -> Result<LatentImage> {
        let x0 = self.extrapolate_final(x_t, eps, t)?;
        let x0 = match clip {
            Some((lo, hi)) => x0.map(|v| v.clamp(lo as f64, hi as f64)),
            None => x0,
        };
        let ab_prev = match t_prev {
            Some(tp) => self.alpha_bar(tp)?,
            None => 1.0,
        };
        x0.zip_map(eps, |x, e| ab_prev.sqrt() * x + (1.0 - ab_prev).sqrt() * e)
    }

    /// Evenly spaced descending timesteps used by a `num_steps` sampler run.
    pub fn inference_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        let total = self.num_steps();
        if num_steps == 0 || num_steps > total {
            return Err(config(format!(
                "inference steps {num_steps} must lie in [1, {total}]"
            )));
        }
        if num_steps == 1 {
            return Ok(vec![total - 1]);
        }
        Ok((0..num_steps)
            .map(|i| {
                let pos = (num_steps - 1 - i) as f64 * (total - 1) as f64 / (num_steps - 1) as f64;
                pos.round() as usize
            })
            .collect())
    }

    /// Evenly spaced subset of `count` timesteps within the middle 80% of the schedule.
    pub fn middle_subset(&self, count: usize) -> Vec<usize> {
        let total = self.num_steps();
        if count == 0 {
            return Vec::new();
        }
        let lo = (0.1 * total as f64).floor();
        let hi = (0.9 * total as f64).ceil().min(total as f64 - 1.0);
        let mut out: Vec<usize> = (0..count)
            .map(|i| {
                let frac = if count == 1 { 0.5 } else { i as f64 / (count - 1) as f64 };
                (lo + frac * (hi - lo)).round() as usize
            })
            .collect();
        out.dedup();
        out
    }

    fn coefficient_tensor(
        &self,
        ts: &[usize],
        f: impl Fn(f64) -> f64,
        device: &Device,
    ) -> Result<Tensor> {
        let vals = ts
            .iter()
            .map(|&t| self.alpha_bar(t).map(|ab| f(ab) as f32))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_vec(vals, (ts.len(), 1, 1, 1), device)?)
    }

    /// Batched extrapolation over `(B, C, H, W)` tensors with per-element timesteps.
    pub fn extrapolate_final_batch(&self, x_t: &Tensor, eps: &Tensor, ts: &[usize]) -> Result<Tensor> {
        check_batch(x_t, eps, ts)?;
        let dev = x_t.device();
        let noise_coef = self.coefficient_tensor(ts, |ab| (1.0 - ab).sqrt(), dev)?;
        let inv_signal = self.coefficient_tensor(ts, |ab| 1.0 / ab.sqrt(), dev)?;
        let out = x_t
            .broadcast_sub(&eps.broadcast_mul(&noise_coef)?)?
            .broadcast_mul(&inv_signal)?;
        Ok(out)
    }

    /// Batched forward process over `(B, C, H, W)` tensors with per-element timesteps.
    pub fn forward_noise_batch(&self, x0: &Tensor, noise: &Tensor, ts: &[usize]) -> Result<Tensor> {
        check_batch(x0, noise, ts)?;
        let dev = x0.device();
        let signal = self.coefficient_tensor(ts, |ab| ab.sqrt(), dev)?;
        let noise_coef = self.coefficient_tensor(ts, |ab| (1.0 - ab).sqrt(), dev)?;
        Ok(x0
            .broadcast_mul(&signal)?
            .add(&noise.broadcast_mul(&noise_coef)?)?)
    }
}

fn check_batch(a: &Tensor, b: &Tensor, ts: &[usize]) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(contract(format!(
            "shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.rank() != 4 || a.dims()[0] != ts.len() {
        return Err(contract(format!(
            "expected (B, C, H, W) with B = {}, got {:?}",
            ts.len(),
            a.dims()
        )));
    }
    Ok(())
}

/// A single image-shaped tensor `(channels, height, width)` with a declared value range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentImage {
    shape: [usize; 3],
    data: Vec<f32>,
    value_range: (f32, f32),
}

impl LatentImage {
    pub const DEFAULT_RANGE: (f32, f32) = (-1.0, 1.0);

    pub fn new(shape: [usize; 3], data: Vec<f32>, value_range: (f32, f32)) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(contract(format!(
                "latent of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!("non-finite latent entry at {i}")));
        }
        Ok(Self {
            shape,
            data,
            value_range,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
            value_range: Self::DEFAULT_RANGE,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        let shape = match dims {
            [c, h, w] => [*c, *h, *w],
            [1, c, h, w] => [*c, *h, *w],
            _ => return Err(contract(format!("expected (C, H, W) tensor, got {dims:?}"))),
        };
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(shape, data, Self::DEFAULT_RANGE)
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.to_vec(), device)?)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn value_range(&self) -> (f32, f32) {
        self.value_range
    }

    pub fn clamped(&self) -> Self {
        let (lo, hi) = self.value_range;
        Self {
            shape: self.shape,
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
            value_range: self.value_range,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mse(&self, other: &Self) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / n
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v as f64) as f32).collect(),
            value_range: self.value_range,
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(contract(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a as f64, b as f64) as f32)
            .collect();
        Self::new(self.shape, data, self.value_range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> LatentImage {
        LatentImage::new([1, 1, 1], vec![v], (-10.0, 10.0)).unwrap()
    }

    fn sched(alphas: &[f64]) -> NoiseSchedule {
        NoiseSchedule::from_alphas(alphas.to_vec()).unwrap()
    }

    #[test]
    fn alpha_bar_is_running_product() {
        let s = NoiseSchedule::toy_default();
        let mut acc = 1.0;
        for t in 0..s.num_steps() {
            acc *= s.alpha(t).unwrap();
            assert!((s.alpha_bar(t).unwrap() - acc).abs() < 1e-15);
            if t > 0 {
                assert!(s.alpha_bar(t).unwrap() <= s.alpha_bar(t - 1).unwrap());
            }
        }
        assert!(s.alpha_bars().iter().all(|a| *a > 0.0));
    }

    #[test]
    fn rejects_invalid_alphas() {
        assert!(NoiseSchedule::from_alphas(vec![]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![0.5, 0.0]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.2]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![f64::NAN]).is_err());
    }

    #[test]
    fn denoise_step_scalar() {
        let s = sched(&[0.81]);
        let out = s.denoise_step(&scalar(1.0), &scalar(0.5), 0).unwrap();
        let expected = (1.0 - 0.19f64.sqrt() * 0.5) / 0.9;
        assert!((out.data()[0] as f64 - expected).abs() < 1e-6);
        // Hand evaluation: 0.78206 / 0.9 = 0.868950.
        assert!((out.data()[0] - 0.868_950).abs() < 1e-5);
    }

    #[test]
    fn denoise_step_identity_and_zero_noise() {
        let s = sched(&[1.0, 0.64]);
        let x = scalar(0.7);
        assert_eq!(s.denoise_step(&x, &scalar(3.0), 0).unwrap(), x);
        let out = s.denoise_step(&x, &scalar(0.0), 1).unwrap();
        assert!((out.data()[0] - 0.7 / 0.8).abs() < 1e-6);
    }

    #[test]
    fn extrapolate_scalar() {
        let s = sched(&[0.25]);
        let out = s.extrapolate_final(&scalar(1.0), &scalar(0.5), 0).unwrap();
        let expected = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert!((out.data()[0] as f64 - expected).abs() < 1e-6);
        assert!((out.data()[0] - 1.133_97).abs() < 1e-5);
    }

    #[test]
    fn no_noise_limits() {
        let s = sched(&[1.0, 0.5]);
        let x = scalar(0.3);
        assert_eq!(s.extrapolate_final(&x, &scalar(2.0), 0).unwrap(), x);
        assert_eq!(s.forward_noise(&x, 0, &scalar(2.0)).unwrap(), x);
        let out = s.forward_noise(&x, 1, &scalar(0.0)).unwrap();
        assert!((out.data()[0] as f64 - 0.5f64.sqrt() * 0.3).abs() < 1e-7);
    }

    #[test]
    fn single_step_recursion_matches_closed_form_at_first_step() {
        // At t = 0 alpha_bar equals alpha, so one reverse step is the extrapolation.
        let s = NoiseSchedule::toy_default();
        let x = scalar(0.4);
        let e = scalar(-1.3);
        let a = s.denoise_step(&x, &e, 0).unwrap();
        let b = s.extrapolate_final(&x, &e, 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn ddim_recursion_with_frozen_noise_reaches_closed_form() {
        let s = NoiseSchedule::toy_default();
        let shape = [3, 2, 2];
        let x0 = LatentImage::new(shape, (0..12).map(|i| (i as f32 / 6.0) - 1.0).collect(), (-1.0, 1.0)).unwrap();
        let e = LatentImage::new(shape, (0..12).map(|i| ((i * 7 % 5) as f32 - 2.0) / 2.0).collect(), (-1.0, 1.0)).unwrap();
        let t = 37;
        let mut x = s.forward_noise(&x0, t, &e).unwrap();
        for step in (0..=t).rev() {
            let prev = if step == 0 { None } else { Some(step - 1) };
            x = s.ddim_step(&x, &e, step, prev, None).unwrap();
        }
        assert!(x.max_abs_diff(&x0) < 1e-4);
    }

    #[test]
    fn shape_and_index_errors() {
        let s = NoiseSchedule::toy_default();
        let a = LatentImage::zeros([1, 2, 2]);
        let b = LatentImage::zeros([1, 2, 3]);
        assert!(s.denoise_step(&a, &b, 0).is_err());
        assert!(s.extrapolate_final(&a, &a, 50).is_err());
        assert!(LatentImage::new([1, 1, 2], vec![0.0, f32::INFINITY], (0.0, 1.0)).is_err());
    }

    #[test]
    fn inference_timesteps_cover_schedule() {
        let s = NoiseSchedule::toy_default();
        assert_eq!(s.inference_timesteps(50).unwrap(), (0..50).rev().collect::<Vec<_>>());
        let four = s.inference_timesteps(4).unwrap();
        assert_eq!(four.first(), Some(&49));
        assert_eq!(four.last(), Some(&0));
        assert!(s.inference_timesteps(0).is_err());
        let mid = s.middle_subset(4);
        assert_eq!(mid.len(), 4);
        assert!(mid.iter().all(|t| *t >= 5 && *t <= 45));
    }

    #[test]
    fn batch_helpers_match_scalar_path() {
        let s = NoiseSchedule::toy_default();
        let dev = Device::Cpu;
        let x0 = Tensor::randn(0f32, 1.0, (2, 1, 2, 2), &dev).unwrap();
        let n = Tensor::randn(0f32, 1.0, (2, 1, 2, 2), &dev).unwrap();
        let ts = [3usize, 40];
        let xt = s.forward_noise_batch(&x0, &n, &ts).unwrap();
        let back = s.extrapolate_final_batch(&xt, &n, &ts).unwrap();
        let diff = (back - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5);
    }
}
