//! Rank-r weight updates `delta_W = B A` and their scaled composition.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::tensor_file::{TensorFile, TensorRecord};

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(contract(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.rows, self.cols), device)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Self::new(rows, cols, t.flatten_all()?.to_vec1::<f32>()?)
    }
}

/// One low-rank update attached to a single target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub adapter_id: String,
    pub target_layer: String,
    b: Matrix,
    a: Matrix,
    pub trained_scale: f32,
}

impl LowRankAdapter {
    pub fn new(
        adapter_id: impl Into<String>,
        target_layer: impl Into<String>,
        b: Matrix,
        a: Matrix,
        trained_scale: f32,
    ) -> Result<Self> {
        let (d, r) = b.shape();
        let (r2, k) = a.shape();
        if r != r2 {
            return Err(contract(format!("B is {d}x{r} but A is {r2}x{k}")));
        }
        if r == 0 || r > d.min(k) {
            return Err(config(format!("rank {r} must lie in [1, min({d}, {k})]")));
        }
        if !trained_scale.is_finite() || trained_scale == 0.0 {
            return Err(config("trained_scale must be finite and nonzero"));
        }
        Ok(Self {
            adapter_id: adapter_id.into(),
            target_layer: target_layer.into(),
            b,
            a,
            trained_scale,
        })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols
    }

    /// Shape `(d, k)` of the weight this adapter updates.
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.b.rows, self.a.cols)
    }

    /// Number of stored parameters, `r * (d + k)`.
    pub fn parameter_count(&self) -> usize {
        self.b.data.len() + self.a.data.len()
    }

    /// Dense `B A` (d x k), accumulated in f64.
    pub fn delta_weight(&self) -> Vec<f64> {
        let (d, k) = self.weight_shape();
        let r = self.rank();
        let mut out = vec![0.0f64; d * k];
        for i in 0..d {
            for j in 0..k {
                let mut s = 0.0f64;
                for q in 0..r {
                    s += self.b.get(i, q) as f64 * self.a.get(q, j) as f64;
                }
                out[i * k + j] = s;
            }
        }
        out
    }
}

/// How the `A` factor is drawn; `B` always starts at zero so a fresh adapter is a no-op.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitPolicy {
    pub a_std: f32,
    pub seed: u64,
}

impl InitPolicy {
    pub fn new(a_std: f32, seed: u64) -> Self {
        Self { a_std, seed }
    }
}

pub fn init_adapter(
    adapter_id: impl Into<String>,
    layer: &str,
    weight_shape: (usize, usize),
    rank: usize,
    policy: InitPolicy,
) -> Result<LowRankAdapter> {
    let (d, k) = weight_shape;
    if rank == 0 || rank > d.min(k) {
        return Err(config(format!(
            "rank {rank} invalid for layer '{layer}' of shape ({d}, {k})"
        )));
    }
    let normal = Normal::new(0.0f32, policy.a_std)
        .map_err(|e| config(format!("invalid init std {}: {e}", policy.a_std)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let a = (0..rank * k).map(|_| normal.sample(&mut rng)).collect();
    LowRankAdapter::new(
        adapter_id,
        layer,
        Matrix::zeros(d, rank),
        Matrix::new(rank, k, a)?,
        1.0,
    )
}

/// `W0 + sum_i scale_i * B_i A_i`.
///
/// Activations are merged by adapter id and summed in id order, so the result
/// does not depend on the order they are passed in. Zero scales are skipped.
pub fn effective_weight(w0: &Matrix, activations: &[(&LowRankAdapter, f64)]) -> Result<Matrix> {
    let delta = summed_delta(w0.shape(), activations)?;
    let data = match delta {
        None => w0.data.clone(),
        Some(delta) => w0
            .data
            .iter()
            .zip(delta)
            .map(|(w, d)| (*w as f64 + d) as f32)
            .collect(),
    };
    Matrix::new(w0.rows, w0.cols, data)
}

/// Summed scaled update for one layer, or `None` when every scale is zero.
pub fn summed_delta(
    weight_shape: (usize, usize),
    activations: &[(&LowRankAdapter, f64)],
) -> Result<Option<Vec<f64>>> {
    let mut merged: BTreeMap<&str, (&LowRankAdapter, f64)> = BTreeMap::new();
    for (adapter, scale) in activations {
        if !scale.is_finite() {
            return Err(Error::Validation(format!(
                "scale for '{}' is not finite",
                adapter.adapter_id
            )));
        }
        if adapter.weight_shape() != weight_shape {
            return Err(contract(format!(
                "adapter '{}' updates a {:?} weight, layer is {:?}",
                adapter.adapter_id,
                adapter.weight_shape(),
                weight_shape
            )));
        }
        let entry = merged.entry(adapter.adapter_id.as_str()).or_insert((adapter, 0.0));
        if entry.0 != *adapter {
            return Err(contract(format!(
                "two different adapters share the id '{}'",
                adapter.adapter_id
            )));
        }
        entry.1 += scale;
    }
    let mut out: Option<Vec<f64>> = None;
    for (adapter, scale) in merged.values() {
        if *scale == 0.0 {
            continue;
        }
        let d = adapter.delta_weight();
        let acc = out.get_or_insert_with(|| vec![0.0; d.len()]);
        for (o, v) in acc.iter_mut().zip(d) {
            *o += scale * v;
        }
    }
    Ok(out)
}

/// A trained slider: one adapter per target layer, activated together by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Slider {
    pub id: String,
    pub adapters: Vec<LowRankAdapter>,
}

impl Slider {
    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(|a| a.parameter_count()).sum()
    }

    pub fn trained_scale(&self) -> f32 {
        self.adapters.first().map(|a| a.trained_scale).unwrap_or(1.0)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    adapter_id: String,
    target_layer: String,
    rank: usize,
    trained_scale: f32,
}

fn adapter_records(a: &LowRankAdapter, prefix: &str) -> (AdapterMeta, [TensorRecord; 2]) {
    (
        AdapterMeta {
            adapter_id: a.adapter_id.clone(),
            target_layer: a.target_layer.clone(),
            rank: a.rank(),
            trained_scale: a.trained_scale,
        },
        [
            TensorRecord::f32(format!("{prefix}lora_B"), vec![a.b.rows, a.b.cols], a.b.data.clone()),
            TensorRecord::f32(format!("{prefix}lora_A"), vec![a.a.rows, a.a.cols], a.a.data.clone()),
        ],
    )
}

fn adapter_from_records(meta: AdapterMeta, file: &TensorFile, prefix: &str) -> Result<LowRankAdapter> {
    let matrix = |name: String| -> Result<Matrix> {
        let rec = file.require(&name)?;
        match rec.shape.as_slice() {
            [r, c] => Matrix::new(*r, *c, rec.data.to_f32()).map_err(|e| Error::Parse(e.to_string())),
            other => Err(Error::Parse(format!("'{name}' must be 2-d, got {other:?}"))),
        }
    };
    let b = matrix(format!("{prefix}lora_B"))?;
    let a = matrix(format!("{prefix}lora_A"))?;
    if b.cols != meta.rank || a.rows != meta.rank {
        return Err(Error::Parse(format!(
            "header rank {} disagrees with B {:?} / A {:?}",
            meta.rank,
            b.shape(),
            a.shape()
        )));
    }
    LowRankAdapter::new(meta.adapter_id, meta.target_layer, b, a, meta.trained_scale)
        .map_err(|e| Error::Parse(e.to_string()))
}

pub fn serialize_adapter(adapter: &LowRankAdapter) -> Result<Vec<u8>> {
    let (meta, records) = adapter_records(adapter, "");
    TensorFile {
        metadata: serde_json::to_value(meta)?,
        records: records.to_vec(),
    }
    .to_bytes()
}

pub fn deserialize_adapter(bytes: &[u8]) -> Result<LowRankAdapter> {
    let file = TensorFile::from_bytes(bytes)?;
    let meta: AdapterMeta = serde_json::from_value(file.metadata.clone())
        .map_err(|e| Error::Parse(format!("adapter header: {e}")))?;
    adapter_from_records(meta, &file, "")
}

pub fn serialize_slider(slider: &Slider) -> Result<Vec<u8>> {
    let mut metas = Vec::new();
    let mut records = Vec::new();
    for (i, a) in slider.adapters.iter().enumerate() {
        let (meta, recs) = adapter_records(a, &format!("{i}."));
        metas.push(meta);
        records.extend(recs);
    }
    TensorFile {
        metadata: serde_json::json!({ "slider_id": slider.id, "adapters": metas }),
        records,
    }
    .to_bytes()
}

pub fn deserialize_slider(bytes: &[u8]) -> Result<Slider> {
    let file = TensorFile::from_bytes(bytes)?;
    let id = file.metadata["slider_id"]
        .as_str()
        .ok_or_else(|| Error::Parse("slider file has no slider_id".into()))?
        .to_string();
    let metas: Vec<AdapterMeta> = serde_json::from_value(file.metadata["adapters"].clone())
        .map_err(|e| Error::Parse(format!("slider header: {e}")))?;
    let adapters = metas
        .into_iter()
        .enumerate()
        .map(|(i, m)| adapter_from_records(m, &file, &format!("{i}.")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Slider { id, adapters })
}
