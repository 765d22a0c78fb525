//! Python bindings: scheduler math, PCA, the alignment loss, metrics, and
//! loading / generating from slider spaces.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use sliderspace_core::adapter::{effective_weight as core_effective_weight, LowRankAdapter, Matrix};
use sliderspace_core::backend::DiffusionBackend;
use sliderspace_core::composer::{generate, GenerationRequest, SliderLibrary, TimestepGate};
use sliderspace_core::encoder::{EncoderRegistry, SemanticEmbedding};
use sliderspace_core::eval::{self, CosineDistance, GaussianSummary};
use sliderspace_core::manifest::SliderSpace;
use sliderspace_core::pca::{self, SampleMatrix};
use sliderspace_core::runtime::{open_space, resolve_config, RuntimeSettings};
use sliderspace_core::schedule::{self, LatentImage};
use sliderspace_core::trainer;
use sliderspace_core::workspace::{discover as core_discover, Workspace};
use sliderspace_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NotFound(m) => PyKeyError::new_err(m),
        Error::Validation(_) | Error::Config(_) | Error::Parse(_) | Error::Contract(_) | Error::Preprocessing(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn flat(values: Vec<f32>) -> Result<LatentImage, PyErr> {
    let n = values.len();
    LatentImage::new([1, 1, n], values, LatentImage::DEFAULT_RANGE).map_err(py_err)
}

#[pyclass(name = "NoiseSchedule", module = "sliderspace")]
struct PyNoiseSchedule(schedule::NoiseSchedule);

#[pymethods]
impl PyNoiseSchedule {
    #[staticmethod]
    fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        schedule::NoiseSchedule::linear(num_steps, beta_start, beta_end)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn from_alphas(alphas: Vec<f64>) -> PyResult<Self> {
        schedule::NoiseSchedule::from_alphas(alphas).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn toy_default() -> Self {
        Self(schedule::NoiseSchedule::toy_default())
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.0.num_steps()
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.0.alphas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.0.alpha_bars().to_vec()
    }

    /// One reverse step `x_{t-1}` on a flat vector.
    fn denoise_step(&self, x_t: Vec<f32>, eps: Vec<f32>, t: usize) -> PyResult<Vec<f32>> {
        let out = self.0.denoise_step(&flat(x_t)?, &flat(eps)?, t).map_err(py_err)?;
        Ok(out.data().to_vec())
    }

    /// Closed-form final image estimate from `x_t` and one noise prediction.
    fn extrapolate_final(&self, x_t: Vec<f32>, eps: Vec<f32>, t: usize) -> PyResult<Vec<f32>> {
        let out = self.0.extrapolate_final(&flat(x_t)?, &flat(eps)?, t).map_err(py_err)?;
        Ok(out.data().to_vec())
    }

    fn forward_noise(&self, x0: Vec<f32>, t: usize, noise: Vec<f32>) -> PyResult<Vec<f32>> {
        let out = self.0.forward_noise(&flat(x0)?, t, &flat(noise)?).map_err(py_err)?;
        Ok(out.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("NoiseSchedule(num_steps={})", self.0.num_steps())
    }
}

#[pyclass(name = "PrincipalDirections", module = "sliderspace")]
struct PyPrincipalDirections(pca::PrincipalDirections);

#[pymethods]
impl PyPrincipalDirections {
    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.0.mean.clone()
    }

    #[getter]
    fn components(&self) -> Vec<Vec<f64>> {
        self.0.components.clone()
    }

    #[getter]
    fn explained_variance(&self) -> Vec<f64> {
        self.0.explained_variance.clone()
    }

    #[getter]
    fn total_variance(&self) -> f64 {
        self.0.total_variance
    }

    fn __len__(&self) -> usize {
        self.0.n()
    }

    /// `[(index, variance, ratio, cumulative_ratio)]`.
    fn spectrum(&self) -> Vec<(usize, f64, f64, f64)> {
        pca::variance_spectrum(&self.0)
            .into_iter()
            .map(|e| (e.index, e.variance, e.ratio, e.cumulative_ratio))
            .collect()
    }

    fn project(&self, delta: Vec<f64>, i: usize) -> PyResult<f64> {
        pca::project(&delta, &self.0, i).map_err(py_err)
    }
}

/// Top-`n` principal directions of the rows of `embeddings`.
#[pyfunction]
fn fit_pca(embeddings: Vec<Vec<f64>>, n: usize) -> PyResult<PyPrincipalDirections> {
    let x = SampleMatrix::from_rows(&embeddings).map_err(py_err)?;
    pca::fit_pca(&x, n).map(PyPrincipalDirections).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (delta_phi, v, epsilon_norm = 1e-8))]
fn sliderspace_loss(delta_phi: Vec<f64>, v: Vec<f64>, epsilon_norm: f64) -> PyResult<f64> {
    trainer::sliderspace_loss(&delta_phi, &v, epsilon_norm).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (delta_phi, v, epsilon_norm = 1e-8))]
fn sliderspace_loss_grad(delta_phi: Vec<f64>, v: Vec<f64>, epsilon_norm: f64) -> PyResult<Vec<f64>> {
    trainer::sliderspace_loss_grad(&delta_phi, &v, epsilon_norm).map_err(py_err)
}

/// `W0 + sum scale * B A` for `adapters = [(B, A, scale)]`, matrices as row lists.
#[pyfunction]
fn effective_weight(w0: Vec<Vec<f32>>, adapters: Vec<(Vec<Vec<f32>>, Vec<Vec<f32>>, f64)>) -> PyResult<Vec<Vec<f32>>> {
    let matrix = |rows: &[Vec<f32>]| -> PyResult<Matrix> {
        let cols = rows.first().map_or(0, |r| r.len());
        Matrix::new(rows.len(), cols, rows.concat()).map_err(py_err)
    };
    let base = matrix(&w0)?;
    let adapters = adapters
        .iter()
        .enumerate()
        .map(|(i, (b, a, scale))| {
            let adapter = LowRankAdapter::new(format!("adapter-{i}"), "layer", matrix(b)?, matrix(a)?, 1.0)
                .map_err(py_err)?;
            Ok((adapter, *scale))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<(&LowRankAdapter, f64)> = adapters.iter().map(|(a, s)| (a, *s)).collect();
    let w = core_effective_weight(&base, &refs).map_err(py_err)?;
    let (r, c) = w.shape();
    Ok((0..r).map(|i| (0..c).map(|j| w.get(i, j)).collect()).collect())
}

/// Fréchet distance between two Gaussians given as (mean, covariance rows).
#[pyfunction]
fn frechet_distance(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = GaussianSummary::new(mean_a, cov_a.concat()).map_err(py_err)?;
    let b = GaussianSummary::new(mean_b, cov_b.concat()).map_err(py_err)?;
    eval::frechet_distance(&a, &b).map_err(py_err)
}

/// Mean pairwise cosine distance.
#[pyfunction]
fn pairwise_diversity(embeddings: Vec<Vec<f32>>) -> PyResult<f64> {
    let set: Vec<SemanticEmbedding> = embeddings
        .into_iter()
        .map(|vector| SemanticEmbedding {
            vector,
            encoder_id: "python".into(),
            normalized: false,
        })
        .collect();
    eval::pairwise_diversity(&set, &CosineDistance).map_err(py_err)
}

fn settings(cache_dir: Option<PathBuf>) -> RuntimeSettings {
    let mut s = RuntimeSettings::default();
    if let Some(dir) = cache_dir {
        s.cache_dir = dir;
    }
    s
}

/// Runs (or resumes) discovery into `workspace` and returns the manifest hash.
#[pyfunction]
#[pyo3(signature = (workspace, config = None, cache_dir = None))]
fn discover(py: Python<'_>, workspace: PathBuf, config: Option<PathBuf>, cache_dir: Option<PathBuf>) -> PyResult<String> {
    py.detach(|| {
        let cfg = resolve_config(config.as_deref(), Some(&workspace))?;
        let backend = sliderspace_core::runtime::load_backend(&cfg, &settings(cache_dir))?;
        let ws = core_discover(&workspace, &cfg, backend.as_ref(), &EncoderRegistry::with_builtins())?;
        Ok(ws.load_space()?.manifest.hash())
    })
    .map_err(py_err)
}

#[pyclass(name = "SliderSpace", module = "sliderspace")]
struct PySliderSpace {
    space: SliderSpace,
    library: SliderLibrary,
    backend: Arc<dyn DiffusionBackend>,
}

#[pymethods]
impl PySliderSpace {
    /// Opens the slider space of a discovery workspace.
    #[staticmethod]
    #[pyo3(signature = (workspace, config = None, cache_dir = None))]
    fn open(py: Python<'_>, workspace: PathBuf, config: Option<PathBuf>, cache_dir: Option<PathBuf>) -> PyResult<Self> {
        py.detach(|| {
            let cfg = resolve_config(config.as_deref(), Some(&workspace))?;
            let ws = Workspace::open(&workspace)?;
            let (space, backend) = open_space(&ws.space_dir(), &cfg, &settings(cache_dir))?;
            Ok(Self {
                library: space.library(),
                space,
                backend,
            })
        })
        .map_err(py_err)
    }

    #[getter]
    fn manifest_hash(&self) -> String {
        self.space.manifest.hash()
    }

    #[getter]
    fn prompt(&self) -> String {
        self.space.manifest.prompt.clone()
    }

    #[getter]
    fn slider_ids(&self) -> Vec<String> {
        self.library.ids()
    }

    fn manifest_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.space.manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn spectrum(&self) -> Vec<(usize, f64, f64, f64)> {
        PyPrincipalDirections(self.space.directions.clone()).spectrum()
    }

    /// PNG bytes for one request; `gate` is `(start_step, end_step)`.
    #[pyo3(signature = (seed, activations = None, prompt = None, gate = None, num_steps = None))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        activations: Option<BTreeMap<String, f64>>,
        prompt: Option<String>,
        gate: Option<(usize, usize)>,
        num_steps: Option<usize>,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let req = GenerationRequest {
            prompt: prompt.unwrap_or_else(|| self.space.manifest.prompt.clone()),
            seed,
            activations: activations.unwrap_or_default(),
            gate: gate.map(|(start_step, end_step)| TimestepGate { start_step, end_step }),
            num_steps,
        };
        let png = py
            .detach(|| generate(&req, &self.library, self.backend.as_ref())?.png())
            .map_err(py_err)?;
        Ok(PyBytes::new(py, &png))
    }

    fn __len__(&self) -> usize {
        self.library.len()
    }
}

#[pymodule]
fn sliderspace(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyPrincipalDirections>()?;
    m.add_class::<PySliderSpace>()?;
    m.add_function(wrap_pyfunction!(fit_pca, m)?)?;
    m.add_function(wrap_pyfunction!(sliderspace_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sliderspace_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(effective_weight, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_diversity, m)?)?;
    m.add_function(wrap_pyfunction!(discover, m)?)?;
    Ok(())
}
