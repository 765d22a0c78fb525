//! Principal component analysis over harvested embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::tensor_file::{TensorFile, TensorRecord};

/// Relative eigenvalue floor below which a component counts as degenerate.
const DEGENERATE_RTOL: f64 = 1e-10;

/// Row-major `rows x cols` matrix of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(contract(format!(
                "{rows}x{cols} sample matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<T: Into<f64> + Copy>(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(contract("ragged sample rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|v| (*v).into())).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum PcaSolver {
    /// Covariance eigendecomposition when `D <= N`, Gram-matrix route otherwise,
    /// randomized beyond [`PcaSolver::DENSE_LIMIT`] in both dimensions.
    #[default]
    Auto,
    Covariance,
    Gram,
    Randomized {
        oversample: usize,
        power_iterations: usize,
        seed: u64,
    },
}

impl PcaSolver {
    pub const DENSE_LIMIT: usize = 4096;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalDirections {
    pub mean: Vec<f64>,
    /// `n x D`, orthonormal rows ordered by explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    /// Components beyond the data's rank; their directions are an arbitrary
    /// orthonormal completion.
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub index: usize,
    pub variance: f64,
    pub ratio: f64,
    pub cumulative_ratio: f64,
}

impl PrincipalDirections {
    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, i: usize) -> Result<&[f64]> {
        self.components
            .get(i)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Validation(format!("component {i} out of range (n = {})", self.n())))
    }

    /// Coordinates of a centered sample along every component.
    pub fn coordinates(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|v| v.iter().zip(x.iter().zip(&self.mean)).map(|(vi, (xi, mi))| vi * (xi - mi)).sum())
            .collect()
    }

    pub fn to_tensor_file(&self, space: &str) -> TensorFile {
        let d = self.dimension();
        TensorFile {
            metadata: serde_json::json!({
                "space": space,
                "degenerate": self.degenerate,
            }),
            records: vec![
                TensorRecord::f64("mean", vec![d], self.mean.clone()),
                TensorRecord::f64("components", vec![self.n(), d], self.components.concat()),
                TensorRecord::f64("explained_variance", vec![self.n()], self.explained_variance.clone()),
                TensorRecord::f64("total_variance", vec![1], vec![self.total_variance]),
            ],
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let mean = file.require("mean")?.data.to_f64();
        let comps = file.require("components")?;
        let (n, d) = match comps.shape.as_slice() {
            [n, d] => (*n, *d),
            s => return Err(Error::Parse(format!("components must be 2-d, got {s:?}"))),
        };
        if d != mean.len() {
            return Err(Error::Parse("components and mean disagree on dimension".into()));
        }
        let flat = comps.data.to_f64();
        let components = flat.chunks(d.max(1)).take(n).map(|c| c.to_vec()).collect();
        let explained_variance = file.require("explained_variance")?.data.to_f64();
        if explained_variance.len() != n {
            return Err(Error::Parse("explained_variance length mismatch".into()));
        }
        let total_variance = file
            .require("total_variance")?
            .data
            .to_f64()
            .first()
            .copied()
            .ok_or_else(|| Error::Parse("empty total_variance".into()))?;
        let degenerate = serde_json::from_value(file.metadata["degenerate"].clone())
            .unwrap_or_else(|_| vec![false; n]);
        Ok(Self {
            mean,
            components,
            explained_variance,
            total_variance,
            degenerate,
        })
    }
}

/// Fits the top-`n` principal directions of the rows of `x`.
pub fn fit_pca(x: &SampleMatrix, n: usize) -> Result<PrincipalDirections> {
    fit_pca_with(x, n, PcaSolver::Auto)
}

pub fn fit_pca_with(x: &SampleMatrix, n: usize, solver: PcaSolver) -> Result<PrincipalDirections> {
    let (rows, d) = (x.rows, x.cols);
    if n == 0 {
        return Err(config("direction count must be positive"));
    }
    if rows <= n {
        return Err(config(format!("need more samples than directions (N = {rows}, n = {n})")));
    }
    if n > d {
        return Err(config(format!("cannot extract {n} directions from {d}-dimensional data")));
    }
    if let Some(i) = x.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite sample value at flat index {i}")));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..rows).map(|i| x.data[i * d + j]).sum::<f64>() / rows as f64)
        .collect();
    let mut centered = x.to_dmatrix();
    for mut row in centered.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let denom = (rows - 1) as f64;
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / denom;

    let solver = match solver {
        PcaSolver::Auto if d > PcaSolver::DENSE_LIMIT && rows > PcaSolver::DENSE_LIMIT => PcaSolver::Randomized {
            oversample: 10,
            power_iterations: 4,
            seed: 0,
        },
        PcaSolver::Auto if d <= rows => PcaSolver::Covariance,
        PcaSolver::Auto => PcaSolver::Gram,
        s => s,
    };
    let (values, vectors) = match solver {
        PcaSolver::Covariance => covariance_route(&centered, n, denom),
        PcaSolver::Gram => gram_route(&centered, n, denom),
        PcaSolver::Randomized {
            oversample,
            power_iterations,
            seed,
        } => randomized_route(&centered, n, denom, oversample, power_iterations, seed),
        PcaSolver::Auto => unreachable!("resolved above"),
    };

    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let floor = DEGENERATE_RTOL * top.max(f64::MIN_POSITIVE);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut explained = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for (lambda, v) in values.into_iter().zip(vectors) {
        degenerate.push(!(lambda > floor) || top == 0.0);
        explained.push(lambda.max(0.0));
        components.push(v);
    }
    orthonormal_completion(&mut components, &degenerate, d);
    for v in &mut components {
        apply_sign_convention(v);
    }
    if degenerate.iter().any(|d| *d) {
        log::warn!(
            "embedding matrix has rank below the requested {n} directions; {} components flagged degenerate",
            degenerate.iter().filter(|d| **d).count()
        );
    }
    Ok(PrincipalDirections {
        mean,
        components,
        explained_variance: explained,
        total_variance,
        degenerate,
    })
}

fn sorted_top(eig: SymmetricEigen<f64, nalgebra::Dyn>, n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().take(n).map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .take(n)
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, vectors)
}

fn covariance_route(centered: &DMatrix<f64>, n: usize, denom: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut cov = centered.transpose() * centered;
    cov /= denom;
    sorted_top(SymmetricEigen::new(cov), n)
}

/// Eigenvectors of `X X^T` mapped back through `X^T`; exact when `N < D`.
fn gram_route(centered: &DMatrix<f64>, n: usize, denom: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut gram = centered * centered.transpose();
    gram /= denom;
    let (values, us) = sorted_top(SymmetricEigen::new(gram), n);
    let top = values.first().copied().unwrap_or(0.0);
    let vectors = values
        .iter()
        .zip(us)
        .map(|(&lambda, u)| {
            if lambda > DEGENERATE_RTOL * top.max(f64::MIN_POSITIVE) {
                let u = nalgebra::DVector::from_vec(u);
                let v = centered.transpose() * u;
                let norm = v.norm();
                v.iter().map(|x| x / norm).collect()
            } else {
                vec![0.0; centered.ncols()]
            }
        })
        .collect();
    (values, vectors)
}

/// Randomized range finder with power iterations, followed by an exact
/// eigendecomposition inside the captured subspace.
fn randomized_route(
    centered: &DMatrix<f64>,
    n: usize,
    denom: f64,
    oversample: usize,
    power_iterations: usize,
    seed: u64,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = centered.ncols();
    let width = (n + oversample).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::<f64>::from_fn(d, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = (centered * omega).qr().q();
    for _ in 0..power_iterations {
        let z = (centered.transpose() * &q).qr().q();
        q = (centered * z).qr().q();
    }
    // Right singular subspace of X restricted to range(Q).
    let b = q.transpose() * centered; // width x d
    let basis = b.transpose().qr().q(); // d x width, orthonormal
    let projected = centered * &basis; // N x width
    let mut small = projected.transpose() * &projected;
    small /= denom;
    let (values, ws) = sorted_top(SymmetricEigen::new(small), n);
    let vectors = ws
        .into_iter()
        .map(|w| {
            let v = &basis * nalgebra::DVector::from_vec(w);
            v.iter().copied().collect()
        })
        .collect();
    (values, vectors)
}

/// Replaces degenerate rows with unit vectors orthogonal to every other row.
fn orthonormal_completion(components: &mut [Vec<f64>], degenerate: &[bool], d: usize) {
    let mut basis_idx = 0usize;
    for i in 0..components.len() {
        if !degenerate[i] {
            continue;
        }
        loop {
            let mut cand = vec![0.0; d];
            cand[basis_idx % d] = 1.0;
            basis_idx += 1;
            for (j, other) in components.iter().enumerate() {
                if j == i || (degenerate[j] && j > i) {
                    continue;
                }
                let dot: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                for (c, o) in cand.iter_mut().zip(other) {
                    *c -= dot * o;
                }
            }
            let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                components[i] = cand.into_iter().map(|v| v / norm).collect();
                break;
            }
            if basis_idx > 2 * d {
                break;
            }
        }
    }
}

/// Flips `v` so that its first non-negligible coordinate is positive.
pub fn apply_sign_convention(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9 * max) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

pub fn variance_spectrum(directions: &PrincipalDirections) -> Vec<SpectrumEntry> {
    let total = directions.total_variance;
    let mut cumulative = 0.0;
    directions
        .explained_variance
        .iter()
        .enumerate()
        .map(|(index, &variance)| {
            let ratio = if total > 0.0 { variance / total } else { 0.0 };
            cumulative = (cumulative + ratio).min(1.0);
            SpectrumEntry {
                index,
                variance,
                ratio,
                cumulative_ratio: cumulative,
            }
        })
        .collect()
}

/// Coordinate of an embedding difference along component `i`.
pub fn project(delta: &[f64], directions: &PrincipalDirections, i: usize) -> Result<f64> {
    let v = directions.component(i)?;
    if v.len() != delta.len() {
        return Err(contract(format!(
            "delta has dimension {}, directions have {}",
            delta.len(),
            v.len()
        )));
    }
    Ok(v.iter().zip(delta).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> SampleMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Distinct column scales keep the spectrum well separated.
        let data = (0..rows * cols)
            .map(|k| {
                let j = k % cols;
                rng.random_range(-1.0..1.0) * (1.0 + j as f64)
            })
            .collect();
        SampleMatrix::new(rows, cols, data).unwrap()
    }

    fn gram_error(p: &PrincipalDirections) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..p.n() {
            for j in 0..p.n() {
                let dot: f64 = p.components[i].iter().zip(&p.components[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    #[test]
    fn collinear_points() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let p = fit_pca(&SampleMatrix::from_rows(&rows).unwrap(), 1).unwrap();
        let s = 0.5f64.sqrt();
        assert!((p.components[0][0] - s).abs() < 1e-12);
        assert!((p.components[0][1] - s).abs() < 1e-12);
        assert!((variance_spectrum(&p)[0].ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_spectrum() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = fit_pca(&SampleMatrix::from_rows(&rows).unwrap(), 3).unwrap();
        let s = variance_spectrum(&p);
        assert!((s[0].ratio - 1.0).abs() < 1e-9);
        assert!(s[1].ratio < 1e-9 && s[2].ratio < 1e-9);
        assert_eq!(p.degenerate, vec![false, true, true]);
        assert!(gram_error(&p) < 1e-9);
    }

    #[test]
    fn configuration_errors() {
        let x = random_matrix(3, 5, 1);
        assert!(matches!(fit_pca(&x, 3), Err(Error::Config(_))));
        assert!(matches!(fit_pca(&x, 0), Err(Error::Config(_))));
        assert!(matches!(fit_pca(&random_matrix(10, 2, 1), 3), Err(Error::Config(_))));
    }

    #[test]
    fn solvers_agree() {
        let x = random_matrix(30, 12, 5);
        let cov = fit_pca_with(&x, 4, PcaSolver::Covariance).unwrap();
        let gram = fit_pca_with(&x, 4, PcaSolver::Gram).unwrap();
        let rnd = fit_pca_with(
            &x,
            4,
            PcaSolver::Randomized {
                oversample: 8,
                power_iterations: 6,
                seed: 1,
            },
        )
        .unwrap();
        for other in [&gram, &rnd] {
            for (a, b) in cov.components.iter().zip(&other.components) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
            for (a, b) in cov.explained_variance.iter().zip(&other.explained_variance) {
                assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn wide_data_uses_gram_route() {
        let x = random_matrix(8, 40, 2);
        let p = fit_pca(&x, 5).unwrap();
        assert!(gram_error(&p) < 1e-9);
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn projection() {
        let x = random_matrix(40, 5, 3);
        let p = fit_pca(&x, 3).unwrap();
        let v0 = p.components[0].clone();
        let v1 = p.components[1].clone();
        assert!((project(&v0, &p, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!(project(&v1, &p, 0).unwrap().abs() < 1e-6);
        let mix: Vec<f64> = v0.iter().zip(&v1).map(|(a, b)| 2.0 * a + 3.0 * b).collect();
        assert!((project(&mix, &p, 0).unwrap() - 2.0).abs() < 1e-9);
        assert!(project(&mix, &p, 3).is_err());
        assert!(project(&mix[..4], &p, 0).is_err());
    }

    #[test]
    fn pca_of_projected_data_is_identity() {
        let x = random_matrix(60, 6, 9);
        let p = fit_pca(&x, 3).unwrap();
        let coords: Vec<Vec<f64>> = (0..x.rows).map(|i| p.coordinates(x.row(i))).collect();
        let q = fit_pca(&SampleMatrix::from_rows(&coords).unwrap(), 3).unwrap();
        for (i, v) in q.components.iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((x - want).abs() < 1e-8, "{:?}", q.components);
            }
        }
    }

    #[test]
    fn bundle_round_trip() {
        let p = fit_pca(&random_matrix(20, 4, 4), 2).unwrap();
        let back = PrincipalDirections::from_tensor_file(
            &TensorFile::from_bytes(&p.to_tensor_file("toy").to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn orthonormal_and_sorted(rows in 6usize..30, cols in 2usize..6, seed in any::<u64>()) {
            let x = random_matrix(rows, cols, seed);
            let n = cols.min(rows - 1);
            let p = fit_pca(&x, n).unwrap();
            prop_assert!(gram_error(&p) < 1e-6);
            prop_assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1] - 1e-12));
            let s = variance_spectrum(&p);
            prop_assert!(s.iter().all(|e| (0.0..=1.0).contains(&e.cumulative_ratio)));
        }

        #[test]
        fn reconstruction_error_never_grows(seed in any::<u64>()) {
            let x = random_matrix(25, 5, seed);
            let p = fit_pca(&x, 5).unwrap();
            let mut last = f64::INFINITY;
            for k in 1..=5 {
                let mut err = 0.0;
                for i in 0..x.rows {
                    let row = x.row(i);
                    let c = p.coordinates(row);
                    for (j, xj) in row.iter().enumerate() {
                        let rec: f64 = p.mean[j] + (0..k).map(|q| c[q] * p.components[q][j]).sum::<f64>();
                        err += (xj - rec).powi(2);
                    }
                }
                prop_assert!(err <= last + 1e-9);
                last = err;
            }
        }
    }
}
