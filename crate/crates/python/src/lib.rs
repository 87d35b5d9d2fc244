//! Python bindings. Matrices cross the boundary as lists of rows.

use bas_core::baselines::reference_subspace_from_gradients;
use bas_core::data::{generate_quadratic_with_noise, Dataset, Standardization};
use bas_core::experiment::{evaluate, train, ModelFile, RunConfig};
use bas_core::metrics::{mfsa, mlppd, principal_angles, r_squared, GaussianPredictive};
use bas_core::model::{parameter_names, predict_marginal_original, sample_posterior, MarginalPrediction, PosteriorSamples, PredictOptions};
use bas_core::sampler::{parameter_chains, split_rhat, SamplerConfig};
use bas_core::stiefel::{householder_map as hh_map, ProjectionMatrix, ProjectionParams};
use bas_core::Error;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Data(_) | Error::UndefinedMetric(_) | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(PyValueError::new_err("matrix must be a nonempty list of nonempty rows"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("matrix rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn projection(rows_: &[Vec<f64>]) -> PyResult<ProjectionMatrix> {
    ProjectionMatrix::new(matrix(rows_)?).map_err(to_py)
}

fn prediction_dict<'py>(py: Python<'py>, p: &MarginalPrediction) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("median", &p.median)?;
    d.set_item("mean", &p.mean)?;
    d.set_item("std", &p.std)?;
    d.set_item("q05", &p.q05)?;
    d.set_item("q95", &p.q95)?;
    Ok(d)
}

/// Orthonormal d×m matrix from the Householder parameter vector.
#[pyfunction]
fn householder_map(theta: Vec<f64>, d: usize, m: usize) -> PyResult<Vec<Vec<f64>>> {
    let p = ProjectionParams::new(theta, d, m).map_err(to_py)?;
    Ok(rows(hh_map(&p).map_err(to_py)?.matrix()))
}

/// Random quadratic ridge-function dataset as a dict with `x`, `y`,
/// `gradients` and the true projection `w`.
#[pyfunction]
#[pyo3(signature = (d, m, n, seed, noise_std=0.05))]
fn generate_quadratic<'py>(py: Python<'py>, d: usize, m: usize, n: usize, seed: u64, noise_std: f64) -> PyResult<Bound<'py, PyDict>> {
    let (ds, spec) = generate_quadratic_with_noise(d, m, n, seed, noise_std).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("x", rows(&ds.x))?;
    out.set_item("y", &ds.y)?;
    out.set_item("gradients", ds.gradients.as_ref().map(rows))?;
    out.set_item("w", rows(spec.w.matrix()))?;
    Ok(out)
}

#[pyfunction]
fn r_squared_score(actual: Vec<f64>, predicted: Vec<f64>) -> PyResult<f64> {
    r_squared(&actual, &predicted).map_err(to_py)
}

/// Mean log pointwise predictive density of Gaussian predictions.
#[pyfunction]
fn mlppd_gaussian(actual: Vec<f64>, mean: Vec<f64>, std: Vec<f64>, gamma: usize) -> PyResult<f64> {
    mlppd(&actual, &GaussianPredictive { mean, std }, gamma).map_err(to_py)
}

/// Principal angles in radians, largest first.
#[pyfunction]
fn subspace_angles(u: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(principal_angles(&projection(&u)?, &projection(&v)?).map_err(to_py)?.angles)
}

#[pyfunction]
fn mean_first_subspace_angle(draws: Vec<Vec<Vec<f64>>>, reference: Vec<Vec<f64>>) -> PyResult<f64> {
    let ws = draws.iter().map(|w| projection(w)).collect::<PyResult<Vec<_>>>()?;
    mfsa(&ws, &projection(&reference)?).map_err(to_py)
}

/// Eigenvalues (descending) and the leading-m eigenvectors of the gradient
/// covariance.
#[pyfunction]
fn active_subspace(gradients: Vec<Vec<f64>>, m: usize) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let (cov, w) = reference_subspace_from_gradients(&matrix(&gradients)?, m).map_err(to_py)?;
    Ok((cov.eigenvalues, rows(w.matrix())))
}

#[pyfunction]
fn split_rhat_of(chains: Vec<Vec<f64>>) -> PyResult<f64> {
    split_rhat(&chains).map_err(to_py)
}

/// BAS posterior samples together with the training data they condition on.
#[pyclass]
struct Posterior {
    samples: PosteriorSamples,
    x: DMatrix<f64>,
    y: Vec<f64>,
}

#[pymethods]
impl Posterior {
    /// Standardizes `x`, `y` and runs NUTS on the BAS posterior.
    #[staticmethod]
    #[pyo3(signature = (x, y, m, chains=4, draws=1000, warmup=500, seed=0, target_accept=0.8, max_tree_depth=10))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        m: usize,
        chains: usize,
        draws: usize,
        warmup: usize,
        seed: u64,
        target_accept: f64,
        max_tree_depth: usize,
    ) -> PyResult<Self> {
        let x = matrix(&x)?;
        let ds = Dataset::new(x.clone(), y.clone(), None, "python").map_err(to_py)?;
        let st = Standardization::fit(&ds).map_err(to_py)?;
        let z = st.apply(&ds).map_err(to_py)?;
        let cfg = SamplerConfig {
            chains,
            draws,
            warmup,
            seed,
            target_accept,
            max_tree_depth,
        };
        let samples = py
            .detach(|| sample_posterior(&z.x, &z.y, m, st, &cfg))
            .map_err(to_py)?
            .0;
        Ok(Self { samples, x, y })
    }

    /// Restores a posterior saved with `to_json`; the training data must be
    /// supplied again.
    #[staticmethod]
    fn from_json(text: &str, x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Self> {
        let samples = PosteriorSamples::from_json(text).map_err(to_py)?;
        Ok(Self { samples, x: matrix(&x)?, y })
    }

    fn to_json(&self) -> PyResult<String> {
        self.samples.to_json().map_err(to_py)
    }

    #[getter]
    fn d(&self) -> usize {
        self.samples.meta.d
    }

    #[getter]
    fn m(&self) -> usize {
        self.samples.meta.m
    }

    #[getter]
    fn num_draws(&self) -> usize {
        self.samples.num_draws()
    }

    fn parameter_names(&self) -> Vec<String> {
        parameter_names(self.samples.meta.d, self.samples.meta.m)
    }

    /// Draws as `chains[c][t][j]`.
    fn chains(&self) -> Vec<Vec<Vec<f64>>> {
        self.samples.chains.clone()
    }

    /// Projection matrix of every draw, in standardized input coordinates.
    fn projections(&self) -> PyResult<Vec<Vec<Vec<f64>>>> {
        Ok(self.samples.projections().map_err(to_py)?.iter().map(|w| rows(w.matrix())).collect())
    }

    /// Split R̂ per parameter; `None` where it is undefined.
    fn split_rhat(&self) -> Vec<Option<f64>> {
        (0..self.parameter_names().len())
            .map(|j| split_rhat(&parameter_chains(&self.samples.chains, j)).ok())
            .collect()
    }

    #[pyo3(signature = (x_star, draws_per_sample=10, seed=0))]
    fn predict<'py>(&self, py: Python<'py>, x_star: Vec<Vec<f64>>, draws_per_sample: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let xs = matrix(&x_star)?;
        let opts = PredictOptions {
            draws_per_sample,
            seed,
            max_posterior_draws: None,
        };
        let p = py
            .detach(|| predict_marginal_original(&self.samples, &xs, &self.x, &self.y, &opts))
            .map_err(to_py)?;
        prediction_dict(py, &p)
    }
}

/// Trained model file for any of the three methods.
#[pyclass]
struct Model {
    inner: ModelFile,
}

#[pymethods]
impl Model {
    /// Trains from a JSON run configuration (same schema as `bas train --config`).
    #[staticmethod]
    fn train(py: Python<'_>, config_json: &str) -> PyResult<Self> {
        let cfg: RunConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let out = py.detach(|| train(&cfg)).map_err(to_py)?;
        Ok(Self { inner: out.model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ModelFile::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn training_seconds(&self) -> f64 {
        self.inner.training_seconds
    }

    fn predict<'py>(&self, py: Python<'py>, x_star: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let xs = matrix(&x_star)?;
        let p = py.detach(|| self.inner.predict(&xs)).map_err(to_py)?;
        prediction_dict(py, &p)
    }

    /// Metrics on the validation rows of the dataset recorded in the config.
    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = py
            .detach(|| self.inner.config.dataset.load().and_then(|ds| evaluate(&self.inner, &ds)))
            .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("method", &r.method)?;
        d.set_item("dataset", &r.dataset)?;
        d.set_item("r_squared", r.r_squared)?;
        d.set_item("mlppd", r.mlppd)?;
        d.set_item("mfsa_rad", r.mfsa_rad)?;
        d.set_item("training_seconds", r.training_seconds)?;
        Ok(d)
    }
}

#[pymodule]
fn bas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", bas_core::experiment::VERSION)?;
    m.add_function(wrap_pyfunction!(householder_map, m)?)?;
    m.add_function(wrap_pyfunction!(generate_quadratic, m)?)?;
    m.add_function(wrap_pyfunction!(r_squared_score, m)?)?;
    m.add_function(wrap_pyfunction!(mlppd_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(subspace_angles, m)?)?;
    m.add_function(wrap_pyfunction!(mean_first_subspace_angle, m)?)?;
    m.add_function(wrap_pyfunction!(active_subspace, m)?)?;
    m.add_function(wrap_pyfunction!(split_rhat_of, m)?)?;
    m.add_class::<Posterior>()?;
    m.add_class::<Model>()?;
    Ok(())
}
