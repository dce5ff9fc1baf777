//! Python bindings. Fields and batches cross the boundary as nested lists of
//! floats; run summaries come back as dicts.

use std::path::PathBuf;

use drkrnet_core::darcy::solve_darcy as solve;
use drkrnet_core::experiment::{self, ExperimentConfig};
use drkrnet_core::flow::{self, FlowConfig, FlowParams};
use drkrnet_core::grf::{
    assemble_covariance_matrix, sample_field as draw, truncated_kle, CovarianceSpec,
};
use drkrnet_core::inference;
use drkrnet_core::surrogate::{physics_loss, predict_pressure, PhysicsLossConfig, SurrogateParams};
use drkrnet_core::vae::{decode_batch, VaeParams};
use drkrnet_core::{Error, Grid, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

type Rows = Vec<Vec<f64>>;

fn from_rows(rows: &Rows) -> PyResult<Tensor> {
    let w = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(
            "expected a non-empty rectangular list of lists",
        ));
    }
    Tensor::matrix(rows.len(), w, rows.concat()).map_err(to_py)
}

fn to_rows(t: &Tensor) -> PyResult<Rows> {
    let (_, w) = t.dims2().map_err(to_py)?;
    Ok(t.data().chunks(w).map(<[f64]>::to_vec).collect())
}

fn json_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Experiment settings, one section per pipeline stage.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// 16x16 desk-scale defaults.
    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: ExperimentConfig::desk(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn override_seeds(&mut self, seed: u64) {
        self.inner.override_seeds(seed);
    }
}

macro_rules! stage {
    ($name:ident, $cmd:path) => {
        #[pyfunction]
        fn $name(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<Py<PyAny>> {
            std::fs::create_dir_all(&out)?;
            let summary = py.detach(|| $cmd(&config.inner, &out)).map_err(to_py)?;
            json_to_py(py, &summary)
        }
    };
}

stage!(generate_data, experiment::cmd_generate_data);
stage!(train_vae, experiment::cmd_train_vae);
stage!(train_surrogate, experiment::cmd_train_surrogate);
stage!(infer_krnet, experiment::cmd_infer_krnet);
stage!(infer_mcmc, experiment::cmd_infer_mcmc);

/// Writes `comparison.csv` under `out` and returns its rows.
#[pyfunction]
fn report(
    runs: Vec<PathBuf>,
    out: PathBuf,
) -> PyResult<Vec<(String, usize, f64, Option<f64>, Option<f64>)>> {
    let rows = experiment::cmd_report(&runs, &out).map_err(to_py)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            (
                r.method,
                r.d,
                r.relative_error,
                r.wall_time,
                r.acceptance_rate,
            )
        })
        .collect())
}

/// One truncated-KLE draw of an exponential-covariance Gaussian field.
#[pyfunction]
#[pyo3(signature = (height, width, length_scale, seed, variance=0.5, mean=1.0, energy_fraction=0.95))]
fn sample_field(
    height: usize,
    width: usize,
    length_scale: f64,
    seed: u64,
    variance: f64,
    mean: f64,
    energy_fraction: f64,
) -> PyResult<Rows> {
    let grid = Grid::new(height, width).map_err(to_py)?;
    let spec = CovarianceSpec::isotropic(variance, length_scale, mean).map_err(to_py)?;
    let basis =
        truncated_kle(&assemble_covariance_matrix(&grid, &spec), energy_fraction).map_err(to_py)?;
    to_rows(&draw(&basis, &spec, &grid, seed).map_err(to_py)?.values)
}

/// Finite-volume pressure for `-div(exp(y) grad u) = source` with zero
/// Dirichlet data on the left and right edges and no flux elsewhere.
#[pyfunction]
#[pyo3(signature = (log_perm, source=3.0))]
fn solve_darcy(log_perm: Rows, source: f64) -> PyResult<Rows> {
    let y = from_rows(&log_perm)?;
    let (h, w) = y.dims2().map_err(to_py)?;
    let grid = Grid::new(h, w).map_err(to_py)?;
    to_rows(&solve(&y, &grid, |_, _| source).map_err(to_py)?.values)
}

/// KRnet flow on `R^d`.
#[pyclass(name = "Flow")]
struct PyFlow {
    inner: FlowParams,
}

#[pymethods]
impl PyFlow {
    /// A fresh flow. With `gain = 0` it is the identity map.
    #[new]
    #[pyo3(signature = (d, k, layers_per_stage=8, hidden_width=48, hidden_depth=2, scale_bound=2.0, seed=0, gain=0.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d: usize,
        k: usize,
        layers_per_stage: usize,
        hidden_width: usize,
        hidden_depth: usize,
        scale_bound: f64,
        seed: u64,
        gain: f64,
    ) -> PyResult<Self> {
        let config = FlowConfig {
            dim: d,
            n_groups: k,
            layers_per_stage,
            hidden_width,
            hidden_depth,
            scale_bound,
        };
        Ok(Self {
            inner: FlowParams::init_with_gain(config, seed, gain).map_err(to_py)?,
        })
    }

    /// Reads `flow.krfl` and `flow.json` from a stage directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: FlowParams::load(&dir).map_err(to_py)?.0,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.config.dim
    }

    fn stage_schedule(&self) -> Vec<usize> {
        self.inner.stage_schedule()
    }

    /// `(z, logdet)` for a batch of rows.
    fn forward(&self, x: Rows) -> PyResult<(Rows, Vec<f64>)> {
        let (z, ld) = flow::krnet_forward_batch(&from_rows(&x)?, &self.inner).map_err(to_py)?;
        Ok((to_rows(&z)?, ld))
    }

    fn inverse(&self, z: Rows) -> PyResult<Rows> {
        to_rows(&flow::krnet_inverse_batch(&from_rows(&z)?, &self.inner).map_err(to_py)?)
    }

    fn log_density(&self, x: Rows) -> PyResult<Vec<f64>> {
        flow::log_density_batch(&from_rows(&x)?, &self.inner).map_err(to_py)
    }
}

/// Trained VAE prior.
#[pyclass(name = "Vae")]
struct PyVae {
    inner: VaeParams,
}

#[pymethods]
impl PyVae {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: VaeParams::load(&dir).map_err(to_py)?.0,
        })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.config.latent_dim
    }

    /// Decoder mean and log-variance for a batch of latents, each `[n, HW]`.
    fn decode(&self, x: Rows) -> PyResult<(Rows, Rows)> {
        let (mu, logvar) = decode_batch(&self.inner, &from_rows(&x)?).map_err(to_py)?;
        Ok((to_rows(&mu)?, to_rows(&logvar)?))
    }
}

/// Trained physics-constrained surrogate.
#[pyclass(name = "Surrogate")]
struct PySurrogate {
    inner: SurrogateParams,
}

#[pymethods]
impl PySurrogate {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SurrogateParams::load(&dir).map_err(to_py)?.0,
        })
    }

    /// Predicted pressure image for one log-permeability image.
    fn predict(&self, log_perm: Rows) -> PyResult<Rows> {
        let y = from_rows(&log_perm)?;
        to_rows(&predict_pressure(&[&y], &self.inner).map_err(to_py)?[0])
    }

    /// Batch-mean physics loss and its breakdown.
    #[pyo3(signature = (log_perms, beta=100.0, source=3.0, flux_on_boundary=false))]
    fn physics_loss(
        &self,
        py: Python<'_>,
        log_perms: Vec<Rows>,
        beta: f64,
        source: f64,
        flux_on_boundary: bool,
    ) -> PyResult<(f64, Py<PyAny>)> {
        let ys = log_perms
            .iter()
            .map(from_rows)
            .collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&Tensor> = ys.iter().collect();
        let cfg = PhysicsLossConfig {
            beta,
            source,
            flux_on_boundary,
        };
        let (total, parts) = physics_loss(&refs, &self.inner, &cfg).map_err(to_py)?;
        Ok((total, json_to_py(py, &parts)?))
    }
}

/// pCN chain under a `N(0, I)` prior with a Python log-likelihood.
#[pyfunction]
#[pyo3(signature = (log_like, d, steps, step_size, seed, keep))]
fn pcn_mcmc(
    py: Python<'_>,
    log_like: Bound<'_, PyAny>,
    d: usize,
    steps: usize,
    step_size: f64,
    seed: u64,
    keep: usize,
) -> PyResult<Py<PyAny>> {
    let mut failure: Option<PyErr> = None;
    let result = inference::pcn_mcmc(
        |x: &[f64]| match log_like
            .call1((x.to_vec(),))
            .and_then(|v| v.extract::<f64>())
        {
            Ok(v) => Ok(v),
            Err(e) => {
                failure = Some(e);
                Err(Error::Invalid("log-likelihood callback raised".into()))
            }
        },
        d,
        steps,
        step_size,
        seed,
        keep,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    json_to_py(py, &result.map_err(to_py)?)
}

#[pymodule]
fn drkrnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyFlow>()?;
    m.add_class::<PyVae>()?;
    m.add_class::<PySurrogate>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_vae, m)?)?;
    m.add_function(wrap_pyfunction!(train_surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(infer_krnet, m)?)?;
    m.add_function(wrap_pyfunction!(infer_mcmc, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(sample_field, m)?)?;
    m.add_function(wrap_pyfunction!(solve_darcy, m)?)?;
    m.add_function(wrap_pyfunction!(pcn_mcmc, m)?)?;
    Ok(())
}
