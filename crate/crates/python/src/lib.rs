//! Python bindings for the harmonization toolkit.
//!
//! Build the importable module with
//! `cargo build -p nsdn-python --release`, then expose
//! `target/release/libnsdn.so` on the Python path under the name `nsdn.so`
//! (symlink or copy). `python/smoke_test.py` at the repository root does this
//! automatically.
//!
//! The surface mirrors the Rust crate: coefficient vectors ([`PyShVec`]),
//! trained models ([`PyModel`]), basis operations, the angular correlation
//! and rank-test metrics, spherical deconvolution, and the dataset/pipeline
//! drivers that write the same files as the `nsdn` command-line tool.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nsdn_core::cli;
use nsdn_core::csd;
use nsdn_core::metrics;
use nsdn_core::net::{MlpModel, TrainConfig};
use nsdn_core::sh::{self, ShVec};
use nsdn_core::sphere::{self, Direction, Rotation3};

fn to_py_err(e: nsdn_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn direction(xyz: (f64, f64, f64)) -> PyResult<Direction> {
    Direction::normalized(xyz.0, xyz.1, xyz.2).map_err(to_py_err)
}

fn directions(xyzs: Vec<(f64, f64, f64)>) -> PyResult<Vec<Direction>> {
    xyzs.into_iter().map(direction).collect()
}

fn rotation(matrix: [[f64; 3]; 3]) -> PyResult<Rotation3> {
    Rotation3::from_matrix(matrix).map_err(to_py_err)
}

/// An even-order symmetric spherical-harmonic coefficient vector.
#[pyclass(name = "ShVec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyShVec {
    inner: ShVec,
}

#[pymethods]
impl PyShVec {
    #[new]
    fn new(order: usize, coeffs: Vec<f64>) -> PyResult<Self> {
        Ok(PyShVec {
            inner: ShVec::new(order, coeffs).map_err(to_py_err)?,
        })
    }

    /// All-zero vector of the given band limit.
    #[staticmethod]
    fn zeros(order: usize) -> PyResult<Self> {
        Ok(PyShVec {
            inner: ShVec::zeros(order).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn coeffs(&self) -> Vec<f64> {
        self.inner.coeffs().to_vec()
    }

    /// Coefficient for degree `l`, order `m`; None when out of range.
    fn coeff(&self, l: usize, m: i64) -> Option<f64> {
        self.inner.coeff(l, m)
    }

    /// Squared coefficient norm.
    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    /// Squared norm excluding the constant term.
    fn anisotropic_energy(&self) -> f64 {
        self.inner.anisotropic_energy()
    }

    fn __len__(&self) -> usize {
        self.inner.coeffs().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "ShVec(order={}, {} coefficients)",
            self.inner.order(),
            self.inner.coeffs().len()
        )
    }
}

/// A trained fully connected harmonization model.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: MlpModel,
    provenance: Option<String>,
}

#[pymethods]
impl PyModel {
    /// Reads a model file written by training.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, provenance) = MlpModel::load(&path).map_err(to_py_err)?;
        Ok(PyModel {
            inner,
            provenance: provenance.map(|v| v.to_string()),
        })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.inner.layer_dims()
    }

    /// JSON string describing how the model was trained, if recorded.
    #[getter]
    fn provenance(&self) -> Option<String> {
        self.provenance.clone()
    }

    /// Maps a signal coefficient vector to a distribution coefficient vector.
    fn predict(&self, input: PyRef<'_, PyShVec>) -> PyResult<PyShVec> {
        Ok(PyShVec {
            inner: self.inner.predict(&input.inner).map_err(to_py_err)?,
        })
    }

    /// Raw forward pass on a plain coefficient list.
    fn predict_coeffs(&self, input: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&input).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} -> {}, layers {:?})",
            self.inner.input_dim(),
            self.inner.output_dim(),
            self.inner.layer_dims()
        )
    }
}

/// `n` quasi-uniform unit vectors on the sphere (spiral lattice).
#[pyfunction]
fn fibonacci_directions(n: usize) -> Vec<(f64, f64, f64)> {
    sphere::fibonacci_directions(n)
        .into_iter()
        .map(|d| (d.x(), d.y(), d.z()))
        .collect()
}

/// Basis values at one direction, ordered by (degree, order) flat indexing.
#[pyfunction]
fn basis_row(order: usize, d: (f64, f64, f64)) -> PyResult<Vec<f64>> {
    sh::basis_row(order, &direction(d)?).map_err(to_py_err)
}

/// Least-squares coefficient fit of per-direction samples.
#[pyfunction]
fn fit_sh(dirs: Vec<(f64, f64, f64)>, values: Vec<f64>, order: usize) -> PyResult<PyShVec> {
    Ok(PyShVec {
        inner: sh::fit_sh(&directions(dirs)?, &values, order).map_err(to_py_err)?,
    })
}

/// Evaluates a coefficient vector at the given directions.
#[pyfunction]
fn eval_sh(v: PyRef<'_, PyShVec>, dirs: Vec<(f64, f64, f64)>) -> PyResult<Vec<f64>> {
    Ok(sh::eval_sh(&v.inner, &directions(dirs)?))
}

/// Rotates the represented function by a 3x3 rotation matrix.
#[pyfunction]
fn rotate_sh(v: PyRef<'_, PyShVec>, matrix: [[f64; 3]; 3]) -> PyResult<PyShVec> {
    Ok(PyShVec {
        inner: sh::rotate_sh(&v.inner, &rotation(matrix)?),
    })
}

/// Band-limited unit-mass peak along `d` (antipodally symmetric).
#[pyfunction]
fn delta_fod(d: (f64, f64, f64), order: usize) -> PyResult<PyShVec> {
    Ok(PyShVec {
        inner: sh::delta_fod(&direction(d)?, order).map_err(to_py_err)?,
    })
}

/// Angular correlation coefficient of two same-order vectors, ignoring the
/// constant term. Raises ValueError when either input is isotropic.
#[pyfunction]
fn acc(u: PyRef<'_, PyShVec>, v: PyRef<'_, PyShVec>) -> PyResult<f64> {
    metrics::acc(&u.inner, &v.inner).map_err(to_py_err)
}

/// Lower median: the smaller middle element for even-length input.
#[pyfunction]
fn lower_median(values: Vec<f64>) -> Option<f64> {
    metrics::lower_median(&values)
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Returns a dict
/// with p_value, w_plus, n_used, zeros_dropped, degenerate, and method
/// ("exact" enumerates the null distribution, "normal_approx" is used for
/// large n).
#[pyfunction]
fn signed_rank_test<'py>(
    py: Python<'py>,
    a: Vec<f64>,
    b: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::signed_rank_test(&a, &b).map_err(to_py_err)?;
    let method = serde_json::to_value(r.method)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    let d = PyDict::new(py);
    d.set_item("p_value", r.p_value)?;
    d.set_item("w_plus", r.w_plus)?;
    d.set_item("n_used", r.n_used)?;
    d.set_item("zeros_dropped", r.zeros_dropped)?;
    d.set_item("degenerate", r.degenerate)?;
    d.set_item("method", method)?;
    Ok(d)
}

/// Per-degree single-fiber response coefficients (degrees 0..=8) estimated
/// from one voxel's raw signal samples and its known fiber direction.
#[pyfunction]
fn estimate_response(
    signals: Vec<f64>,
    fiber: (f64, f64, f64),
    dirs: Vec<(f64, f64, f64)>,
) -> PyResult<Vec<f64>> {
    let r = csd::estimate_response(&signals, direction(fiber)?, &directions(dirs)?)
        .map_err(to_py_err)?;
    Ok(r.r.to_vec())
}

/// Constrained spherical deconvolution of an order-8 signal vector into a
/// non-negative distribution. Returns (fod, converged, iterations).
#[pyfunction]
#[pyo3(signature = (
    signal,
    response,
    output_order = 10,
    constraint_dirs = 300,
    tau_fraction = 0.1,
    alpha = 0.1,
    max_iterations = 50,
))]
fn csd_deconvolve(
    signal: PyRef<'_, PyShVec>,
    response: [f64; 5],
    output_order: usize,
    constraint_dirs: usize,
    tau_fraction: f64,
    alpha: f64,
    max_iterations: usize,
) -> PyResult<(PyShVec, bool, usize)> {
    let response = csd::ResponseFunction::new(response).map_err(to_py_err)?;
    let cfg = csd::CsdConfig {
        output_order,
        constraint_dirs,
        tau_fraction,
        alpha,
        max_iterations,
    };
    let out = csd::csd_deconvolve(&signal.inner, &response, &cfg).map_err(to_py_err)?;
    Ok((PyShVec { inner: out.fod }, out.converged, out.iterations))
}

/// Largest well-separated maxima of a distribution, as ((x, y, z), value)
/// pairs sorted by value.
#[pyfunction]
#[pyo3(signature = (fod, max_peaks = 3, min_separation_deg = 15.0))]
fn fod_peaks(
    fod: PyRef<'_, PyShVec>,
    max_peaks: usize,
    min_separation_deg: f64,
) -> Vec<((f64, f64, f64), f64)> {
    csd::fod_peaks(&fod.inner, max_peaks, min_separation_deg)
        .into_iter()
        .map(|(d, v)| ((d.x(), d.y(), d.z()), v))
        .collect()
}

fn parse_file_config(config_json: Option<&str>) -> PyResult<cli::FileConfig> {
    match config_json {
        None => Ok(cli::FileConfig::default()),
        Some(s) => serde_json::from_str(s)
            .map_err(|e| PyValueError::new_err(format!("configuration JSON: {e}"))),
    }
}

/// Writes the six dataset/response files into `out_dir`. `config_json` uses
/// the same schema as the command-line tool's `--config` file; omitted keys
/// keep their defaults. Returns the created paths.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None))]
fn run_simulate(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<Vec<PathBuf>> {
    let cfg = parse_file_config(config_json)?;
    let outputs = cli::cmd_simulate(&cfg.simulate, &out_dir).map_err(to_py_err)?;
    Ok(outputs.files().iter().map(|p| p.to_path_buf()).collect())
}

/// Trains a model (and optionally the consistency-free baseline) from
/// dataset files written by `run_simulate` or the command-line tool.
/// Returns the written (model, cross-validation) file paths.
#[pyfunction]
#[pyo3(signature = (
    labeled,
    out_dir,
    paired = None,
    name = "model".to_string(),
    with_dn = false,
    lambda = 1.0,
    epochs = 20,
    batch_size = 100,
    folds = 5,
    val_fraction = 0.2,
    learning_rate = 5e-3,
    seed = 0,
))]
#[allow(clippy::too_many_arguments)]
fn train_files(
    labeled: PathBuf,
    out_dir: PathBuf,
    paired: Option<PathBuf>,
    name: String,
    with_dn: bool,
    lambda: f64,
    epochs: usize,
    batch_size: usize,
    folds: usize,
    val_fraction: f64,
    learning_rate: f64,
    seed: u64,
) -> PyResult<Vec<(PathBuf, PathBuf)>> {
    let config = TrainConfig {
        lambda,
        epochs,
        batch_size,
        folds,
        val_fraction,
        learning_rate,
        seed,
        ..TrainConfig::default()
    };
    let run = cli::TrainRun {
        labeled,
        paired,
        name,
        with_dn,
        config,
    };
    let outputs = cli::cmd_train(&run, &out_dir).map_err(to_py_err)?;
    Ok(outputs
        .models
        .into_iter()
        .zip(outputs.cv_reports)
        .map(|((_, model), (_, cv))| (model, cv))
        .collect())
}

/// Runs simulate, train (both the consistency-trained and plain models),
/// evaluate, and report into `out_dir`; returns the rendered text summary.
/// `config_json` matches the command-line tool's `--config` schema.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None))]
fn run_pipeline(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<String> {
    let cfg = parse_file_config(config_json)?;
    let out = cli::cmd_pipeline(&cfg, &out_dir).map_err(to_py_err)?;
    Ok(out.summary)
}

#[pymodule]
fn nsdn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyShVec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fibonacci_directions, m)?)?;
    m.add_function(wrap_pyfunction!(basis_row, m)?)?;
    m.add_function(wrap_pyfunction!(fit_sh, m)?)?;
    m.add_function(wrap_pyfunction!(eval_sh, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_sh, m)?)?;
    m.add_function(wrap_pyfunction!(delta_fod, m)?)?;
    m.add_function(wrap_pyfunction!(acc, m)?)?;
    m.add_function(wrap_pyfunction!(lower_median, m)?)?;
    m.add_function(wrap_pyfunction!(signed_rank_test, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_response, m)?)?;
    m.add_function(wrap_pyfunction!(csd_deconvolve, m)?)?;
    m.add_function(wrap_pyfunction!(fod_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train_files, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
