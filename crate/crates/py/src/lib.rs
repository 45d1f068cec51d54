//! Python bindings: networks, moment systems, bound computation and sweeps.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

use momentbound::cli::{
    compute_bounds, correlation_of, load_network, parse_target, resolve_scale, run_sweep, set_correlation,
    BoundRequest, BoundResult, Directions, PipelineError, ScaleChoice, SweepSpec,
};
use momentbound::momeq::{self, TruncationOrder};
use momentbound::netspec::{parse_network, serialize_network, validate_network, Severity};
use momentbound::sdpbuild::{export_sdpa as sdpa_text, Direction};
use momentbound::solver::SolverSettings;

fn to_py(e: PipelineError) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn directions(text: &str) -> PyResult<Directions> {
    match text {
        "min" => Ok(Directions::Min),
        "max" => Ok(Directions::Max),
        "both" => Ok(Directions::Both),
        _ => Err(PyValueError::new_err(format!("direction must be min, max or both, got '{text}'"))),
    }
}

fn truncation(rho: u32, sigma: u32) -> PyResult<TruncationOrder> {
    TruncationOrder::new(rho, sigma).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn scale_choice(scale: Option<BTreeMap<String, f64>>, no_scale: bool) -> PyResult<ScaleChoice> {
    match (scale, no_scale) {
        (Some(_), true) => Err(PyValueError::new_err("scale and no_scale are mutually exclusive")),
        (_, true) => Ok(ScaleChoice::None),
        (Some(v), false) => Ok(ScaleChoice::AutoWith(v.into_iter().collect())),
        (None, false) => Ok(ScaleChoice::Auto),
    }
}

fn settings(tol_gap: f64, tol_feas: f64, max_iters: usize) -> PyResult<SolverSettings> {
    let s = SolverSettings {
        tol_gap,
        tol_feas,
        max_iters,
        ..SolverSettings::default()
    };
    s.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(s)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Reaction network with uncertain parameters.
#[pyclass(name = "Network", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: momentbound::netspec::Network,
}

#[pymethods]
impl PyNetwork {
    /// Parse and validate a network document.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let net = parse_network(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let errors: Vec<String> = validate_network(&net)
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| d.to_string())
            .collect();
        if !errors.is_empty() {
            return Err(PyValueError::new_err(errors.join("; ")));
        }
        Ok(PyNetwork { inner: net })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_network(&path).map(|inner| PyNetwork { inner }).map_err(to_py)
    }

    fn to_json(&self) -> String {
        serialize_network(&self.inner)
    }

    #[getter]
    fn species(&self) -> Vec<String> {
        self.inner.species.iter().map(|s| s.name.clone()).collect()
    }

    #[getter]
    fn parameters(&self) -> Vec<String> {
        self.inner.params.iter().map(|p| p.name.clone()).collect()
    }

    #[getter]
    fn uncertain(&self) -> Vec<String> {
        self.inner
            .uncertain_params()
            .into_iter()
            .map(|p| self.inner.params[p].name.clone())
            .collect()
    }

    /// Correlation bound `r` when the network declares exactly one.
    #[getter]
    fn correlation(&self) -> Option<f64> {
        correlation_of(&self.inner)
    }

    fn with_correlation(&self, r: f64) -> PyResult<Self> {
        set_correlation(&self.inner, r).map(|inner| PyNetwork { inner }).map_err(to_py)
    }

    /// Copy with every uncertain parameter fixed; `values` is indexed like
    /// `parameters` (entries of fixed parameters are ignored).
    fn with_fixed(&self, values: Vec<f64>) -> PyResult<Self> {
        if values.len() != self.inner.params.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} values, got {}",
                self.inner.params.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(PyValueError::new_err("parameter values must be positive"));
        }
        Ok(PyNetwork {
            inner: self.inner.with_fixed_params(&values),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(species={:?}, reactions={}, uncertain={:?})",
            self.species(),
            self.inner.reactions.len(),
            self.uncertain()
        )
    }
}

/// Exact truncated moment equations `0 = A mu + B nu + C xi`.
#[pyclass(name = "MomentSystem", frozen)]
struct PyMomentSystem {
    inner: momeq::MomentSystem,
    labels: Vec<String>,
}

#[pymethods]
impl PyMomentSystem {
    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    /// Moment labels in column order (copy-number, mixed, parameter-only).
    #[getter]
    fn keys(&self) -> Vec<String> {
        self.labels.clone()
    }

    /// Row `i` as `(moment, numerator, denominator)` triples.
    fn row(&self, i: usize) -> PyResult<Vec<(String, String, String)>> {
        if i >= self.inner.n_rows() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self
            .inner
            .row_terms(i)
            .into_iter()
            .map(|(k, v)| {
                let label = self.labels[self.inner.lmap[k]].clone();
                (label, v.numer().to_string(), v.denom().to_string())
            })
            .collect())
    }
}

/// Lower and upper bounds on one stationary moment.
#[pyclass(name = "Bounds", frozen)]
struct PyBounds {
    inner: BoundResult,
}

#[pymethods]
impl PyBounds {
    #[getter]
    fn lb(&self) -> Option<f64> {
        self.inner.lb()
    }

    #[getter]
    fn ub(&self) -> Option<f64> {
        self.inner.ub()
    }

    #[getter]
    fn gap(&self) -> Option<f64> {
        self.inner.gap()
    }

    #[getter]
    fn lb_status(&self) -> Option<String> {
        self.inner.lower.as_ref().map(|d| d.status.to_string())
    }

    #[getter]
    fn ub_status(&self) -> Option<String> {
        self.inner.upper.as_ref().map(|d| d.status.to_string())
    }

    #[getter]
    fn optimal(&self) -> bool {
        self.inner.all_optimal()
    }

    #[getter]
    fn target(&self) -> String {
        self.inner.target.clone()
    }

    fn as_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }

    fn __repr__(&self) -> String {
        format!(
            "Bounds(target={}, lb={:?}, ub={:?}, status={:?}/{:?})",
            self.inner.target,
            self.lb(),
            self.ub(),
            self.lb_status(),
            self.ub_status()
        )
    }
}

#[pyfunction]
fn gamma_moment(shape: f64, scale: f64, beta: u32) -> PyResult<f64> {
    momeq::gamma_moment(shape, scale, beta).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn moment_system(network: &PyNetwork, rho: u32, sigma: u32) -> PyResult<PyMomentSystem> {
    let sys = momeq::assemble_moment_equations(&network.inner, truncation(rho, sigma)?)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let labels = sys.keys().map(|k| k.display_with(&network.inner)).collect();
    Ok(PyMomentSystem { inner: sys, labels })
}

#[allow(clippy::too_many_arguments)]
fn request(
    net: &momentbound::netspec::Network,
    target: &str,
    rho: u32,
    sigma: u32,
    direction: &str,
    scale: Option<BTreeMap<String, f64>>,
    no_scale: bool,
    pilot_seed: u64,
    solver: SolverSettings,
) -> PyResult<BoundRequest> {
    Ok(BoundRequest {
        target: parse_target(net, target).map_err(to_py)?,
        truncation: truncation(rho, sigma)?,
        directions: directions(direction)?,
        scale: resolve_scale(net, &scale_choice(scale, no_scale)?, pilot_seed).map_err(to_py)?,
        settings: solver,
    })
}

/// Bound `target` (e.g. "X" or "X^2") at truncation `(rho, sigma)`.
#[pyfunction]
#[pyo3(signature = (network, target, rho=5, sigma=2, direction="both", scale=None, no_scale=false,
                    pilot_seed=0, tol_gap=1e-8, tol_feas=1e-8, max_iters=200))]
#[allow(clippy::too_many_arguments)]
fn bounds(
    py: Python<'_>,
    network: &PyNetwork,
    target: &str,
    rho: u32,
    sigma: u32,
    direction: &str,
    scale: Option<BTreeMap<String, f64>>,
    no_scale: bool,
    pilot_seed: u64,
    tol_gap: f64,
    tol_feas: f64,
    max_iters: usize,
) -> PyResult<PyBounds> {
    let net = network.inner.clone();
    let solver = settings(tol_gap, tol_feas, max_iters)?;
    let req = request(&net, target, rho, sigma, direction, scale, no_scale, pilot_seed, solver)?;
    py.detach(|| compute_bounds(&net, &req, None))
        .map(|inner| PyBounds { inner })
        .map_err(to_py)
}

/// SDPA sparse text of the relaxation in the given direction.
#[pyfunction]
#[pyo3(signature = (network, target, rho, sigma, direction="min", scale=None, no_scale=false, pilot_seed=0))]
#[allow(clippy::too_many_arguments)]
fn export_sdpa(
    network: &PyNetwork,
    target: &str,
    rho: u32,
    sigma: u32,
    direction: &str,
    scale: Option<BTreeMap<String, f64>>,
    no_scale: bool,
    pilot_seed: u64,
) -> PyResult<String> {
    let dir = match directions(direction)? {
        Directions::Max => Direction::Max,
        Directions::Min => Direction::Min,
        Directions::Both => return Err(PyValueError::new_err("export needs a single direction")),
    };
    let req = request(
        &network.inner,
        target,
        rho,
        sigma,
        direction,
        scale,
        no_scale,
        pilot_seed,
        SolverSettings::default(),
    )?;
    let p = momentbound::cli::build_problem(&network.inner, &req, dir).map_err(to_py)?;
    Ok(sdpa_text(&p))
}

/// Solve a grid of `(r, sigma)` cells; returns one dict per cell in
/// `(r, sigma)` order.
#[pyfunction]
#[pyo3(signature = (network, target, sigmas, r_values=None, rho=5, direction="both", scale=None,
                    no_scale=false, pilot_seed=0, tol_gap=1e-8, tol_feas=1e-8, max_iters=200))]
#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    target: &str,
    sigmas: Vec<u32>,
    r_values: Option<Vec<f64>>,
    rho: u32,
    direction: &str,
    scale: Option<BTreeMap<String, f64>>,
    no_scale: bool,
    pilot_seed: u64,
    tol_gap: f64,
    tol_feas: f64,
    max_iters: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let net = network.inner.clone();
    let spec = SweepSpec {
        r_values: match r_values {
            Some(v) => v.into_iter().map(Some).collect(),
            None => vec![None],
        },
        sigma_values: sigmas,
        rho,
        target: parse_target(&net, target).map_err(to_py)?,
        directions: directions(direction)?,
    };
    let solver = settings(tol_gap, tol_feas, max_iters)?;
    let scale = resolve_scale(&net, &scale_choice(scale, no_scale)?, pilot_seed).map_err(to_py)?;
    let rows = py.detach(|| run_sweep(&net, &spec, &scale, &solver)).map_err(to_py)?;
    rows.iter()
        .map(|row| {
            let d = PyDict::new(py);
            d.set_item("r", row.r)?;
            d.set_item("sigma", row.sigma)?;
            d.set_item("lb", row.lb)?;
            d.set_item("ub", row.ub)?;
            d.set_item("gap", row.gap)?;
            d.set_item("lb_status", row.lb_status.map(|s| s.to_string()))?;
            d.set_item("ub_status", row.ub_status.map(|s| s.to_string()))?;
            d.set_item("seconds", row.seconds)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "momentbound")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyMomentSystem>()?;
    m.add_class::<PyBounds>()?;
    m.add_function(wrap_pyfunction!(gamma_moment, m)?)?;
    m.add_function(wrap_pyfunction!(moment_system, m)?)?;
    m.add_function(wrap_pyfunction!(bounds, m)?)?;
    m.add_function(wrap_pyfunction!(export_sdpa, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
