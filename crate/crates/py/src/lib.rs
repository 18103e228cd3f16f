//! Python bindings for the coarse analysis library.

use eqfree::analysis;
use eqfree::coarse_map;
use eqfree::continuation::{self, ContinuationSettings};
use eqfree::convergence_lab::{self, ToySettings, ToySystem};
use eqfree::micro_model;
use eqfree::solvers;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn to_py(e: eqfree::Error) -> PyErr {
    match e {
        eqfree::Error::InvalidParameter { .. } | eqfree::Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for eqfree::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

#[pyclass(name = "ModelParams", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModelParams {
    inner: micro_model::ModelParams,
}

#[pymethods]
impl PyModelParams {
    #[new]
    #[pyo3(signature = (tau = 1.0 / 1.7, v0 = 0.91, h = 1.2, road_length = 60.0, cars = 60, mu = 0.1))]
    fn new(tau: f64, v0: f64, h: f64, road_length: f64, cars: usize, mu: f64) -> PyResult<Self> {
        let inner = micro_model::ModelParams {
            tau,
            v0,
            h,
            road_length,
            cars,
            mu,
        };
        inner.validate().py_err()?;
        Ok(Self { inner })
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }
    #[getter]
    fn v0(&self) -> f64 {
        self.inner.v0
    }
    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }
    #[getter]
    fn road_length(&self) -> f64 {
        self.inner.road_length
    }
    #[getter]
    fn cars(&self) -> usize {
        self.inner.cars
    }
    #[getter]
    fn mu(&self) -> f64 {
        self.inner.mu
    }

    fn with_v0(&self, v0: f64) -> Self {
        Self {
            inner: self.inner.with_v0(v0),
        }
    }

    fn with_h(&self, h: f64) -> Self {
        Self {
            inner: self.inner.with_h(h),
        }
    }

    fn ov_velocity(&self, dx: f64) -> f64 {
        self.inner.ov_velocity(dx)
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "ModelParams(tau={}, v0={}, h={}, road_length={}, cars={}, mu={})",
            p.tau, p.v0, p.h, p.road_length, p.cars, p.mu
        )
    }
}

#[pyclass(name = "CoarseSettings", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCoarseSettings {
    inner: coarse_map::CoarseSettings,
}

#[pymethods]
impl PyCoarseSettings {
    #[new]
    #[pyo3(signature = (t_skip = 300.0, delta = 2000.0, d_sigma = 1e-3, newton_tol = 1e-7, tol = 1e-8))]
    fn new(t_skip: f64, delta: f64, d_sigma: f64, newton_tol: f64, tol: f64) -> PyResult<Self> {
        let inner = coarse_map::CoarseSettings {
            t_skip,
            delta,
            d_sigma,
            newton_tol,
            integrator: eqfree::integrator::IntegratorSettings::with_tolerance(tol),
            ..Default::default()
        };
        inner.validate().py_err()?;
        Ok(Self { inner })
    }

    #[getter]
    fn t_skip(&self) -> f64 {
        self.inner.t_skip
    }
    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }
    #[getter]
    fn d_sigma(&self) -> f64 {
        self.inner.d_sigma
    }

    fn __repr__(&self) -> String {
        format!(
            "CoarseSettings(t_skip={}, delta={}, d_sigma={})",
            self.inner.t_skip, self.inner.delta, self.inner.d_sigma
        )
    }
}

#[pyclass(name = "MicroState", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMicroState {
    inner: micro_model::MicroState,
}

#[pymethods]
impl PyMicroState {
    #[new]
    fn new(x: Vec<f64>, y: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: micro_model::MicroState::new(x, y).py_err()?,
        })
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x.clone()
    }
    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }
    #[getter]
    fn cars(&self) -> usize {
        self.inner.cars()
    }

    fn __len__(&self) -> usize {
        self.inner.cars()
    }
}

#[pyclass(name = "LiftContext", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLiftContext {
    inner: coarse_map::LiftContext,
}

#[pymethods]
impl PyLiftContext {
    #[new]
    #[pyo3(signature = (reference, params, p = 1.0))]
    fn new(reference: &PyMicroState, params: &PyModelParams, p: f64) -> PyResult<Self> {
        Ok(Self {
            inner: coarse_map::LiftContext::new(reference.inner.clone(), &params.inner, p).py_err()?,
        })
    }

    #[getter]
    fn reference(&self) -> PyMicroState {
        PyMicroState {
            inner: self.inner.reference().clone(),
        }
    }
    #[getter]
    fn reference_sigma(&self) -> f64 {
        self.inner.reference_sigma()
    }
    #[getter]
    fn p(&self) -> f64 {
        self.inner.p()
    }
}

fn params_or_default(params: Option<&PyModelParams>) -> micro_model::ModelParams {
    params.map_or_else(Default::default, |p| p.inner)
}

fn settings_or_default(settings: Option<&PyCoarseSettings>) -> coarse_map::CoarseSettings {
    settings.map_or_else(Default::default, |s| s.inner)
}

/// Uniform flow with the sinusoidal position perturbation.
#[pyfunction]
fn perturbed_state(params: &PyModelParams) -> PyMicroState {
    PyMicroState {
        inner: micro_model::perturbed_state(&params.inner),
    }
}

#[pyfunction]
fn uniform_flow_state(params: &PyModelParams) -> PyMicroState {
    PyMicroState {
        inner: micro_model::uniform_flow_state(&params.inner),
    }
}

/// Integrates the microscopic model for time `t`.
#[pyfunction]
#[pyo3(signature = (state, params, t, tol = 1e-8))]
fn integrate(
    py: Python<'_>,
    state: &PyMicroState,
    params: &PyModelParams,
    t: f64,
    tol: f64,
) -> PyResult<PyMicroState> {
    let settings = eqfree::integrator::IntegratorSettings::with_tolerance(tol);
    let inner = py
        .detach(|| micro_model::integrate(&state.inner, &params.inner, t, &settings))
        .py_err()?;
    Ok(PyMicroState { inner })
}

#[pyfunction]
fn headways(state: &PyMicroState, params: &PyModelParams) -> Vec<f64> {
    micro_model::headways(&state.inner, &params.inner)
}

/// Standard deviation of the headways.
#[pyfunction]
fn restrict(state: &PyMicroState, params: &PyModelParams) -> f64 {
    coarse_map::restrict(&state.inner, &params.inner)
}

#[pyfunction]
fn lift(sigma: f64, ctx: &PyLiftContext, params: &PyModelParams) -> PyResult<PyMicroState> {
    Ok(PyMicroState {
        inner: coarse_map::lift(sigma, &ctx.inner, &params.inner).py_err()?,
    })
}

/// One burst: healed and advanced sigma plus the finite-difference rate.
#[pyfunction]
#[pyo3(signature = (sigma, ctx, params, settings = None))]
fn macro_eval<'py>(
    py: Python<'py>,
    sigma: f64,
    ctx: &PyLiftContext,
    params: &PyModelParams,
    settings: Option<&PyCoarseSettings>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = settings_or_default(settings);
    let e = py
        .detach(|| coarse_map::macro_eval(sigma, &ctx.inner, &params.inner, &s))
        .py_err()?;
    let d = PyDict::new(py);
    d.set_item("healed", e.healed)?;
    d.set_item("advanced", e.advanced)?;
    d.set_item("delta", e.delta)?;
    d.set_item("rate", e.rate())?;
    d.set_item("healed_state", PyMicroState { inner: e.healed_state })?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (h, j = 1, params = None))]
fn hopf_v0(h: f64, j: usize, params: Option<&PyModelParams>) -> PyResult<f64> {
    analysis::hopf_v0(h, j, &params_or_default(params)).py_err()
}

/// Rows of `(h, j, v0, omega)` dicts, ordered by mode then `h`.
#[pyfunction]
#[pyo3(signature = (h_values, modes, params = None))]
fn hopf_curves<'py>(
    py: Python<'py>,
    h_values: Vec<f64>,
    modes: Vec<usize>,
    params: Option<&PyModelParams>,
) -> PyResult<Bound<'py, PyList>> {
    let rows = analysis::hopf_curves(&h_values, &modes, &params_or_default(params)).py_err()?;
    let out = PyList::empty(py);
    for r in rows {
        let d = PyDict::new(py);
        d.set_item("h", r.h)?;
        d.set_item("j", r.j)?;
        d.set_item("v0", r.v0)?;
        d.set_item("omega", r.omega)?;
        out.append(d)?;
    }
    Ok(out)
}

/// Pseudo-arclength branch in `(sigma, v0)` at the `h` of `params`, seeded
/// by direct simulations at the two `seed_v0` values.
#[pyfunction]
#[pyo3(signature = (
    seed_v0,
    n_steps,
    params = None,
    settings = None,
    sim_time = 5e4,
    p = 1.0,
    step = 1e-3,
    stop_after_fold = false,
))]
#[allow(clippy::too_many_arguments)]
fn branch<'py>(
    py: Python<'py>,
    seed_v0: (f64, f64),
    n_steps: usize,
    params: Option<&PyModelParams>,
    settings: Option<&PyCoarseSettings>,
    sim_time: f64,
    p: f64,
    step: f64,
    stop_after_fold: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let params = params_or_default(params);
    let settings = settings_or_default(settings);
    let cont = ContinuationSettings {
        step,
        stop_after_fold,
        ..Default::default()
    };
    let b = py
        .detach(|| {
            continuation::branch_from_simulations(seed_v0, sim_time, p, n_steps, &params, &settings, &cont)
        })
        .py_err()?;
    let d = PyDict::new(py);
    let cols: [(&str, fn(&continuation::BranchPoint) -> f64); 5] = [
        ("sigma", |q| q.sigma),
        ("sigma_healed", |q| q.sigma_healed),
        ("v0", |q| q.v0),
        ("f_sigma", |q| q.f_sigma),
        ("multiplier", |q| q.multiplier),
    ];
    for (name, get) in cols {
        d.set_item(name, b.points.iter().map(get).collect::<Vec<_>>())?;
    }
    d.set_item("stable", b.points.iter().map(|q| q.stable).collect::<Vec<_>>())?;
    d.set_item("termination", format!("{:?}", b.termination))?;
    d.set_item("truncated", b.truncated())?;
    match continuation::detect_fold(&b) {
        Ok(f) => d.set_item("fold", (f.v0, f.sigma_healed))?,
        Err(_) => d.set_item("fold", py.None())?,
    }
    Ok(d)
}

/// Implicit-step error against the reference flow of the slow-fast toy
/// system for each healing time.
#[pyfunction]
#[pyo3(signature = (x, delta, tskip_list, epsilon = 0.01, lift_offsets = (0.3, -0.2)))]
fn convergence_scan<'py>(
    py: Python<'py>,
    x: f64,
    delta: f64,
    tskip_list: Vec<f64>,
    epsilon: f64,
    lift_offsets: (f64, f64),
) -> PyResult<Bound<'py, PyDict>> {
    let sys = ToySystem {
        epsilon,
        lift_offsets,
        ..Default::default()
    };
    sys.validate().py_err()?;
    let scan = py
        .detach(|| convergence_lab::convergence_scan(x, delta, &sys, &tskip_list, &ToySettings::default()))
        .py_err()?;
    let d = PyDict::new(py);
    d.set_item("reference", scan.reference)?;
    d.set_item("t_skip", scan.rows.iter().map(|r| r.t_skip).collect::<Vec<_>>())?;
    d.set_item("value", scan.rows.iter().map(|r| r.value).collect::<Vec<_>>())?;
    d.set_item("error", scan.rows.iter().map(|r| r.error).collect::<Vec<_>>())?;
    d.set_item("slope", scan.slope)?;
    Ok(d)
}

/// Second-order derivatives of `f(sigma, v0, h)` from the 17-point stencil.
#[pyfunction]
fn fd_second_order<'py>(
    py: Python<'py>,
    f: Bound<'py, PyAny>,
    point: (f64, f64, f64),
    offsets: (f64, f64, f64),
) -> PyResult<Bound<'py, PyDict>> {
    let (ds, dv, dh) = offsets;
    if !(ds > 0.0 && dv > 0.0 && dh > 0.0) {
        return Err(PyValueError::new_err("finite-difference offsets must be positive"));
    }
    let mut vals = [0.0; 17];
    for (v, &(i, j, k)) in vals.iter_mut().zip(solvers::STENCIL.iter()) {
        let arg = (
            point.0 + i as f64 * ds,
            point.1 + j as f64 * dv,
            point.2 + k as f64 * dh,
        );
        *v = f.call1(arg)?.extract()?;
    }
    let s = solvers::stencil_from_values(&vals, offsets);
    let d = PyDict::new(py);
    d.set_item("f", s.f)?;
    d.set_item("f_sigma", s.f_sigma)?;
    d.set_item("f_v0", s.f_v0)?;
    d.set_item("f_h", s.f_h)?;
    d.set_item("f_sigma_sigma", s.f_sigma_sigma)?;
    d.set_item("f_v0_sigma", s.f_v0_sigma)?;
    d.set_item("f_h_sigma", s.f_h_sigma)?;
    Ok(d)
}

#[pymodule]
fn eqfree_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelParams>()?;
    m.add_class::<PyCoarseSettings>()?;
    m.add_class::<PyMicroState>()?;
    m.add_class::<PyLiftContext>()?;
    m.add_function(wrap_pyfunction!(perturbed_state, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_flow_state, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(headways, m)?)?;
    m.add_function(wrap_pyfunction!(restrict, m)?)?;
    m.add_function(wrap_pyfunction!(lift, m)?)?;
    m.add_function(wrap_pyfunction!(macro_eval, m)?)?;
    m.add_function(wrap_pyfunction!(hopf_v0, m)?)?;
    m.add_function(wrap_pyfunction!(hopf_curves, m)?)?;
    m.add_function(wrap_pyfunction!(branch, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_scan, m)?)?;
    m.add_function(wrap_pyfunction!(fd_second_order, m)?)?;
    Ok(())
}
