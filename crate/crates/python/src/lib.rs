//! Python bindings. Matrices cross the boundary as nested lists and
//! structured results as dicts; configuration objects accept the same JSON
//! the CLI reads.

use edubal::analysis;
use edubal::identification::{self, FirstOrderFit, TimeSeries};
use edubal::model::{self, PlantState, RationalTF};
use edubal::reproduction;
use edubal::schema;
use edubal::service::{Server, ServerConfig, ServerHandle};
use edubal::simulation::{self, SimConfig};
use edubal::synthesis::{self, LQRWeights};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(value).map_err(value_err)?)
}

type Rows = Vec<Vec<f64>>;

fn matrix_rows(m: &edubal::numerics::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row_slice(i).to_vec()).collect()
}

fn complex_pairs(zs: &[edubal::numerics::Complex64]) -> Vec<(f64, f64)> {
    zs.iter().map(|z| (z.re, z.im)).collect()
}

/// Physical parameters of the robot.
#[pyclass(name = "RobotParams", from_py_object)]
#[derive(Clone)]
struct PyParams {
    inner: model::RobotParams,
}

#[pymethods]
impl PyParams {
    #[new]
    #[pyo3(signature = (m=None, r=None, l=None, g=None, k=None, t_em=None))]
    fn new(
        m: Option<f64>,
        r: Option<f64>,
        l: Option<f64>,
        g: Option<f64>,
        k: Option<f64>,
        t_em: Option<f64>,
    ) -> PyResult<Self> {
        let d = model::RobotParams::default();
        let inner = model::RobotParams {
            m: m.unwrap_or(d.m),
            r: r.unwrap_or(d.r),
            l: l.unwrap_or(d.l),
            g: g.unwrap_or(d.g),
            k: k.unwrap_or(d.k),
            t_em: t_em.unwrap_or(d.t_em),
        };
        inner.validate().map_err(value_err)?;
        Ok(PyParams { inner })
    }

    /// Parses the `key = value` text format.
    #[staticmethod]
    fn from_kv(text: &str) -> PyResult<Self> {
        model::RobotParams::from_kv_str(text)
            .map(|inner| PyParams { inner })
            .map_err(value_err)
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv_string()
    }

    #[getter]
    fn m(&self) -> f64 {
        self.inner.m
    }
    #[getter]
    fn r(&self) -> f64 {
        self.inner.r
    }
    #[getter]
    fn l(&self) -> f64 {
        self.inner.l
    }
    #[getter]
    fn g(&self) -> f64 {
        self.inner.g
    }
    #[getter]
    fn k(&self) -> f64 {
        self.inner.k
    }
    #[getter]
    fn t_em(&self) -> f64 {
        self.inner.t_em
    }
    #[getter]
    fn eta(&self) -> f64 {
        self.inner.eta()
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "RobotParams(m={}, r={}, l={}, g={}, k={}, t_em={})",
            p.m, p.r, p.l, p.g, p.k, p.t_em
        )
    }
}

fn params_or_default(p: Option<PyParams>) -> model::RobotParams {
    p.map(|p| p.inner).unwrap_or_default()
}

/// Linearized model about the upright equilibrium as `(A, B, C)`.
#[pyfunction]
#[pyo3(signature = (params=None))]
fn linearize(params: Option<PyParams>) -> PyResult<(Rows, Rows, Rows)> {
    let sys = model::linearize(&params_or_default(params)).map_err(value_err)?;
    Ok((
        matrix_rows(&sys.a),
        matrix_rows(&sys.b),
        matrix_rows(&sys.c),
    ))
}

/// LQR design for the 3-state (`states=3`) or 4-state model.
#[pyfunction]
#[pyo3(signature = (q, r, states=4, params=None))]
fn lqr<'py>(
    py: Python<'py>,
    q: Vec<f64>,
    r: f64,
    states: usize,
    params: Option<PyParams>,
) -> PyResult<Bound<'py, PyDict>> {
    let w = LQRWeights::new(q, r).map_err(value_err)?;
    let p = params_or_default(params);
    let d = match states {
        3 => synthesis::lqr3(&p, &w),
        4 => synthesis::lqr4(&p, &w),
        n => return Err(value_err(format!("states must be 3 or 4, got {n}"))),
    }
    .map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("k", d.gains.k.clone())?;
    out.set_item("convention", d.gains.convention.clone())?;
    out.set_item("p", matrix_rows(&d.p))?;
    out.set_item("care_residual", d.residual)?;
    out.set_item("closed_loop_poles", complex_pairs(&d.closed_loop_poles))?;
    Ok(out)
}

/// First-order motor fit; returns `(K_m, tau, residual_rms)`.
#[pyfunction]
fn identify(t: Vec<f64>, u: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let data = TimeSeries::new(t, u, y).map_err(value_err)?;
    let fit = identification::fit_first_order(&data).map_err(value_err)?;
    Ok((fit.gain, fit.tau, fit.residual_rms))
}

/// Synthetic square-wave step experiment; returns `(t, u, y)`.
#[pyfunction]
#[pyo3(signature = (gain=2.6, tau=0.038, dt=1e-3, horizon=1.0, noise=0.0, seed=0))]
fn gen_step(
    gain: f64,
    tau: f64,
    dt: f64,
    horizon: f64,
    noise: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let plant = FirstOrderFit::new(gain, tau);
    let steps = identification::default_step_sequence(horizon);
    let d = identification::generate_step_experiment(&plant, &steps, dt, horizon, noise, seed)
        .map_err(value_err)?;
    Ok((d.t, d.u, d.y))
}

/// PI gains `(Kp, Ki)` for `K/(tau s + 1)` from the settle-time rule.
#[pyfunction]
#[pyo3(signature = (gain, tau, settle_time=0.5, max_natural_freq=30.0))]
fn pi_design(gain: f64, tau: f64, settle_time: f64, max_natural_freq: f64) -> PyResult<(f64, f64)> {
    let g = synthesis::pi_pole_placement(
        &FirstOrderFit::new(gain, tau),
        settle_time,
        max_natural_freq,
    )
    .map_err(value_err)?;
    Ok((g.kp, g.ki))
}

fn tf(num: Vec<f64>, den: Vec<f64>) -> PyResult<RationalTF> {
    RationalTF::from_coeffs(&num, &den).map_err(value_err)
}

/// Coefficients `(num, den)` of the published position transfer function.
#[pyfunction]
fn position_tf() -> (Vec<f64>, Vec<f64>) {
    let g = edubal::fixtures::position_tf();
    (g.num().coeffs().to_vec(), g.den().coeffs().to_vec())
}

/// Smallest proportional gain at which `den + k·num` changes stability.
#[pyfunction]
fn critical_gain(num: Vec<f64>, den: Vec<f64>) -> PyResult<f64> {
    analysis::critical_gain(&tf(num, den)?).map_err(value_err)
}

/// Closure poles `den + k·num` as `(re, im)` pairs.
#[pyfunction]
fn closure_poles(num: Vec<f64>, den: Vec<f64>, k: f64) -> PyResult<Vec<(f64, f64)>> {
    Ok(complex_pairs(
        &analysis::closure_poles(&tf(num, den)?, k).map_err(value_err)?,
    ))
}

/// Unit-step response `(t, y)` of the closed loop under proportional gain `kp`.
#[pyfunction]
#[pyo3(signature = (num, den, kp, horizon=5.0, dt=1e-3))]
fn step_response(
    num: Vec<f64>,
    den: Vec<f64>,
    kp: f64,
    horizon: f64,
    dt: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let g = tf(num, den)?.feedback(kp).map_err(value_err)?;
    let s = analysis::step_response(&g, horizon, dt).map_err(value_err)?;
    Ok((s.t, s.y))
}

/// Gain and phase margins as a dict.
#[pyfunction]
fn margins<'py>(py: Python<'py>, num: Vec<f64>, den: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let fr =
        analysis::nyquist(&tf(num, den)?, &analysis::default_omega_grid()).map_err(value_err)?;
    let m = &fr.margins;
    let out = PyDict::new(py);
    out.set_item("gain_margin", m.gain_margin)?;
    out.set_item("gain_margin_db", m.gain_margin_db)?;
    out.set_item("phase_margin_deg", m.phase_margin_deg)?;
    out.set_item("phase_crossover", m.phase_crossover)?;
    out.set_item("gain_crossover", m.gain_crossover)?;
    out.set_item("indicates_stable", m.indicates_stable())?;
    Ok(out)
}

fn sim_config(config: Option<&str>) -> PyResult<SimConfig> {
    match config {
        None | Some("recovery") => Ok(edubal::fixtures::recovery_config()),
        Some(text) => schema::from_json::<SimConfig>(text).map_err(value_err),
    }
}

/// Runs a batch experiment. `config` is SimConfig JSON or `"recovery"`.
/// Returns a list of telemetry frames as dicts.
#[pyfunction]
#[pyo3(signature = (config=None, params=None))]
fn simulate<'py>(
    py: Python<'py>,
    config: Option<&str>,
    params: Option<PyParams>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = sim_config(config)?;
    let frames = simulation::run_experiment(&cfg, &params_or_default(params)).map_err(value_err)?;
    to_py(py, &frames)
}

/// Same run as [`simulate`], rendered as the CLI's CSV log.
#[pyfunction]
#[pyo3(signature = (config=None, params=None))]
fn simulate_csv(config: Option<&str>, params: Option<PyParams>) -> PyResult<String> {
    let cfg = sim_config(config)?;
    let frames = simulation::run_experiment(&cfg, &params_or_default(params)).map_err(value_err)?;
    Ok(simulation::frames_to_csv(&frames))
}

/// Total mechanical energy of the state `[phi, phi_dot, theta, theta_dot]`.
#[pyfunction]
#[pyo3(signature = (state, params=None))]
fn energy(state: [f64; 4], params: Option<PyParams>) -> f64 {
    model::mechanical_energy(&PlantState::from_array(state), &params_or_default(params))
}

/// The reproduction battery as a dict with `params` and `checks`.
#[pyfunction]
#[pyo3(signature = (params=None))]
fn paper_suite<'py>(py: Python<'py>, params: Option<PyParams>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &reproduction::run(&params_or_default(params)))
}

/// Background simulation service; see `docs/protocol.md`.
#[pyclass(name = "Server")]
struct PyServer {
    handle: Option<ServerHandle>,
}

#[pymethods]
impl PyServer {
    #[new]
    #[pyo3(signature = (port=0, addr="127.0.0.1", ui_dir=None, max_sessions=8))]
    fn new(
        port: u16,
        addr: &str,
        ui_dir: Option<std::path::PathBuf>,
        max_sessions: usize,
    ) -> PyResult<Self> {
        let cfg = ServerConfig {
            addr: addr.to_string(),
            port,
            ui_dir,
            max_sessions,
            ..ServerConfig::default()
        };
        let server = Server::bind(cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let handle = server
            .spawn()
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(PyServer {
            handle: Some(handle),
        })
    }

    #[getter]
    fn port(&self) -> PyResult<u16> {
        self.handle
            .as_ref()
            .map(|h| h.addr().port())
            .ok_or_else(|| PyRuntimeError::new_err("server is shut down"))
    }

    #[getter]
    fn session_count(&self) -> usize {
        self.handle.as_ref().map_or(0, |h| h.session_count())
    }

    fn shutdown(&mut self) {
        if let Some(h) = self.handle.take() {
            h.shutdown();
        }
    }
}

#[pymodule]
pub fn pyedubal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyParams>()?;
    m.add_class::<PyServer>()?;
    m.add_function(wrap_pyfunction!(linearize, m)?)?;
    m.add_function(wrap_pyfunction!(lqr, m)?)?;
    m.add_function(wrap_pyfunction!(identify, m)?)?;
    m.add_function(wrap_pyfunction!(gen_step, m)?)?;
    m.add_function(wrap_pyfunction!(pi_design, m)?)?;
    m.add_function(wrap_pyfunction!(position_tf, m)?)?;
    m.add_function(wrap_pyfunction!(critical_gain, m)?)?;
    m.add_function(wrap_pyfunction!(closure_poles, m)?)?;
    m.add_function(wrap_pyfunction!(step_response, m)?)?;
    m.add_function(wrap_pyfunction!(margins, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_csv, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(paper_suite, m)?)?;
    m.add("DEFAULT_PORT", edubal::service::DEFAULT_PORT)?;
    Ok(())
}
