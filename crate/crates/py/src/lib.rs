use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use bqkd_core::bits::BitString;
use bqkd_core::cascade::{run_cascade, CascadeConfig, Direction};
use bqkd_core::config::RunConfig;
use bqkd_core::keyrate::{self, BiasPoint, BiasSearch, KeyRateParams, OptimizeInput};
use bqkd_core::privacy::{self, HashSpec};
use bqkd_core::session::{self, SessionError, TransportKind};
use bqkd_core::source;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn bits(v: &[bool]) -> BitString {
    BitString::from_bools(v)
}

fn to_vec(b: &BitString) -> Vec<bool> {
    b.iter().collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn point_dict<'py>(py: Python<'py>, p: &BiasPoint) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("q_a", p.q_a)?;
    d.set_item("q_b", p.q_b)?;
    d.set_item("eps_x", p.eps_x)?;
    d.set_item("eps_z", p.eps_z)?;
    d.set_item("p_eps_x", p.budget.p_eps_x)?;
    d.set_item("p_eps_z", p.budget.p_eps_z)?;
    d.set_item("rate", p.rate)?;
    Ok(d)
}

#[pyfunction]
fn binary_entropy(x: f64) -> PyResult<f64> {
    keyrate::binary_entropy(x).map_err(value_err)
}

/// Returns `(probability, degenerate)`.
#[pyfunction]
fn sampling_bound(eps: f64, n: u64, e: f64) -> PyResult<(f64, bool)> {
    let b = keyrate::sampling_bound(eps, n, e).map_err(value_err)?;
    Ok((b.probability, b.degenerate))
}

#[pyfunction]
fn solve_epsilon(n: u64, e: f64, target: f64) -> PyResult<f64> {
    keyrate::solve_epsilon(n, e, target).map_err(value_err)
}

#[pyfunction]
fn visibility_to_error(visibility: f64) -> PyResult<f64> {
    source::visibility_to_error(visibility).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (q_a, q_b, e_bx, e_bz, f_x=1.0, f_z=1.0, eps_x=0.0, eps_z=0.0))]
#[allow(clippy::too_many_arguments)]
fn key_rate(q_a: f64, q_b: f64, e_bx: f64, e_bz: f64, f_x: f64, f_z: f64, eps_x: f64, eps_z: f64) -> PyResult<f64> {
    let p = KeyRateParams {
        q_a,
        q_b,
        e_bx,
        e_bz,
        f_x,
        f_z,
        eps_x,
        eps_z,
    };
    keyrate::key_rate(&p).map(|r| r.rate).map_err(value_err)
}

fn optimize_input(n_total: f64, e_bx: f64, e_bz: f64, f_x: f64, f_z: f64, p_eps: f64) -> PyResult<OptimizeInput> {
    let input = OptimizeInput {
        n_total,
        e_bx,
        e_bz,
        f_x,
        f_z,
        p_eps,
    };
    input.validate().map_err(value_err)?;
    Ok(input)
}

#[pyfunction]
#[pyo3(signature = (n_total, e_bx, e_bz, f_x=1.31, f_z=1.59, p_eps=1e-6, asymmetric=false))]
#[allow(clippy::too_many_arguments)]
fn optimize_bias<'py>(
    py: Python<'py>,
    n_total: f64,
    e_bx: f64,
    e_bz: f64,
    f_x: f64,
    f_z: f64,
    p_eps: f64,
    asymmetric: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let input = optimize_input(n_total, e_bx, e_bz, f_x, f_z, p_eps)?;
    let search = if asymmetric { BiasSearch::Asymmetric } else { BiasSearch::Symmetric };
    let r = keyrate::optimize_bias(&input, search).map_err(value_err)?;
    let d = point_dict(py, &r.best)?;
    d.set_item("positive", r.positive)?;
    Ok(d)
}

/// Rate along `q_A = q_B = q` as a list of dicts.
#[pyfunction]
#[pyo3(signature = (n_total, e_bx, e_bz, f_x=1.31, f_z=1.59, p_eps=1e-6))]
fn symmetric_curve<'py>(
    py: Python<'py>,
    n_total: f64,
    e_bx: f64,
    e_bz: f64,
    f_x: f64,
    f_z: f64,
    p_eps: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let input = optimize_input(n_total, e_bx, e_bz, f_x, f_z, p_eps)?;
    let curve = keyrate::symmetric_curve(&input).map_err(value_err)?;
    curve.iter().map(|p| point_dict(py, p)).collect()
}

/// Reconciles Bob's key against Alice's and returns the corrected key with
/// the leakage accounting.
#[pyfunction]
#[pyo3(signature = (key_a, key_b, qber, seed=0, num_passes=3, s=40))]
fn cascade<'py>(
    py: Python<'py>,
    key_a: Vec<bool>,
    key_b: Vec<bool>,
    qber: f64,
    seed: u64,
    num_passes: usize,
    s: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = CascadeConfig {
        num_passes,
        s,
        ..CascadeConfig::default()
    };
    let out = py
        .detach(|| run_cascade(&bits(&key_a), &bits(&key_b), &cfg, seed, qber))
        .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("corrected", to_vec(&out.corrected))?;
    d.set_item("bits_revealed", out.stats.bits_revealed())?;
    d.set_item("parity_bits", out.transcript.parity_bits(Direction::AliceToBob))?;
    d.set_item("errors_corrected", out.stats.errors_corrected())?;
    d.set_item("block_sizes", out.stats.block_sizes_per_pass.clone())?;
    d.set_item("efficiency", out.stats.efficiency())?;
    Ok(d)
}

/// Toeplitz hash of `key` to `m` bits; `seed` must hold `len(key) + m - 1` bits.
#[pyfunction]
fn pa_hash(key: Vec<bool>, seed: Vec<bool>, m: usize) -> PyResult<Vec<bool>> {
    let spec = HashSpec::new(key.len(), m, bits(&seed)).map_err(value_err)?;
    privacy::pa_hash(&bits(&key), &spec).map(|b| to_vec(&b)).map_err(value_err)
}

#[pyfunction]
fn verification_tag(key: Vec<bool>, tag_seed: Vec<bool>, tag_len: usize) -> PyResult<Vec<bool>> {
    privacy::verification_tag(&bits(&key), &bits(&tag_seed), tag_len)
        .map(|b| to_vec(&b))
        .map_err(value_err)
}

/// Finished session: the shared report and key.
#[pyclass(frozen)]
struct Session {
    report_json: String,
    #[pyo3(get)]
    final_key: Vec<bool>,
    #[pyo3(get)]
    final_key_bytes: Vec<u8>,
    #[pyo3(get)]
    leak_x: u64,
    #[pyo3(get)]
    leak_z: u64,
}

#[pymethods]
impl Session {
    #[getter]
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.report_json)
    }

    fn __len__(&self) -> usize {
        self.final_key.len()
    }

    fn __repr__(&self) -> String {
        format!("Session(final_len={}, leak_x={}, leak_z={})", self.final_key.len(), self.leak_x, self.leak_z)
    }
}

/// Runs both parties from a TOML run configuration.
#[pyfunction]
#[pyo3(signature = (config_toml, transport="channel", seed=None, rounds=None))]
fn run_session(py: Python<'_>, config_toml: &str, transport: &str, seed: Option<u64>, rounds: Option<u64>) -> PyResult<Session> {
    let mut cfg = RunConfig::parse(config_toml).map_err(value_err)?;
    if let Some(s) = seed {
        cfg.session.seed = s;
    }
    if let Some(n) = rounds {
        cfg.session.rounds = n;
    }
    cfg.validate().map_err(value_err)?;
    let kind = match transport {
        "channel" => TransportKind::Channel,
        "tcp" => TransportKind::Tcp,
        other => return Err(PyValueError::new_err(format!("unknown transport {other:?}"))),
    };
    let session_cfg = cfg.session();
    let out = py.detach(|| session::run_session(&session_cfg, kind)).map_err(|f| match f.error {
        e @ SessionError::Config(_) => value_err(e),
        e => PyRuntimeError::new_err(e.to_string()),
    })?;
    let r = out.report();
    Ok(Session {
        report_json: r.to_json(),
        final_key: to_vec(&out.alice.final_key),
        final_key_bytes: out.alice.final_key.to_bytes_msb(),
        leak_x: r.leak_x,
        leak_z: r.leak_z,
    })
}

#[pymodule]
fn bqkd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(binary_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(sampling_bound, m)?)?;
    m.add_function(wrap_pyfunction!(solve_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(visibility_to_error, m)?)?;
    m.add_function(wrap_pyfunction!(key_rate, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_bias, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_curve, m)?)?;
    m.add_function(wrap_pyfunction!(cascade, m)?)?;
    m.add_function(wrap_pyfunction!(pa_hash, m)?)?;
    m.add_function(wrap_pyfunction!(verification_tag, m)?)?;
    m.add_function(wrap_pyfunction!(run_session, m)?)?;
    m.add_class::<Session>()?;
    Ok(())
}
