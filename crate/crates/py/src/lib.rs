//! Python bindings: poses, chains, calibration, manipulability surrogates,
//! sessions, policies and the wire codec.

use nalgebra::{DVector, Vector3, Vector6};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use teleop_core::bridge;
use teleop_core::chunkpolicy;
use teleop_core::extcalib::{self, CalibSample, SolverOptions};
use teleop_core::manipfield::{self, eval_surrogate};
use teleop_core::session::{self, FeedbackFlags, ScenarioKind, SessionConfig};
use teleop_core::{liegroup, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Diverged { .. } | Error::SurrogateDiverged { .. } | Error::ChannelClosed => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Rigid transform; 12 numbers, row-major rotation then translation.
#[pyclass(name = "Pose", module = "teleop_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPose(liegroup::Pose);

#[pymethods]
impl PyPose {
    #[new]
    fn new(values: [f64; 12]) -> PyResult<Self> {
        liegroup::Pose::from_array(&values).map(Self).map_err(err)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(liegroup::Pose::identity())
    }

    /// `exp` of a twist `[wx, wy, wz, vx, vy, vz]`.
    #[staticmethod]
    fn exp(xi: [f64; 6]) -> PyResult<Self> {
        liegroup::exp_map(&liegroup::Twist6::from_vector(&Vector6::from_row_slice(&xi))).map(Self).map_err(err)
    }

    fn log(&self) -> PyResult<[f64; 6]> {
        let v = liegroup::log_map(&self.0).map_err(err)?.to_vector();
        Ok([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.0.transform_point(&Vector3::from(p));
        [v.x, v.y, v.z]
    }

    fn to_list(&self) -> [f64; 12] {
        self.0.to_array()
    }

    fn __repr__(&self) -> String {
        format!("Pose({:?})", self.0.to_array())
    }
}

#[pyclass(name = "KinematicChain", module = "teleop_py", frozen)]
struct PyChain(teleop_core::KinematicChain);

#[pymethods]
impl PyChain {
    #[staticmethod]
    fn reference_arm() -> Self {
        Self(teleop_core::KinematicChain::reference_arm())
    }

    #[staticmethod]
    fn planar(lengths: Vec<f64>) -> PyResult<Self> {
        teleop_core::KinematicChain::planar(&lengths).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        teleop_core::KinematicChain::from_json(text).map(Self).map_err(err)
    }

    #[getter]
    fn dof(&self) -> usize {
        self.0.dof()
    }

    fn forward_kinematics(&self, q: Vec<f64>) -> PyResult<PyPose> {
        self.0.forward_kinematics(&DVector::from_vec(q)).map(PyPose).map_err(err)
    }

    /// 6×n rows, linear velocity block first.
    fn jacobian(&self, q: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let j = self.0.geometric_jacobian(&DVector::from_vec(q)).map_err(err)?;
        Ok(j.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    fn manipulability(&self, q: Vec<f64>) -> PyResult<f64> {
        self.0.manipulability(&DVector::from_vec(q)).map_err(err)
    }

    fn gravity_torques(&self, q: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.0.gravity_torques(&DVector::from_vec(q)).map_err(err)?.as_slice().to_vec())
    }
}

#[pyclass(name = "Surrogate", module = "teleop_py", frozen)]
struct PySurrogate(manipfield::Surrogate);

#[pymethods]
impl PySurrogate {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        manipfield::Surrogate::from_json(text).map(Self).map_err(err)
    }

    /// The session's reference-arm surrogate (trained on first use).
    #[staticmethod]
    fn reference() -> Self {
        Self((*session::reference_surrogate()).clone())
    }

    /// `(m_hat, gradient)` at a mount-frame point.
    fn eval(&self, x: [f64; 3]) -> (f64, [f64; 3]) {
        let (m, g) = eval_surrogate(&self.0, &Vector3::from(x));
        (m, [g.x, g.y, g.z])
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }
}

#[pyclass(name = "PolicyModel", module = "teleop_py", frozen)]
struct PyPolicy(chunkpolicy::PolicyModel);

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        chunkpolicy::PolicyModel::from_json(text).map(Self).map_err(err)
    }

    /// Trains on records given as JSON lines; returns the model and final loss.
    #[staticmethod]
    #[pyo3(signature = (records_jsonl, steps=2000, ablate_torque=false, seed=0))]
    fn train(records_jsonl: &str, steps: usize, ablate_torque: bool, seed: u64) -> PyResult<(Self, f64)> {
        let records: Vec<session::DatasetRecord> = records_jsonl
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(json_err)?;
        let cfg = chunkpolicy::PolicyConfig { steps, ablate_torque, seed, ..Default::default() };
        let (m, curve) = chunkpolicy::train(&records, &cfg).map_err(err)?;
        Ok((Self(m), curve.last().map_or(f64::NAN, |c| c.loss)))
    }

    /// Action chunk (rows of `2n + 3`) for one observation.
    #[pyo3(signature = (q, tau, extra, latent=None))]
    fn infer_chunk(&self, q: Vec<f64>, tau: Vec<f64>, extra: Vec<f64>, latent: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let obs = chunkpolicy::PolicyObservation { q, tau, extra };
        let c = self.0.infer_chunk(&obs, latent.as_deref()).map_err(err)?;
        Ok((0..c.horizon).map(|h| c.row(h).to_vec()).collect())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }
}

/// Contact-gated synthetic records as JSON lines.
#[pyfunction]
#[pyo3(signature = (episodes=20, ticks=40, dof=6, seed=0))]
fn contact_gated_dataset(episodes: usize, ticks: usize, dof: usize, seed: u64) -> PyResult<String> {
    let recs = chunkpolicy::contact_gated_dataset(episodes, ticks, dof, seed);
    let lines: Vec<String> = recs.iter().map(serde_json::to_string).collect::<Result<_, _>>().map_err(json_err)?;
    Ok(lines.join("\n"))
}

/// Calibrates from a JSON sample array; returns the estimate as JSON.
#[pyfunction]
fn calib_solve(samples_json: &str, init_w: &PyPose, init_h: &PyPose) -> PyResult<String> {
    let samples: Vec<CalibSample> = serde_json::from_str(samples_json).map_err(json_err)?;
    let est = extcalib::solve_extrinsics(&samples, &init_w.0, &init_h.0, &SolverOptions::default()).map_err(err)?;
    serde_json::to_string(&est).map_err(json_err)
}

/// Synthetic calibration samples around the reference extrinsics, as JSON.
#[pyfunction]
#[pyo3(signature = (n=10, sigma=0.0, seed=0))]
fn calib_synthetic(n: usize, sigma: f64, seed: u64) -> PyResult<(String, PyPose, PyPose)> {
    let (w, h) = extcalib::reference_extrinsics();
    let noise = extcalib::TagNoise { sigma_rot: sigma, sigma_trans: sigma };
    let s = extcalib::generate_synthetic_session(&w, &h, n, noise, seed).map_err(err)?;
    Ok((serde_json::to_string(&s).map_err(json_err)?, PyPose(w), PyPose(h)))
}

/// Runs a scripted episode; returns `(metrics_json, log_jsonl)`.
#[pyfunction]
#[pyo3(signature = (scenario, flags="all", seed=0, duration=None))]
fn run_session(scenario: &str, flags: &str, seed: u64, duration: Option<f64>) -> PyResult<(String, String)> {
    let kind: ScenarioKind = scenario.parse().map_err(err)?;
    let mut cfg = SessionConfig::new(kind, seed, FeedbackFlags::parse(flags).map_err(err)?);
    cfg.max_duration = duration;
    let log = session::run_scripted(&cfg).map_err(err)?;
    let m = session::compute_metrics(&log, &log.meta.success_rule).map_err(err)?;
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).map_err(err)?;
    Ok((serde_json::to_string(&m).map_err(json_err)?, String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))?))
}

/// Canonical re-encoding of a wire frame; raises on invalid frames.
#[pyfunction]
fn wire_roundtrip(frame: &str) -> PyResult<String> {
    bridge::encode(&bridge::decode(frame).map_err(err)?).map_err(err)
}

/// Kind tag of a valid wire frame.
#[pyfunction]
fn wire_kind(frame: &str) -> PyResult<&'static str> {
    Ok(bridge::decode(frame).map_err(err)?.kind())
}

#[pymodule]
fn teleop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyChain>()?;
    m.add_class::<PySurrogate>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(contact_gated_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(calib_solve, m)?)?;
    m.add_function(wrap_pyfunction!(calib_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_session, m)?)?;
    m.add_function(wrap_pyfunction!(wire_roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(wire_kind, m)?)?;
    m.add("DEFAULT_PORT", bridge::DEFAULT_PORT)?;
    Ok(())
}
