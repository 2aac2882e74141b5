//! Python bindings for `rfsim`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rfsim::inference::{beat_frequency as beat, dephasing_ratio};
use rfsim::{
    CorrelationOptions, DensityMatrix, DriveEnvelope, EfficiencyChain, EmitterModel, Measured, PulseShape,
    RunOptions, Scenario,
};

fn value_err(e: rfsim::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "EmitterModel", frozen, module = "rfsim_py")]
struct PyEmitter(EmitterModel);

#[pymethods]
impl PyEmitter {
    /// Two-level emitter with lifetime `t1` and coherence time `t2` (ns).
    #[staticmethod]
    #[pyo3(signature = (t1, t2=None, detuning=0.0))]
    fn two_level(t1: f64, t2: Option<f64>, detuning: f64) -> PyResult<Self> {
        let m = EmitterModel::two_level(t1, t2.unwrap_or(2.0 * t1)).map_err(value_err)?;
        Ok(Self(m.with_detuning(detuning)))
    }

    /// V-type emitter; `splitting_ghz` is the fine-structure splitting over 2π.
    #[staticmethod]
    #[pyo3(signature = (t1, splitting_ghz, polarization=None, detection_angle=None))]
    fn vtype(t1: f64, splitting_ghz: f64, polarization: Option<f64>, detection_angle: Option<f64>) -> PyResult<Self> {
        let mut m = EmitterModel::vtype(t1, 2.0 * std::f64::consts::PI * splitting_ghz).map_err(value_err)?;
        if let Some(theta) = polarization {
            m = m.with_polarization(theta);
        }
        if let Some(phi) = detection_angle {
            m = m.with_detection_angle(phi);
        }
        Ok(Self(m))
    }

    #[getter]
    fn t1(&self) -> f64 {
        self.0.t1()
    }

    #[getter]
    fn t2(&self) -> f64 {
        self.0.t2()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn __repr__(&self) -> String {
        format!("EmitterModel({:?}, t1={}, t2={})", self.0.kind(), self.0.t1(), self.0.t2())
    }
}

#[pyclass(name = "DriveEnvelope", frozen, module = "rfsim_py")]
struct PyEnvelope(DriveEnvelope);

fn parse_shape(s: &str) -> PyResult<PulseShape> {
    match s.to_ascii_lowercase().replace('_', "").as_str() {
        "gaussian" => Ok(PulseShape::Gaussian),
        "rectangular" => Ok(PulseShape::Rectangular),
        "lognormal" => Ok(PulseShape::Lognormal),
        "chirpedflat" => Ok(PulseShape::ChirpedFlat),
        other => Err(PyValueError::new_err(format!("unknown pulse shape {other:?}"))),
    }
}

#[pymethods]
impl PyEnvelope {
    /// Pulse of intensity FWHM `width` (ns) and area `area` (rad).
    #[new]
    #[pyo3(signature = (shape, width, area, period=None, extinction_floor=None, lognormal_shape=None, chirp=None))]
    fn new(
        shape: &str,
        width: f64,
        area: f64,
        period: Option<f64>,
        extinction_floor: Option<f64>,
        lognormal_shape: Option<f64>,
        chirp: Option<[f64; 3]>,
    ) -> PyResult<Self> {
        let mut env = DriveEnvelope::new(parse_shape(shape)?, width, area).map_err(value_err)?;
        if let Some(s) = lognormal_shape {
            env = env.with_lognormal_shape(s).map_err(value_err)?;
        }
        if let Some(c) = chirp {
            env = env.with_chirp(c);
        }
        if let Some(p) = period {
            env = env.with_period(p).map_err(value_err)?;
        }
        if let Some(f) = extinction_floor {
            env = env.with_extinction_floor(f).map_err(value_err)?;
        }
        Ok(Self(env.calibrate().map_err(value_err)?))
    }

    /// Ω(t) in rad/ns.
    fn at(&self, t: f64) -> f64 {
        rfsim::envelope_at(&self.0, t)
    }

    #[getter]
    fn peak(&self) -> Option<f64> {
        self.0.peak()
    }

    #[getter]
    fn period(&self) -> Option<f64> {
        self.0.period()
    }

    fn __repr__(&self) -> String {
        format!(
            "DriveEnvelope({:?}, width={}, area={}, period={:?})",
            self.0.shape(),
            self.0.width(),
            self.0.area(),
            self.0.period()
        )
    }
}

/// Integrates from the ground state; returns times, intensity and populations.
#[pyfunction]
#[pyo3(signature = (model, envelope, t_span, h=None))]
fn evolve<'py>(
    py: Python<'py>,
    model: &PyEmitter,
    envelope: &PyEnvelope,
    t_span: f64,
    h: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let (m, e) = (model.0.clone(), envelope.0.clone());
    let h = h.unwrap_or_else(|| rfsim::integrator::default_step(&m, &e));
    let traj = py
        .detach(move || rfsim::evolve(&m, &e, &DensityMatrix::ground(m.dim()), t_span, h))
        .map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("times", &traj.times)?;
    out.set_item("intensity", &traj.intensity)?;
    let pops: Vec<Vec<f64>> = (0..model.0.dim()).map(|i| traj.population(i)).collect();
    out.set_item("populations", pops)?;
    out.set_item("max_trace_drift", traj.max_trace_drift)?;
    Ok(out)
}

/// Pulse-train autocorrelation; returns the delay grid, g², and the peak table.
#[pyfunction]
#[pyo3(signature = (model, envelope, tau_max=0.0, n_side=6, irf_fwhm=None))]
fn pulsed_g2<'py>(
    py: Python<'py>,
    model: &PyEmitter,
    envelope: &PyEnvelope,
    tau_max: f64,
    n_side: usize,
    irf_fwhm: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let (m, e) = (model.0.clone(), envelope.0.clone());
    let (rec, conv) = py
        .detach(move || {
            let opts = CorrelationOptions {
                n_side,
                ..Default::default()
            };
            let rec = rfsim::pulsed_correlation(&m, &e, tau_max, &opts)?;
            let conv = irf_fwhm.map(|f| rfsim::convolve_irf(&rec, f)).transpose()?;
            Ok::<_, rfsim::Error>((rec, conv))
        })
        .map_err(value_err)?;
    let peaks = rec.peaks.as_ref().expect("pulsed records carry peaks");
    let out = PyDict::new(py);
    out.set_item("tau", &rec.tau)?;
    out.set_item("g2", &rec.g2)?;
    out.set_item("g2_zero", peaks.g2_zero())?;
    out.set_item("center", rfsim::continuous_g2_center(&rec))?;
    out.set_item("quasi_cw", peaks.quasi_cw)?;
    let table: Vec<(i64, f64, f64)> = peaks.peaks.iter().map(|p| (p.n, p.tau, p.g2)).collect();
    out.set_item("peaks", table)?;
    if let Some(c) = conv {
        out.set_item("g2_irf", &c.g2)?;
    }
    Ok(out)
}

/// Stationary g²(τ) under constant resonant drive Ω (rad/ns).
#[pyfunction]
#[pyo3(signature = (model, omega, taus, h=1e-3))]
fn cw_g2(py: Python<'_>, model: &PyEmitter, omega: f64, taus: Vec<f64>, h: f64) -> PyResult<Vec<f64>> {
    let m = model.0.clone();
    let rec = py
        .detach(move || rfsim::cw_correlation(&m, omega, &taus, h))
        .map_err(value_err)?;
    Ok(rec.g2)
}

/// Quantum-jump estimate of G²(0): `(g2, sigma, mean_photons)`.
#[pyfunction]
#[pyo3(signature = (model, envelope, n_trajectories=100_000, seed=0))]
fn jump_g2(
    py: Python<'_>,
    model: &PyEmitter,
    envelope: &PyEnvelope,
    n_trajectories: u64,
    seed: u64,
) -> PyResult<(f64, f64, f64)> {
    let (m, e) = (model.0.clone(), envelope.0.clone());
    let est = py
        .detach(move || rfsim::jump_oracle(&m, &e, n_trajectories, seed))
        .map_err(value_err)?;
    Ok((est.g2, est.sigma, est.mean_photons))
}

fn fit_dict<'py>(py: Python<'py>, fit: &rfsim::FitResult) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    for (i, name) in fit.names.iter().enumerate() {
        out.set_item(*name, (fit.values[i], fit.errors[i]))?;
    }
    out.set_item("rss", fit.rss)?;
    out.set_item("converged", fit.converged)?;
    out.set_item("iterations", fit.iterations)?;
    Ok(out)
}

/// Single-exponential fit; keys `t1` and `amplitude` map to (value, sigma).
#[pyfunction]
fn fit_exponential<'py>(py: Python<'py>, t: Vec<f64>, y: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let fit = rfsim::fit_exponential(&t, &y, &Default::default()).map_err(value_err)?;
    fit_dict(py, &fit)
}

/// Rabi-oscillation fit; adds `t2_over_t1` as (value, sigma).
#[pyfunction]
#[pyo3(signature = (t, y, t1=None, chirp=None))]
fn fit_rabi<'py>(
    py: Python<'py>,
    t: Vec<f64>,
    y: Vec<f64>,
    t1: Option<f64>,
    chirp: Option<[f64; 3]>,
) -> PyResult<Bound<'py, PyDict>> {
    let fit = rfsim::fit_rabi(&t, &y, t1, chirp, &Default::default()).map_err(value_err)?;
    let out = fit_dict(py, &fit)?;
    out.set_item("t2_over_t1", dephasing_ratio(&fit, t1))?;
    Ok(out)
}

/// Dominant beat frequency in GHz after `t_start`, or None.
#[pyfunction]
fn beat_frequency(t: Vec<f64>, intensity: Vec<f64>, t_start: f64) -> PyResult<Option<f64>> {
    Ok(beat(&t, &intensity, t_start).map_err(value_err)?.frequency_ghz)
}

/// Visibility from (value, sigma) pairs: returns (raw, corrected or None).
#[pyfunction]
#[pyo3(signature = (perp, par, hbt=None))]
fn tpi_visibility(
    perp: (f64, f64),
    par: (f64, f64),
    hbt: Option<(f64, f64)>,
) -> PyResult<((f64, f64), Option<(f64, f64)>)> {
    let m = |(v, s): (f64, f64)| Measured::new(v, s);
    let vis = rfsim::tpi_visibility(m(perp), m(par), hbt.map(m)).map_err(value_err)?;
    Ok((
        (vis.raw.value, vis.raw.sigma),
        vis.corrected.map(|c| (c.value, c.sigma)),
    ))
}

/// Efficiency accounting; `stages` defaults to the reference optics chain.
#[pyfunction]
#[pyo3(signature = (trigger_mhz, detected_mhz, g2_zero, stages=None))]
fn efficiency_report<'py>(
    py: Python<'py>,
    trigger_mhz: f64,
    detected_mhz: f64,
    g2_zero: f64,
    stages: Option<Vec<(String, f64)>>,
) -> PyResult<Bound<'py, PyDict>> {
    let chain = match stages {
        Some(s) => EfficiencyChain::new(s).map_err(value_err)?,
        None => EfficiencyChain::reference(),
    };
    let r = rfsim::efficiency_report(&chain, trigger_mhz, detected_mhz, g2_zero).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("optics_product", r.optics_product)?;
    out.set_item("overall", r.overall)?;
    out.set_item("extraction", r.extraction)?;
    out.set_item("single_photon_mhz", r.single_photon_mhz)?;
    Ok(out)
}

/// Runs a scenario config; returns the paths written.
#[pyfunction]
#[pyo3(signature = (config, out=None, threads=None, seed=None))]
fn run_scenario(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    threads: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Vec<PathBuf>> {
    let report = py
        .detach(move || {
            let s = Scenario::from_file(&config)?;
            s.run(&RunOptions { out, threads, seed })
        })
        .map_err(|e| match e.exit_code() {
            2 => PyValueError::new_err(e.to_string()),
            _ => PyRuntimeError::new_err(e.to_string()),
        })?;
    Ok(report.outputs.iter().map(|f| report.dir.join(f)).collect())
}

#[pymodule]
fn rfsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEmitter>()?;
    m.add_class::<PyEnvelope>()?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    m.add_function(wrap_pyfunction!(pulsed_g2, m)?)?;
    m.add_function(wrap_pyfunction!(cw_g2, m)?)?;
    m.add_function(wrap_pyfunction!(jump_g2, m)?)?;
    m.add_function(wrap_pyfunction!(fit_exponential, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rabi, m)?)?;
    m.add_function(wrap_pyfunction!(beat_frequency, m)?)?;
    m.add_function(wrap_pyfunction!(tpi_visibility, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
