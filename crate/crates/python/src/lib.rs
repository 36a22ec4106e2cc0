//! Python module `heom2d`: configs, propagation, 2D spectra and sweeps.

use heom2d_core::commands;
use heom2d_core::config::{Method, RunConfig};
use heom2d_core::model::{diagonalize_manifold, Manifold};
use heom2d_core::pipeline::{self, Analysis, PipelineError};
use heom2d_core::response::SignalLabel;
use heom2d_core::spectra::Spectrum2D;
use pyo3::exceptions::{PyMemoryError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;

fn py_err(e: PipelineError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyMemoryError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_method(s: &str) -> PyResult<Method> {
    s.parse().map_err(|e: heom2d_core::config::ConfigError| PyValueError::new_err(e.to_string()))
}

fn parse_label(s: &str) -> PyResult<SignalLabel> {
    match s {
        "total" => Ok(SignalLabel::Total),
        "ground" => Ok(SignalLabel::Ground),
        "excited" => Ok(SignalLabel::Excited),
        other => Err(PyValueError::new_err(format!("unknown signal label `{other}`"))),
    }
}

/// Validated run configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_path(path: PathBuf) -> PyResult<Self> {
        RunConfig::from_path(&path).map(|inner| PyConfig { inner }).map_err(|e| py_err(e.into()))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml_str(text).map(|inner| PyConfig { inner }).map_err(|e| py_err(e.into()))
    }

    /// TOML text with every default filled in.
    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn delta_omega_cm1(&self) -> f64 {
        self.inner.pulses.delta_omega_cm1
    }

    #[setter]
    fn set_delta_omega_cm1(&mut self, v: f64) -> PyResult<()> {
        let mut c = self.inner.clone();
        c.pulses.delta_omega_cm1 = v;
        c.validate().map_err(|e| py_err(e.into()))?;
        self.inner = c;
        Ok(())
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.propagation.depth
    }

    #[setter]
    fn set_depth(&mut self, v: usize) -> PyResult<()> {
        let mut c = self.inner.clone();
        c.propagation.depth = v;
        c.validate().map_err(|e| py_err(e.into()))?;
        self.inner = c;
        Ok(())
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.response.method.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Config(sites={}, delta_omega_cm1={}, depth={})", self.inner.model.site_energies_cm1.len(), self.inner.pulses.delta_omega_cm1, self.inner.propagation.depth)
    }
}

#[pyclass(name = "Trajectory", skip_from_py_object)]
struct PyTrajectory {
    #[pyo3(get)]
    time_fs: Vec<f64>,
    #[pyo3(get)]
    site_populations: Vec<Vec<f64>>,
    #[pyo3(get)]
    exciton_populations: Vec<Vec<f64>>,
    /// (re, im) of the exciton coherence; empty for a monomer.
    #[pyo3(get)]
    exciton_coherence: Vec<(f64, f64)>,
    #[pyo3(get)]
    trace: Vec<f64>,
    #[pyo3(get)]
    max_trace_drift: f64,
    #[pyo3(get)]
    max_hermiticity_defect: f64,
}

/// A cropped rephasing spectrum, values indexed `[iω_τ][iω_t]`.
#[pyclass(name = "Spectrum", skip_from_py_object)]
struct PySpectrum {
    inner: Spectrum2D,
}

#[pymethods]
impl PySpectrum {
    #[getter]
    fn label(&self) -> String {
        self.inner.label.name()
    }

    #[getter]
    fn waiting_fs(&self) -> f64 {
        self.inner.waiting_fs
    }

    #[getter]
    fn omega_tau_cm1(&self) -> Vec<f64> {
        self.inner.omega_tau_cm1.clone()
    }

    #[getter]
    fn omega_t_cm1(&self) -> Vec<f64> {
        self.inner.omega_t_cm1.clone()
    }

    fn abs(&self) -> Vec<Vec<f64>> {
        self.grid(f64::hypot)
    }

    fn real(&self) -> Vec<Vec<f64>> {
        self.grid(|re, _| re)
    }

    fn imag(&self) -> Vec<Vec<f64>> {
        self.grid(|_, im| im)
    }
}

impl PySpectrum {
    fn grid(&self, f: impl Fn(f64, f64) -> f64) -> Vec<Vec<f64>> {
        let n = self.inner.omega_t_cm1.len().max(1);
        self.inner.data.chunks(n).map(|row| row.iter().map(|z| f(z.re, z.im)).collect()).collect()
    }
}

#[pyclass(name = "SpectraResult", skip_from_py_object)]
struct PySpectraResult {
    analysis: Analysis,
    #[pyo3(get)]
    cross_method_rms: Option<f64>,
    #[pyo3(get)]
    dqc_share: Option<f64>,
}

#[pymethods]
impl PySpectraResult {
    #[getter]
    fn total_intensity(&self) -> f64 {
        self.analysis.total_intensity
    }

    #[getter]
    fn peaks(&self) -> Vec<String> {
        self.analysis.peaks.iter().map(|p| p.peak.label.clone()).collect()
    }

    /// Ground over excited oscillation amplitude per peak.
    #[getter]
    fn suppression_ratios(&self) -> BTreeMap<String, Option<f64>> {
        self.analysis.peaks.iter().map(|p| (p.peak.label.clone(), p.suppression_ratio)).collect()
    }

    fn spectra(&self) -> Vec<PySpectrum> {
        self.analysis.spectra.iter().map(|s| PySpectrum { inner: s.clone() }).collect()
    }

    /// (T, re, im) of a peak transient; label is total, ground or excited.
    fn transient(&self, peak: &str, label: &str) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let s = self.series(peak, label)?;
        let tr = &s.transient;
        Ok((tr.waiting_fs.clone(), tr.values.iter().map(|z| z.re).collect(), tr.values.iter().map(|z| z.im).collect()))
    }

    /// Oscillation metrics of a peak transient magnitude.
    fn metrics(&self, peak: &str, label: &str) -> PyResult<BTreeMap<String, f64>> {
        let m = &self.series(peak, label)?.metrics;
        Ok([
            ("amplitude", m.amplitude),
            ("frequency_cm1", m.frequency_cm1),
            ("fitted_amplitude", m.fitted_amplitude),
            ("window_start_fs", m.window_fs.0),
            ("window_stop_fs", m.window_fs.1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect())
    }
}

impl PySpectraResult {
    fn series(&self, peak: &str, label: &str) -> PyResult<&pipeline::LabelledTransient> {
        let l = parse_label(label)?;
        self.analysis
            .peaks
            .iter()
            .find(|p| p.peak.label == peak)
            .and_then(|p| p.get(l))
            .ok_or_else(|| PyValueError::new_err(format!("no transient for peak `{peak}` label `{label}`")))
    }
}

/// Single-excitation exciton energies (cm^-1), ascending.
#[pyfunction]
fn exciton_energies(config: &PyConfig) -> PyResult<Vec<f64>> {
    let s = pipeline::setup(&config.inner).map_err(py_err)?;
    let b = diagonalize_manifold(&s.model, Manifold::Single).map_err(|e| py_err(e.into()))?;
    Ok(b.eigenvalues.to_vec())
}

#[pyfunction]
fn propagate(py: Python<'_>, config: &PyConfig) -> PyResult<PyTrajectory> {
    let cfg = config.inner.clone();
    let tr = py.detach(move || pipeline::setup(&cfg).and_then(|s| pipeline::run_propagate(&s))).map_err(py_err)?;
    Ok(PyTrajectory {
        time_fs: tr.time_fs,
        site_populations: tr.site_populations,
        exciton_populations: tr.exciton_populations,
        exciton_coherence: tr.exciton_coherence.iter().map(|z| (z.re, z.im)).collect(),
        trace: tr.trace,
        max_trace_drift: tr.diagnostics.max_trace_drift,
        max_hermiticity_defect: tr.diagnostics.max_hermiticity_defect,
    })
}

#[pyfunction]
#[pyo3(signature = (config, method=None))]
fn spectra2d(py: Python<'_>, config: &PyConfig, method: Option<&str>) -> PyResult<PySpectraResult> {
    let m = method.map(parse_method).transpose()?.unwrap_or(config.inner.response.method);
    let cfg = config.inner.clone();
    let run = py.detach(move || pipeline::run_spectra2d(&cfg, m, cfg.seed)).map_err(py_err)?;
    Ok(PySpectraResult { analysis: run.analysis, cross_method_rms: run.cross_method_rms, dqc_share: run.dqc_share })
}

/// Rows of (ΔΩ, total intensity, intensity ratio, {peak: suppression ratio}).
#[pyfunction]
#[pyo3(signature = (config, values=None))]
#[allow(clippy::type_complexity)]
fn sweep(py: Python<'_>, config: &PyConfig, values: Option<Vec<f64>>) -> PyResult<Vec<(f64, f64, f64, BTreeMap<String, f64>)>> {
    let cfg = config.inner.clone();
    let values = values.unwrap_or_else(|| commands::sweep_values(&cfg));
    let res = py.detach(move || pipeline::run_sweep(&cfg, &values, cfg.seed)).map_err(py_err)?;
    Ok(res.rows.into_iter().map(|r| (r.delta_omega_cm1, r.total_intensity, r.intensity_ratio, r.suppression.into_iter().collect())).collect())
}

/// Runs a CLI subcommand (propagate, spectra2d, sweep) into `out`; returns the written file paths.
#[pyfunction]
fn write_run(py: Python<'_>, command: &str, config: &PyConfig, out: PathBuf) -> PyResult<Vec<String>> {
    let cfg = config.inner.clone();
    let command = command.to_string();
    let manifest = py
        .detach(move || match command.as_str() {
            "propagate" => commands::cmd_propagate(&cfg, &out, false).map(Some),
            "spectra2d" => commands::cmd_spectra2d(&cfg, cfg.response.method, &out).map(Some),
            "sweep" => commands::cmd_sweep(&cfg, &out).map(Some),
            _ => Ok(None),
        })
        .map_err(py_err)?
        .ok_or_else(|| PyValueError::new_err("command must be propagate, spectra2d or sweep"))?;
    Ok(manifest.files.into_iter().map(|f| f.path).collect())
}

/// Renders plot files for a run directory after verifying its checksums.
#[pyfunction]
fn plotdata(dir: PathBuf) -> PyResult<Vec<String>> {
    commands::cmd_plotdata(&dir).map_err(py_err)
}

#[pymodule]
fn heom2d(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PySpectrum>()?;
    m.add_class::<PySpectraResult>()?;
    m.add_function(wrap_pyfunction!(exciton_energies, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(spectra2d, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(write_run, m)?)?;
    m.add_function(wrap_pyfunction!(plotdata, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_parsing() {
        assert_eq!(parse_method("both").unwrap(), Method::Both);
        assert!(parse_method("sideways").is_err());
        assert_eq!(parse_label("excited").unwrap(), SignalLabel::Excited);
        assert!(parse_label("bath").is_err());
    }
}
