//! Run configuration: sectioned TOML with unit-suffixed keys and a strict
//! schema (unknown keys are rejected with their location).

use crate::bath::{BrownianTerm, DrudeTerm, SpectralDensity};
use crate::model::{SiteParameters, UnderdampedMode};
use crate::response::{Axis, PathwayClass};
use crate::spectra::{FtOptions, PeakCoordinate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config value `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub site: usize,
    pub frequency_cm1: f64,
    pub huang_rhys: f64,
    pub damping_time_fs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub site_energies_cm1: Vec<f64>,
    pub couplings_cm1: Vec<Vec<f64>>,
    pub dipoles: Vec<f64>,
    #[serde(default)]
    pub modes: Vec<ModeConfig>,
    #[serde(default = "default_n_max")]
    pub vibronic_n_max: usize,
}

fn default_n_max() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathConfig {
    pub temperature_k: f64,
    /// Zero disables the Drude term.
    pub drude_reorganization_cm1: f64,
    pub drude_relaxation_time_fs: f64,
    #[serde(default = "default_k")]
    pub matsubara_terms: usize,
    /// When false, the model's underdamped modes are left out of the bath.
    #[serde(default = "yes")]
    pub include_modes: bool,
}

fn default_k() -> usize {
    2
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_dt")]
    pub dt_fs: f64,
    #[serde(default = "default_tmax")]
    pub t_max_fs: f64,
    #[serde(default = "default_sample")]
    pub sample_fs: f64,
    /// Rotating-frame reference; mean site energy when absent.
    #[serde(default)]
    pub frame_cm1: Option<f64>,
    #[serde(default = "default_budget")]
    pub memory_budget_mb: f64,
    #[serde(default = "yes")]
    pub tail_terminator: bool,
    #[serde(default = "yes")]
    pub depth_closure: bool,
    /// `ground`, `site:K`, `exciton:K` or `superposition:J,K` (exciton indices).
    #[serde(default = "default_initial")]
    pub initial_state: String,
}

fn default_depth() -> usize {
    5
}
fn default_dt() -> f64 {
    0.25
}
fn default_tmax() -> f64 {
    1000.0
}
fn default_sample() -> f64 {
    2.0
}
fn default_budget() -> f64 {
    4096.0
}
fn default_initial() -> String {
    "exciton:1".into()
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            depth: default_depth(),
            dt_fs: default_dt(),
            t_max_fs: default_tmax(),
            sample_fs: default_sample(),
            frame_cm1: None,
            memory_budget_mb: default_budget(),
            tail_terminator: true,
            depth_closure: true,
            initial_state: default_initial(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseConfig {
    pub omega1_cm1: f64,
    #[serde(default)]
    pub delta_omega_cm1: f64,
    pub duration_fs: f64,
    #[serde(default = "default_amp")]
    pub amplitude_cm1: f64,
}

fn default_amp() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Perturbative,
    Phasecycle,
    Both,
}

impl std::str::FromStr for Method {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "perturbative" => Ok(Method::Perturbative),
            "phasecycle" => Ok(Method::Phasecycle),
            "both" => Ok(Method::Both),
            other => Err(invalid("method", format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Perturbative => "perturbative",
            Method::Phasecycle => "phasecycle",
            Method::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    /// Kernel step on all three axes.
    #[serde(default = "default_step")]
    pub step_fs: f64,
    /// `[start, stop, step]`.
    pub tau_grid_fs: [f64; 3],
    pub waiting_grid_fs: [f64; 3],
    pub t_grid_fs: [f64; 3],
    /// Pathway classes to compute; empty means all.
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default = "default_cycle")]
    pub phase_cycle: [usize; 3],
}

fn default_method() -> Method {
    Method::Perturbative
}
fn default_step() -> f64 {
    2.0
}
fn default_cycle() -> [usize; 3] {
    [4, 3, 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakConfig {
    pub label: String,
    pub omega_tau_cm1: f64,
    pub omega_t_cm1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectraConfig {
    #[serde(default = "default_apod")]
    pub apodization_fraction: f64,
    #[serde(default = "default_pad")]
    pub zero_pad: usize,
    #[serde(default = "default_window")]
    pub window_fs: [f64; 2],
    #[serde(default = "default_peaks")]
    pub peaks: Vec<PeakConfig>,
    /// Waiting times whose full spectra are written.
    #[serde(default = "default_out_t")]
    pub output_waiting_fs: Vec<f64>,
    /// Frequency range of written spectra on both axes.
    #[serde(default = "default_range")]
    pub output_range_cm1: [f64; 2],
    /// Waiting time of the total-intensity figure.
    #[serde(default = "default_int_t")]
    pub intensity_waiting_fs: f64,
}

fn default_apod() -> f64 {
    0.25
}
fn default_pad() -> usize {
    4
}
fn default_window() -> [f64; 2] {
    [100.0, 1000.0]
}
fn default_peaks() -> Vec<PeakConfig> {
    PeakCoordinate::defaults()
        .into_iter()
        .map(|p| PeakConfig { label: p.label, omega_tau_cm1: p.omega_tau_cm1, omega_t_cm1: p.omega_t_cm1 })
        .collect()
}
fn default_out_t() -> Vec<f64> {
    vec![100.0]
}
fn default_range() -> [f64; 2] {
    [15500.0, 19500.0]
}
fn default_int_t() -> f64 {
    100.0
}

impl Default for SpectraConfig {
    fn default() -> Self {
        SpectraConfig {
            apodization_fraction: default_apod(),
            zero_pad: default_pad(),
            window_fs: default_window(),
            peaks: default_peaks(),
            output_waiting_fs: default_out_t(),
            output_range_cm1: default_range(),
            intensity_waiting_fs: default_int_t(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub delta_omega_cm1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisorderConfig {
    pub sigma_cm1: Vec<f64>,
    #[serde(default = "one")]
    pub n_samples: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridFormat {
    Csv,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_format")]
    pub format: GridFormat,
}

fn default_format() -> GridFormat {
    GridFormat::Raw
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { format: default_format() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub bath: BathConfig,
    #[serde(default)]
    pub propagation: PropagationConfig,
    pub pulses: PulseConfig,
    pub response: ResponseConfig,
    #[serde(default)]
    pub spectra: SpectraConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub disorder: Option<DisorderConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be ≥ 0, got {v}")))
    }
}

fn grid_axis(key: &str, g: [f64; 3]) -> Result<Axis, ConfigError> {
    let [start, stop, step] = g;
    positive(&format!("{key}[2]"), step)?;
    if !(start.is_finite() && stop.is_finite()) || stop < start {
        return Err(invalid(key, format!("need start ≤ stop, got [{start}, {stop}]")));
    }
    Ok(Axis::span(start, stop, step))
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        RunConfig::from_toml_str(&s)
    }

    /// Fully materialized config (defaults written out).
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema(self.schema_version));
        }
        self.site_parameters()
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        let n = self.model.site_energies_cm1.len();
        for (i, m) in self.model.modes.iter().enumerate() {
            if m.site >= n {
                return Err(invalid(&format!("model.modes[{i}].site"), format!("site {} out of range for {n} sites", m.site)));
            }
            positive(&format!("model.modes[{i}].frequency_cm1"), m.frequency_cm1)?;
            non_negative(&format!("model.modes[{i}].huang_rhys"), m.huang_rhys)?;
            positive(&format!("model.modes[{i}].damping_time_fs"), m.damping_time_fs)?;
        }
        if self.model.vibronic_n_max < 1 {
            return Err(invalid("model.vibronic_n_max", "must be ≥ 1"));
        }
        positive("bath.temperature_k", self.bath.temperature_k)?;
        non_negative("bath.drude_reorganization_cm1", self.bath.drude_reorganization_cm1)?;
        positive("bath.drude_relaxation_time_fs", self.bath.drude_relaxation_time_fs)?;
        let p = &self.propagation;
        positive("propagation.dt_fs", p.dt_fs)?;
        non_negative("propagation.t_max_fs", p.t_max_fs)?;
        positive("propagation.sample_fs", p.sample_fs)?;
        positive("propagation.memory_budget_mb", p.memory_budget_mb)?;
        if let Some(f) = p.frame_cm1 {
            non_negative("propagation.frame_cm1", f)?;
        }
        self.initial_state()?;
        positive("pulses.omega1_cm1", self.pulses.omega1_cm1)?;
        non_negative("pulses.delta_omega_cm1", self.pulses.delta_omega_cm1)?;
        positive("pulses.duration_fs", self.pulses.duration_fs)?;
        non_negative("pulses.amplitude_cm1", self.pulses.amplitude_cm1)?;
        positive("response.step_fs", self.response.step_fs)?;
        self.signal_axes()?;
        self.classes()?;
        if self.response.phase_cycle.iter().any(|&k| k < 2) {
            return Err(invalid("response.phase_cycle", "each count must be ≥ 2"));
        }
        let s = &self.spectra;
        if !(0.0..=1.0).contains(&s.apodization_fraction) {
            return Err(invalid("spectra.apodization_fraction", "must lie in [0, 1]"));
        }
        if s.zero_pad < 1 {
            return Err(invalid("spectra.zero_pad", "must be ≥ 1"));
        }
        if s.window_fs[1] <= s.window_fs[0] {
            return Err(invalid("spectra.window_fs", "stop must exceed start"));
        }
        if s.output_range_cm1[1] <= s.output_range_cm1[0] {
            return Err(invalid("spectra.output_range_cm1", "stop must exceed start"));
        }
        if let Some(sw) = &self.sweep {
            if sw.delta_omega_cm1.is_empty() {
                return Err(invalid("sweep.delta_omega_cm1", "needs at least one value"));
            }
            for v in &sw.delta_omega_cm1 {
                non_negative("sweep.delta_omega_cm1", *v)?;
            }
        }
        if let Some(d) = &self.disorder {
            if d.sigma_cm1.len() != n {
                return Err(invalid("disorder.sigma_cm1", format!("expected {n} entries, got {}", d.sigma_cm1.len())));
            }
            for v in &d.sigma_cm1 {
                non_negative("disorder.sigma_cm1", *v)?;
            }
            if d.n_samples < 1 {
                return Err(invalid("disorder.n_samples", "must be ≥ 1"));
            }
        }
        Ok(())
    }

    pub fn site_parameters(&self) -> SiteParameters {
        SiteParameters {
            site_energies_cm1: self.model.site_energies_cm1.clone(),
            couplings_cm1: self.model.couplings_cm1.clone(),
            dipoles: self.model.dipoles.clone(),
        }
    }

    pub fn site_modes(&self) -> Vec<Vec<UnderdampedMode>> {
        let mut out = vec![Vec::new(); self.model.site_energies_cm1.len()];
        for m in &self.model.modes {
            out[m.site].push(UnderdampedMode { frequency_cm1: m.frequency_cm1, huang_rhys: m.huang_rhys, damping_time_fs: m.damping_time_fs });
        }
        out
    }

    /// Spectral density of site `k`.
    pub fn spectral_density(&self, k: usize) -> Result<SpectralDensity, ConfigError> {
        let drude = (self.bath.drude_reorganization_cm1 > 0.0).then_some(DrudeTerm {
            reorganization_cm1: self.bath.drude_reorganization_cm1,
            relaxation_time_fs: self.bath.drude_relaxation_time_fs,
        });
        let modes = if self.bath.include_modes { self.site_modes().swap_remove(k) } else { Vec::new() };
        let under = modes
            .iter()
            .map(|m| BrownianTerm { reorganization_cm1: m.reorganization_cm1(), frequency_cm1: m.frequency_cm1, damping_time_fs: m.damping_time_fs })
            .filter(|b| b.reorganization_cm1 > 0.0)
            .collect();
        SpectralDensity::new(drude, under).map_err(|e| invalid("bath", e.to_string()))
    }

    pub fn frame_cm1(&self) -> f64 {
        self.propagation.frame_cm1.unwrap_or_else(|| {
            let e = &self.model.site_energies_cm1;
            e.iter().sum::<f64>() / e.len() as f64
        })
    }

    pub fn signal_axes(&self) -> Result<(Axis, Axis, Axis), ConfigError> {
        let r = &self.response;
        Ok((grid_axis("response.tau_grid_fs", r.tau_grid_fs)?, grid_axis("response.waiting_grid_fs", r.waiting_grid_fs)?, grid_axis("response.t_grid_fs", r.t_grid_fs)?))
    }

    pub fn classes(&self) -> Result<Vec<PathwayClass>, ConfigError> {
        if self.response.classes.is_empty() {
            return Ok(PathwayClass::ALL.to_vec());
        }
        self.response
            .classes
            .iter()
            .map(|s| PathwayClass::from_label(s).ok_or_else(|| invalid("response.classes", format!("unknown class `{s}`"))))
            .collect()
    }

    pub fn ft_options(&self) -> FtOptions {
        FtOptions { apodization_fraction: self.spectra.apodization_fraction, zero_pad: self.spectra.zero_pad }
    }

    pub fn peaks(&self) -> Vec<PeakCoordinate> {
        self.spectra.peaks.iter().map(|p| PeakCoordinate::new(&p.label, p.omega_tau_cm1, p.omega_t_cm1)).collect()
    }

    pub fn initial_state(&self) -> Result<InitialState, ConfigError> {
        InitialState::parse(&self.propagation.initial_state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialState {
    Ground,
    Site(usize),
    Exciton(usize),
    Superposition(usize, usize),
}

impl InitialState {
    pub fn parse(s: &str) -> Result<InitialState, ConfigError> {
        let bad = || invalid("propagation.initial_state", format!("cannot parse `{s}`"));
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        match kind.trim() {
            "ground" => Ok(InitialState::Ground),
            "site" => Ok(InitialState::Site(num(arg)?)),
            "exciton" => Ok(InitialState::Exciton(num(arg)?)),
            "superposition" => {
                let (a, b) = arg.split_once(',').ok_or_else(bad)?;
                Ok(InitialState::Superposition(num(a)?, num(b)?))
            }
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
schema_version = 1
[model]
site_energies_cm1 = [17050.0, 17750.0]
couplings_cm1 = [[0.0, 200.0], [200.0, 0.0]]
dipoles = [1.0, 1.0]
[[model.modes]]
site = 0
frequency_cm1 = 800.0
huang_rhys = 0.05
damping_time_fs = 1000.0
[bath]
temperature_k = 300.0
drude_reorganization_cm1 = 50.0
drude_relaxation_time_fs = 100.0
[pulses]
omega1_cm1 = 17400.0
duration_fs = 10.0
[response]
tau_grid_fs = [0.0, 256.0, 2.0]
waiting_grid_fs = [100.0, 1000.0, 20.0]
t_grid_fs = [0.0, 256.0, 2.0]
"#;

    #[test]
    fn defaults_materialize_and_round_trip() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.propagation.depth, 5);
        assert_eq!(c.bath.matsubara_terms, 2);
        assert_eq!(c.response.phase_cycle, [4, 3, 3]);
        assert_eq!(c.frame_cm1(), 17400.0);
        let (tau, w, t) = c.signal_axes().unwrap();
        assert_eq!((tau.n, w.n, t.n), (129, 46, 129));
        let again = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let bad = MINIMAL.replace("duration_fs = 10.0", "duration_fs = 10.0\nduraton = 3");
        let err = RunConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("duraton"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn physical_checks() {
        let bad = MINIMAL.replace("temperature_k = 300.0", "temperature_k = -3.0");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(ConfigError::Invalid { .. })));
        let bad = MINIMAL.replace("[[0.0, 200.0], [200.0, 0.0]]", "[[0.0, 200.0], [100.0, 0.0]]");
        assert!(RunConfig::from_toml_str(&bad).is_err());
        assert_eq!(InitialState::parse("superposition:0,1").unwrap(), InitialState::Superposition(0, 1));
        assert!(InitialState::parse("exciton:x").is_err());
    }
}
