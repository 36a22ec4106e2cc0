//! Run orchestration shared by the CLI and the Python bindings.

use crate::bath::{correlation_expansion, BathError, CorrelationExpansion};
use crate::config::{ConfigError, InitialState, Method, RunConfig};
use crate::heom::{
    build_hierarchy, exciton_populations, propagate, Block, BlockGenerator, Diagnostics, HeomError, Hierarchy, HierarchyConfig,
    HierarchyState, OpenSystem,
};
use crate::model::{build_model, diagonalize_manifold, Manifold, ModelError, VibronicModel};
use crate::pulses::{multi_color_sequence, PulseError, PulseSequence};
use crate::response::{
    convolve_pulses, enumerate_pathways, impulsive_kernels, kernel_memory_mb, nonperturbative_signal, required_kernel_grids,
    PathwayDiagram, ResponseError, ResponseKernel, Signal3, SignalGrid, SignalLabel, SignalSet,
};
use crate::spectra::{
    oscillation_metrics, peak_transient, rephasing_spectrum, sample_site_energies, suppression_ratio, DisorderSpec, OscillationMetrics,
    PeakCoordinate, PeakTransient, SpectraError, Spectrum2D,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

type C64 = Complex64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bath(#[from] BathError),
    #[error(transparent)]
    Heom(#[from] HeomError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Response(#[from] ResponseError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("checksum mismatch for {file}: manifest {expected}, found {found}")]
    Checksum { file: String, expected: String, found: String },
    #[error("missing output {0}")]
    MissingOutput(String),
    #[error("malformed {file}: {reason}")]
    Malformed { file: String, reason: String },
}

impl PipelineError {
    /// Process exit code: 2 config, 3 numerical or I/O failure, 4 resource budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Model(_) | PipelineError::Pulse(_) => 2,
            PipelineError::Bath(BathError::MatsubaraInsufficient { .. }) => 2,
            PipelineError::Heom(HeomError::ResourceBudget { .. }) => 4,
            PipelineError::Response(ResponseError::ResourceBudget { .. }) => 4,
            PipelineError::Response(ResponseError::Heom(HeomError::ResourceBudget { .. })) => 4,
            PipelineError::Heom(HeomError::StepTooCoarse { .. } | HeomError::Stiff { .. }) => 2,
            PipelineError::Response(ResponseError::Grid(_) | ResponseError::Nyquist { .. } | ResponseError::Coverage { .. }) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Model, bath expansions and rotating-frame hierarchy of a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub model: VibronicModel,
    pub expansions: Vec<CorrelationExpansion>,
    pub hierarchy: Hierarchy,
}

pub fn setup(cfg: &RunConfig) -> Result<Setup> {
    setup_with_energies(cfg, &cfg.model.site_energies_cm1)
}

/// [`setup`] with the site energies replaced (disorder realizations).
pub fn setup_with_energies(cfg: &RunConfig, energies: &[f64]) -> Result<Setup> {
    let mut params = cfg.site_parameters();
    params.site_energies_cm1 = energies.to_vec();
    let model = build_model(params, cfg.site_modes())?;
    let mut expansions = Vec::new();
    for k in 0..model.n_sites() {
        let sd = cfg.spectral_density(k)?;
        expansions.push(if sd.is_empty() { CorrelationExpansion::default() } else { correlation_expansion(&sd, cfg.bath.temperature_k, cfg.bath.matsubara_terms)? });
    }
    let p = &cfg.propagation;
    let hc = HierarchyConfig { depth: p.depth, tail_terminator: p.tail_terminator, depth_closure: p.depth_closure, memory_budget_mb: p.memory_budget_mb };
    let hierarchy = build_hierarchy(&OpenSystem::electronic(&model), &expansions, hc)?.rotating_frame(cfg.frame_cm1());
    Ok(Setup { config: cfg.clone(), model, expansions, hierarchy })
}

/// Physical-ADO observables over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub time_fs: Vec<f64>,
    pub site_populations: Vec<Vec<f64>>,
    pub exciton_populations: Vec<Vec<f64>>,
    /// `⟨ε₂|ρ|ε₁⟩` for aggregates with at least two sites.
    pub exciton_coherence: Vec<C64>,
    pub trace: Vec<f64>,
    pub diagnostics: Diagnostics,
}

fn initial_density(model: &VibronicModel, init: InitialState) -> Result<DMatrix<C64>> {
    let d = model.dim();
    let mut psi = vec![0.0; d];
    let single = model.manifold_range(Manifold::Single);
    let basis = diagonalize_manifold(model, Manifold::Single)?;
    let n = single.len();
    let check = |k: usize| -> Result<()> {
        if k >= n {
            return Err(ConfigError::Invalid { key: "propagation.initial_state".into(), reason: format!("index {k} out of range for {n} sites") }.into());
        }
        Ok(())
    };
    match init {
        InitialState::Ground => psi[0] = 1.0,
        InitialState::Site(k) => {
            check(k)?;
            psi[single.start + k] = 1.0;
        }
        InitialState::Exciton(k) => {
            check(k)?;
            for r in 0..n {
                psi[single.start + r] = basis.eigenvectors[(r, k)];
            }
        }
        InitialState::Superposition(a, b) => {
            check(a)?;
            check(b)?;
            for r in 0..n {
                psi[single.start + r] = (basis.eigenvectors[(r, a)] + basis.eigenvectors[(r, b)]) / 2f64.sqrt();
            }
        }
    }
    Ok(DMatrix::from_fn(d, d, |a, b| C64::new(psi[a] * psi[b], 0.0)))
}

pub fn run_propagate(s: &Setup) -> Result<Trajectory> {
    let p = &s.config.propagation;
    let rho0 = initial_density(&s.model, s.config.initial_state()?)?;
    let h = &s.hierarchy;
    let x0 = HierarchyState::from_density(h, &rho0);
    let gen = BlockGenerator::new(h, Block::full(h))?;
    let n = (p.t_max_fs / p.sample_fs + 1e-9).floor() as usize + 1;
    let (states, diagnostics) = propagate(&gen, &x0, p.dt_fs, p.sample_fs, n, None)?;
    let single = s.model.manifold_range(Manifold::Single);
    let basis = diagonalize_manifold(&s.model, Manifold::Single)?;
    let mut out = Trajectory {
        time_fs: Vec::new(),
        site_populations: Vec::new(),
        exciton_populations: Vec::new(),
        exciton_coherence: Vec::new(),
        trace: Vec::new(),
        diagnostics,
    };
    for st in &states {
        let rho = st.physical(0);
        out.time_fs.push(st.time_fs);
        out.site_populations.push(single.clone().map(|i| rho[(i, i)].re).collect());
        out.exciton_populations.push(exciton_populations(&s.model, &rho));
        if single.len() >= 2 {
            let sub = rho.view((single.start, single.start), (single.len(), single.len())).into_owned();
            let v = basis.eigenvectors.map(|x| C64::new(x, 0.0));
            let ex = v.transpose() * sub * &v;
            out.exciton_coherence.push(ex[(1, 0)]);
        }
        out.trace.push(st.trace(0).re);
    }
    Ok(out)
}

pub fn signal_grid(cfg: &RunConfig) -> Result<SignalGrid> {
    let (tau, waiting, t) = cfg.signal_axes()?;
    Ok(SignalGrid { tau, waiting, t })
}

pub fn sequence(cfg: &RunConfig, delta_omega_cm1: f64) -> Result<PulseSequence> {
    let p = &cfg.pulses;
    Ok(multi_color_sequence(p.omega1_cm1, delta_omega_cm1, p.duration_fs, p.amplitude_cm1, 0.0, 0.0)?)
}

/// Impulsive kernels for every selected class that contributes on the grid.
#[derive(Debug, Clone)]
pub struct KernelSet {
    pub kernels: Vec<ResponseKernel>,
    pub diagrams: Vec<PathwayDiagram>,
    pub frame_cm1: f64,
    pub wall_s: f64,
}

pub fn compute_kernels(s: &Setup) -> Result<KernelSet> {
    let cfg = &s.config;
    let grid = signal_grid(cfg)?;
    let n_manifolds = if s.model.manifold_range(Manifold::Double).is_empty() { 2 } else { 3 };
    let wanted = cfg.classes()?;
    let diagrams: Vec<PathwayDiagram> = enumerate_pathways(n_manifolds).into_iter().filter(|d| wanted.contains(&d.class)).collect();
    // durations are shared by every pulse center, so ΔΩ = 0 fixes the grids
    let seq = sequence(cfg, 0.0)?;
    let requests: Vec<_> = required_kernel_grids(&diagrams, &seq, &grid, cfg.response.step_fs)?.into_iter().collect();
    let t0 = Instant::now();
    let kernels = if requests.is_empty() {
        Vec::new()
    } else {
        let budget = cfg.propagation.memory_budget_mb;
        let need = kernel_memory_mb(&s.hierarchy, &requests);
        if need > budget {
            return Err(ResponseError::ResourceBudget { required_mb: need, budget_mb: budget }.into());
        }
        impulsive_kernels(&s.hierarchy, &requests, cfg.response.step_fs, cfg.propagation.dt_fs, budget)?
    };
    Ok(KernelSet { kernels, diagrams, frame_cm1: s.hierarchy.frame_cm1, wall_s: t0.elapsed().as_secs_f64() })
}

pub fn perturbative_signals(cfg: &RunConfig, ks: &KernelSet, delta_omega_cm1: f64) -> Result<SignalSet> {
    let grid = signal_grid(cfg)?;
    let seq = sequence(cfg, delta_omega_cm1)?;
    if ks.kernels.is_empty() {
        return Ok(SignalSet { grid, frame_cm1: ks.frame_cm1, delta_omega_cm1, classes: Default::default() });
    }
    Ok(convolve_pulses(&ks.kernels, &ks.diagrams, &seq, &grid, ks.frame_cm1)?)
}

pub fn phase_cycled_signal(s: &Setup, delta_omega_cm1: f64) -> Result<Signal3> {
    let cfg = &s.config;
    let grid = signal_grid(cfg)?;
    let seq = sequence(cfg, delta_omega_cm1)?;
    Ok(nonperturbative_signal(&s.hierarchy, &seq, &grid, cfg.response.phase_cycle, cfg.propagation.dt_fs)?)
}

/// Peak transients of one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledTransient {
    pub label: SignalLabel,
    pub transient: PeakTransient,
    pub metrics: OscillationMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSummary {
    pub peak: PeakCoordinate,
    pub series: Vec<LabelledTransient>,
    /// Ground over excited oscillation amplitude, when both are present.
    pub suppression_ratio: Option<f64>,
}

impl PeakSummary {
    pub fn get(&self, label: SignalLabel) -> Option<&LabelledTransient> {
        self.series.iter().find(|s| s.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub delta_omega_cm1: f64,
    pub peaks: Vec<PeakSummary>,
    /// Grid sum of |total spectrum|² at the intensity waiting time.
    pub total_intensity: f64,
    pub intensity_waiting_fs: f64,
    /// Written spectra, cropped to the output range.
    pub spectra: Vec<Spectrum2D>,
}

fn crop(spec: &Spectrum2D, range: [f64; 2]) -> Spectrum2D {
    let ia: Vec<usize> = (0..spec.omega_tau_cm1.len()).filter(|&i| (range[0]..=range[1]).contains(&spec.omega_tau_cm1[i])).collect();
    let ib: Vec<usize> = (0..spec.omega_t_cm1.len()).filter(|&i| (range[0]..=range[1]).contains(&spec.omega_t_cm1[i])).collect();
    let mut out = spec.clone();
    out.omega_tau_cm1 = ia.iter().map(|&i| spec.omega_tau_cm1[i]).collect();
    out.omega_t_cm1 = ib.iter().map(|&i| spec.omega_t_cm1[i]).collect();
    out.data = ia.iter().flat_map(|&a| ib.iter().map(move |&b| (a, b))).map(|(a, b)| spec.at(a, b)).collect();
    out
}

fn nearest_index(axis: &crate::response::Axis, v: f64) -> usize {
    (0..axis.n).min_by(|&a, &b| (axis.value(a) - v).abs().total_cmp(&(axis.value(b) - v).abs())).unwrap_or(0)
}

/// Spectra, peak transients and oscillation metrics of labelled signals.
pub fn analyze(cfg: &RunConfig, signals: &[Signal3]) -> Result<Analysis> {
    let first = signals.first().ok_or(SpectraError::Empty("signals"))?;
    let opts = cfg.ft_options();
    let peaks = cfg.peaks();
    let grid = first.grid;
    let out_idx: Vec<usize> = cfg.spectra.output_waiting_fs.iter().map(|&t| nearest_index(&grid.waiting, t)).collect();
    let int_idx = nearest_index(&grid.waiting, cfg.spectra.intensity_waiting_fs);
    let window = (cfg.spectra.window_fs[0], cfg.spectra.window_fs[1]);

    struct PerLabel {
        label: SignalLabel,
        transients: Vec<PeakTransient>,
        spectra: Vec<Spectrum2D>,
        intensity: f64,
    }
    let per: Vec<Result<PerLabel>> = signals
        .iter()
        .map(|sig| {
            // keep only peak values per T plus the requested full spectra
            let per_t: Vec<Result<(Vec<C64>, Option<Spectrum2D>, f64)>> = (0..grid.waiting.n)
                .into_par_iter()
                .map(|iw| {
                    let sp = rephasing_spectrum(sig, iw, &opts)?;
                    let vals = peaks
                        .iter()
                        .map(|p| sp.snap(p.omega_tau_cm1, p.omega_t_cm1).map(|(a, b, _)| sp.at(a, b)))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let power = if iw == int_idx { sp.power() } else { 0.0 };
                    let keep = out_idx.contains(&iw).then(|| crop(&sp, cfg.spectra.output_range_cm1));
                    Ok((vals, keep, power))
                })
                .collect();
            let mut values = vec![Vec::new(); peaks.len()];
            let mut spectra = Vec::new();
            let mut intensity = 0.0;
            for r in per_t {
                let (vals, keep, power) = r?;
                for (k, v) in vals.into_iter().enumerate() {
                    values[k].push(v);
                }
                spectra.extend(keep);
                intensity += power;
            }
            // snap metadata from a single spectrum
            let probe = rephasing_spectrum(sig, 0, &opts)?;
            let transients = peaks
                .iter()
                .zip(values)
                .map(|(p, v)| {
                    let mut tr = peak_transient(std::slice::from_ref(&probe), p)?;
                    tr.class = sig.label;
                    tr.waiting_fs = grid.waiting.values();
                    tr.values = v;
                    Ok(tr)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PerLabel { label: sig.label, transients, spectra, intensity })
        })
        .collect();
    let per: Vec<PerLabel> = per.into_iter().collect::<Result<_>>()?;

    let mut summaries = Vec::new();
    for (k, p) in peaks.iter().enumerate() {
        let mut series = Vec::new();
        for pl in &per {
            let tr = pl.transients[k].clone();
            let metrics = oscillation_metrics(&tr.waiting_fs, &tr.magnitudes(), window)?;
            series.push(LabelledTransient { label: pl.label, transient: tr, metrics });
        }
        let g = series.iter().find(|s| s.label == SignalLabel::Ground);
        let e = series.iter().find(|s| s.label == SignalLabel::Excited);
        let ratio = match (g, e) {
            (Some(g), Some(e)) => Some(suppression_ratio(&g.metrics, &e.metrics)),
            _ => None,
        };
        summaries.push(PeakSummary { peak: p.clone(), series, suppression_ratio: ratio });
    }
    let total = per.iter().find(|p| p.label == SignalLabel::Total).unwrap_or(&per[0]);
    Ok(Analysis {
        delta_omega_cm1: first.delta_omega_cm1,
        peaks: summaries,
        total_intensity: total.intensity,
        intensity_waiting_fs: grid.waiting.value(int_idx),
        spectra: per.into_iter().flat_map(|p| p.spectra).collect(),
    })
}

/// Result of one 2D-spectra run.
#[derive(Debug, Clone)]
pub struct SpectraRun {
    pub method: Method,
    pub perturbative: Option<SignalSet>,
    pub phase_cycled: Option<Signal3>,
    pub analysis: Analysis,
    /// Relative RMS between perturbative and phase-cycled totals.
    pub cross_method_rms: Option<f64>,
    /// RMS of the DQC classes relative to the total.
    pub dqc_share: Option<f64>,
    pub kernel_wall_s: f64,
    pub disorder_samples: Vec<Vec<f64>>,
}

fn labelled(set: &SignalSet) -> Vec<Signal3> {
    vec![set.total(), set.ground(), set.excited()]
}

fn dqc_share(set: &SignalSet) -> f64 {
    use crate::response::PathwayClass::{DqcA, DqcB};
    let total = set.total();
    let mut dqc = Signal3::zeros(SignalLabel::Total, set.grid, set.frame_cm1, set.delta_omega_cm1);
    for c in [DqcA, DqcB] {
        if let Some(s) = set.classes.get(&c) {
            dqc.add_assign(s);
        }
    }
    let t = total.rms();
    if t == 0.0 {
        0.0
    } else {
        dqc.rms() / t
    }
}

fn average_sets(mut sets: Vec<SignalSet>) -> SignalSet {
    let n = sets.len() as f64;
    let mut acc = sets.remove(0);
    for s in &sets {
        for (c, sig) in &s.classes {
            acc.classes.get_mut(c).expect("same classes").add_assign(sig);
        }
    }
    if n > 1.0 {
        for sig in acc.classes.values_mut() {
            sig.scale(C64::new(1.0 / n, 0.0));
        }
    }
    acc
}

/// Perturbative signal sets for every disorder realization (one entry without disorder).
pub fn disorder_realizations(cfg: &RunConfig, seed: u64) -> Vec<Vec<f64>> {
    match &cfg.disorder {
        Some(d) if d.sigma_cm1.iter().any(|&s| s > 0.0) => {
            sample_site_energies(&cfg.model.site_energies_cm1, &DisorderSpec { sigma_cm1: d.sigma_cm1.clone(), n_samples: d.n_samples, seed })
        }
        _ => vec![cfg.model.site_energies_cm1.clone()],
    }
}

/// Full 2D-spectra run at the configured ΔΩ.
pub fn run_spectra2d(cfg: &RunConfig, method: Method, seed: u64) -> Result<SpectraRun> {
    let dw = cfg.pulses.delta_omega_cm1;
    let samples = disorder_realizations(cfg, seed);
    let mut kernel_wall = 0.0;
    let mut pert = None;
    let mut pc = None;
    if matches!(method, Method::Perturbative | Method::Both) {
        let mut sets = Vec::new();
        for e in &samples {
            let s = setup_with_energies(cfg, e)?;
            let ks = compute_kernels(&s)?;
            kernel_wall += ks.wall_s;
            sets.push(perturbative_signals(cfg, &ks, dw)?);
        }
        pert = Some(average_sets(sets));
    }
    if matches!(method, Method::Phasecycle | Method::Both) {
        let mut acc: Option<Signal3> = None;
        for e in &samples {
            let s = setup_with_energies(cfg, e)?;
            let sig = phase_cycled_signal(&s, dw)?;
            match acc.as_mut() {
                None => acc = Some(sig),
                Some(a) => a.add_assign(&sig),
            }
        }
        let mut sig = acc.expect("at least one sample");
        if samples.len() > 1 {
            sig.scale(C64::new(1.0 / samples.len() as f64, 0.0));
        }
        pc = Some(sig);
    }
    let signals = match (&pert, &pc) {
        (Some(p), _) => labelled(p),
        (None, Some(s)) => vec![s.clone()],
        _ => unreachable!("method selects at least one route"),
    };
    let analysis = analyze(cfg, &signals)?;
    let cross = match (&pert, &pc) {
        (Some(p), Some(s)) => Some(s.relative_rms(&p.total())),
        _ => None,
    };
    Ok(SpectraRun {
        method,
        dqc_share: pert.as_ref().map(dqc_share),
        perturbative: pert,
        phase_cycled: pc,
        analysis,
        cross_method_rms: cross,
        kernel_wall_s: kernel_wall,
        disorder_samples: samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta_omega_cm1: f64,
    pub total_intensity: f64,
    /// Intensity relative to the first sweep value.
    pub intensity_ratio: f64,
    /// (peak label, suppression ratio).
    pub suppression: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Per peak: suppression ratio non-increasing in ΔΩ within the tolerance.
    pub monotonic: Vec<(String, bool)>,
    pub tolerance: f64,
    #[serde(skip)]
    pub analyses: Vec<Analysis>,
}

pub const SWEEP_TOLERANCE: f64 = 0.05;

/// ΔΩ sweep: kernels are computed once per disorder realization and reused
/// for every pulse configuration.
pub fn run_sweep(cfg: &RunConfig, values: &[f64], seed: u64) -> Result<SweepResult> {
    let samples = disorder_realizations(cfg, seed);
    let kernel_sets: Vec<KernelSet> = samples.iter().map(|e| setup_with_energies(cfg, e).and_then(|s| compute_kernels(&s))).collect::<Result<_>>()?;
    let mut analyses = Vec::new();
    for &dw in values {
        let sets = kernel_sets.iter().map(|ks| perturbative_signals(cfg, ks, dw)).collect::<Result<Vec<_>>>()?;
        analyses.push(analyze(cfg, &labelled(&average_sets(sets)))?);
    }
    Ok(summarize_sweep(values, analyses))
}

pub fn summarize_sweep(values: &[f64], analyses: Vec<Analysis>) -> SweepResult {
    let base = analyses.first().map(|a| a.total_intensity).unwrap_or(1.0);
    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&analyses)
        .map(|(&dw, a)| SweepRow {
            delta_omega_cm1: dw,
            total_intensity: a.total_intensity,
            intensity_ratio: a.total_intensity / base,
            suppression: a.peaks.iter().map(|p| (p.peak.label.clone(), p.suppression_ratio.unwrap_or(f64::NAN))).collect(),
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].delta_omega_cm1.total_cmp(&rows[b].delta_omega_cm1));
    let n_peaks = rows.first().map(|r| r.suppression.len()).unwrap_or(0);
    let monotonic = (0..n_peaks)
        .map(|k| {
            let label = rows[0].suppression[k].0.clone();
            let ok = order.windows(2).all(|w| rows[w[1]].suppression[k].1 <= rows[w[0]].suppression[k].1 * (1.0 + SWEEP_TOLERANCE));
            (label, ok)
        })
        .collect();
    SweepResult { rows, monotonic, tolerance: SWEEP_TOLERANCE, analyses }
}

/// Max-norm change of the physical-ADO trajectory, relative to the
/// trajectory's max-norm, under L+1, K+1 and dt/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceDeltas {
    pub depth: f64,
    pub matsubara: f64,
    pub dt: f64,
}

fn physical_series(s: &Setup, dt_fs: f64) -> Result<Vec<DMatrix<C64>>> {
    let p = &s.config.propagation;
    let rho0 = initial_density(&s.model, s.config.initial_state()?)?;
    let x0 = HierarchyState::from_density(&s.hierarchy, &rho0);
    let gen = BlockGenerator::new(&s.hierarchy, Block::full(&s.hierarchy))?;
    let n = (p.t_max_fs / p.sample_fs + 1e-9).floor() as usize + 1;
    let (states, _) = propagate(&gen, &x0, dt_fs, p.sample_fs, n, None)?;
    Ok(states.iter().map(|st| st.physical(0)).collect())
}

pub fn trajectory_delta(a: &[DMatrix<C64>], b: &[DMatrix<C64>]) -> f64 {
    let scale = a.iter().flat_map(|m| m.iter()).fold(0.0f64, |m, z| m.max(z.norm()));
    let diff = a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y.iter())).fold(0.0f64, |m, (x, y)| m.max((x - y).norm()));
    diff / scale
}

pub fn convergence_deltas(cfg: &RunConfig) -> Result<ConvergenceDeltas> {
    let reference = physical_series(&setup(cfg)?, cfg.propagation.dt_fs)?;
    let mut deeper = cfg.clone();
    deeper.propagation.depth += 1;
    let mut more_k = cfg.clone();
    more_k.bath.matsubara_terms += 1;
    Ok(ConvergenceDeltas {
        depth: trajectory_delta(&reference, &physical_series(&setup(&deeper)?, cfg.propagation.dt_fs)?),
        matsubara: trajectory_delta(&reference, &physical_series(&setup(&more_k)?, cfg.propagation.dt_fs)?),
        dt: trajectory_delta(&reference, &physical_series(&setup(cfg)?, 0.5 * cfg.propagation.dt_fs)?),
    })
}

/// Cropped per-pathway-class spectra at the output waiting times.
pub fn class_spectra(cfg: &RunConfig, set: &SignalSet) -> Result<Vec<Spectrum2D>> {
    let opts = cfg.ft_options();
    let idx: Vec<usize> = cfg.spectra.output_waiting_fs.iter().map(|&t| nearest_index(&set.grid.waiting, t)).collect();
    let mut out = Vec::new();
    for sig in set.classes.values() {
        for &iw in &idx {
            out.push(crop(&rephasing_spectrum(sig, iw, &opts)?, cfg.spectra.output_range_cm1));
        }
    }
    Ok(out)
}
