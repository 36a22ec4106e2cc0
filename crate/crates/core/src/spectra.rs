//! 2D Fourier transforms, peak transients, oscillation metrics, linear
//! absorption and static-disorder averaging.
//!
//! Rephasing convention: the rotating-frame signal carries `e^{+iω′τ}` on the
//! excitation axis and `e^{−iω′t}` on detection, so the τ transform uses
//! `e^{−iω′τ}` and the t transform `e^{+iω′t}`; both peaks then land at
//! positive absolute frequencies `ω = ω′ + Ω_ref`. Transforms are unitary
//! (`1/√(M_τ M_t)` over the zero-padded lengths).

use crate::heom::{apply_dipole, Block, BlockGenerator, Hierarchy, HeomError, HierarchyState, Part, Side};
use crate::model::Manifold;
use crate::response::{Signal3, SignalLabel};
use crate::units::TWO_PI_C;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

type C64 = Complex64;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("non-uniform {0} grid")]
    NonUniform(&'static str),
    #[error("waiting-time index {index} outside signal with {len} points")]
    WaitingIndex { index: usize, len: usize },
    #[error("coordinate ({0:.1}, {1:.1}) cm⁻¹ lies outside the spectral axes")]
    OutsideAxes(f64, f64),
    #[error("window [{start}, {stop}] fs spans {span:.1} fs, shorter than one period ({period:.1} fs) of the dominant frequency")]
    WindowTooShort { start: f64, stop: f64, span: f64, period: f64 },
    #[error("window [{start}, {stop}] fs holds {points} points; need at least 4")]
    WindowPoints { start: f64, stop: f64, points: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Heom(#[from] HeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FtOptions {
    /// Fraction of each record (at its end) under the cos² taper.
    pub apodization_fraction: f64,
    pub zero_pad: usize,
}

impl Default for FtOptions {
    fn default() -> Self {
        FtOptions { apodization_fraction: 0.25, zero_pad: 4 }
    }
}

/// cos² taper over the last `fraction` of `n` samples, reaching zero at the
/// final sample.
pub fn apodization(n: usize, fraction: f64) -> Vec<f64> {
    let m = ((fraction * n as f64).round() as usize).min(n);
    (0..n)
        .map(|k| {
            if m == 0 || k < n - m {
                1.0
            } else {
                let x = (k - (n - m) + 1) as f64 / m as f64;
                (0.5 * PI * x).cos().powi(2)
            }
        })
        .collect()
}

/// Frequency axis (cm⁻¹, ascending) of an `m`-point shifted DFT with step `h`.
fn axis_cm1(m: usize, h: f64, frame: f64) -> Vec<f64> {
    (0..m).map(|k| (k as f64 - (m / 2) as f64) / (m as f64 * h) * 2.0 * PI / TWO_PI_C + frame).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum2D {
    pub label: SignalLabel,
    pub waiting_fs: f64,
    pub delta_omega_cm1: f64,
    pub omega_tau_cm1: Vec<f64>,
    pub omega_t_cm1: Vec<f64>,
    /// `[iω_τ][iω_t]`.
    pub data: Vec<C64>,
    pub options: FtOptions,
    /// Time grids the spectrum was computed from: (start, step, count).
    pub tau_axis: (f64, f64, usize),
    pub t_axis: (f64, f64, usize),
    pub frame_cm1: f64,
}

impl Spectrum2D {
    pub fn at(&self, i_tau: usize, i_t: usize) -> C64 {
        self.data[i_tau * self.omega_t_cm1.len() + i_t]
    }

    /// Nearest grid point to `(ω_τ, ω_t)`, with the distance (cm⁻¹) to it.
    pub fn snap(&self, omega_tau: f64, omega_t: f64) -> Result<(usize, usize, f64), SpectraError> {
        let near = |axis: &[f64], w: f64| -> Option<usize> {
            let step = axis[1] - axis[0];
            if w < axis[0] - 0.5 * step || w > axis[axis.len() - 1] + 0.5 * step {
                return None;
            }
            Some((((w - axis[0]) / step).round() as usize).min(axis.len() - 1))
        };
        let a = near(&self.omega_tau_cm1, omega_tau).ok_or(SpectraError::OutsideAxes(omega_tau, omega_t))?;
        let b = near(&self.omega_t_cm1, omega_t).ok_or(SpectraError::OutsideAxes(omega_tau, omega_t))?;
        let d = ((self.omega_tau_cm1[a] - omega_tau).powi(2) + (self.omega_t_cm1[b] - omega_t).powi(2)).sqrt();
        Ok((a, b, d))
    }

    pub fn power(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn add_assign(&mut self, other: &Spectrum2D) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Second moment of |S| along the diagonal ω_τ = ω_t about its centroid,
    /// using points within `band_cm1` of the diagonal (cm⁻²).
    pub fn diagonal_second_moment(&self, band_cm1: f64) -> f64 {
        let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
        for (a, &x) in self.omega_tau_cm1.iter().enumerate() {
            for (b, &y) in self.omega_t_cm1.iter().enumerate() {
                if (x - y).abs() <= band_cm1 {
                    let m = self.at(a, b).norm();
                    let s = 0.5 * (x + y);
                    w0 += m;
                    w1 += m * s;
                    w2 += m * s * s;
                }
            }
        }
        if w0 == 0.0 {
            return 0.0;
        }
        let mean = w1 / w0;
        w2 / w0 - mean * mean
    }
}

fn time_slice(sig: &Signal3, iw: usize) -> Result<Vec<C64>, SpectraError> {
    if iw >= sig.grid.waiting.n {
        return Err(SpectraError::WaitingIndex { index: iw, len: sig.grid.waiting.n });
    }
    Ok(sig.slice(iw).to_vec())
}

/// Rephasing 2D spectrum of the `(τ, t)` slice at waiting-time index `iw`.
pub fn rephasing_spectrum(sig: &Signal3, iw: usize, opts: &FtOptions) -> Result<Spectrum2D, SpectraError> {
    let g = &sig.grid;
    if !(g.tau.step_fs > 0.0) {
        return Err(SpectraError::NonUniform("τ"));
    }
    if !(g.t.step_fs > 0.0) {
        return Err(SpectraError::NonUniform("t"));
    }
    let (nt_, nx) = (g.tau.n, g.t.n);
    if nt_ == 0 || nx == 0 {
        return Err(SpectraError::Empty("signal grid"));
    }
    let x = time_slice(sig, iw)?;
    let pad = opts.zero_pad.max(1);
    let (ma, mb) = (nt_ * pad, nx * pad);
    let wa = apodization(nt_, opts.apodization_fraction);
    let wb = apodization(nx, opts.apodization_fraction);
    let mut buf = vec![ZERO; ma * mb];
    for a in 0..nt_ {
        for b in 0..nx {
            buf[a * mb + b] = x[a * nx + b] * wa[a] * wb[b];
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    // detection axis: e^{+iωt}
    let inv = planner.plan_fft_inverse(mb);
    for row in buf.chunks_mut(mb) {
        inv.process(row);
    }
    // excitation axis: e^{−iωτ}
    let fwd = planner.plan_fft_forward(ma);
    let mut col = vec![ZERO; ma];
    for b in 0..mb {
        for a in 0..ma {
            col[a] = buf[a * mb + b];
        }
        fwd.process(&mut col);
        for a in 0..ma {
            buf[a * mb + b] = col[a];
        }
    }
    let norm = 1.0 / ((ma * mb) as f64).sqrt();
    let omega_tau = axis_cm1(ma, g.tau.step_fs, sig.frame_cm1);
    let omega_t = axis_cm1(mb, g.t.step_fs, sig.frame_cm1);
    let mut data = vec![ZERO; ma * mb];
    for ia in 0..ma {
        let ka = (ia + ma - ma / 2) % ma;
        let wa = (omega_tau[ia] - sig.frame_cm1) * TWO_PI_C;
        for ib in 0..mb {
            let kb = (ib + mb - mb / 2) % mb;
            let wb = (omega_t[ib] - sig.frame_cm1) * TWO_PI_C;
            // grid origins away from zero contribute a pure phase
            let phase = C64::from_polar(norm, -wa * g.tau.start_fs + wb * g.t.start_fs);
            data[ia * mb + ib] = buf[ka * mb + kb] * phase;
        }
    }
    Ok(Spectrum2D {
        label: sig.label,
        waiting_fs: g.waiting.value(iw),
        delta_omega_cm1: sig.delta_omega_cm1,
        omega_tau_cm1: omega_tau,
        omega_t_cm1: omega_t,
        data,
        options: *opts,
        tau_axis: (g.tau.start_fs, g.tau.step_fs, nt_),
        t_axis: (g.t.start_fs, g.t.step_fs, nx),
        frame_cm1: sig.frame_cm1,
    })
}

/// Spectra at every waiting time of `sig`.
pub fn rephasing_stack(sig: &Signal3, opts: &FtOptions) -> Result<Vec<Spectrum2D>, SpectraError> {
    (0..sig.grid.waiting.n).into_par_iter().map(|iw| rephasing_spectrum(sig, iw, opts)).collect()
}

/// Inverse of [`rephasing_spectrum`]: the apodized `(τ, t)` record.
pub fn inverse_rephasing(spec: &Spectrum2D) -> Vec<C64> {
    let (ma, mb) = (spec.omega_tau_cm1.len(), spec.omega_t_cm1.len());
    let (t0a, _, na) = spec.tau_axis;
    let (t0b, _, nb) = spec.t_axis;
    let norm = 1.0 / ((ma * mb) as f64).sqrt();
    let mut buf = vec![ZERO; ma * mb];
    for ia in 0..ma {
        let ka = (ia + ma - ma / 2) % ma;
        let wa = (spec.omega_tau_cm1[ia] - spec.frame_cm1) * TWO_PI_C;
        for ib in 0..mb {
            let kb = (ib + mb - mb / 2) % mb;
            let wb = (spec.omega_t_cm1[ib] - spec.frame_cm1) * TWO_PI_C;
            buf[ka * mb + kb] = spec.data[ia * mb + ib] * C64::from_polar(norm, wa * t0a - wb * t0b);
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd_t = planner.plan_fft_forward(mb);
    for row in buf.chunks_mut(mb) {
        fwd_t.process(row);
    }
    let inv_tau = planner.plan_fft_inverse(ma);
    let mut col = vec![ZERO; ma];
    for b in 0..mb {
        for a in 0..ma {
            col[a] = buf[a * mb + b];
        }
        inv_tau.process(&mut col);
        for a in 0..ma {
            buf[a * mb + b] = col[a];
        }
    }
    let mut out = vec![ZERO; na * nb];
    for a in 0..na {
        for b in 0..nb {
            out[a * nb + b] = buf[a * mb + b];
        }
    }
    out
}

/// Named peak coordinate (ω_τ, ω_t) in cm⁻¹.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakCoordinate {
    pub label: String,
    pub omega_tau_cm1: f64,
    pub omega_t_cm1: f64,
}

impl PeakCoordinate {
    pub fn new(label: &str, omega_tau_cm1: f64, omega_t_cm1: f64) -> Self {
        PeakCoordinate { label: label.into(), omega_tau_cm1, omega_t_cm1 }
    }

    /// R11, R21, R12, R22 at the exciton energies of the paper dimer.
    pub fn defaults() -> Vec<PeakCoordinate> {
        vec![
            PeakCoordinate::new("R11", 16997.0, 16997.0),
            PeakCoordinate::new("R21", 17803.0, 16997.0),
            PeakCoordinate::new("R12", 16997.0, 17803.0),
            PeakCoordinate::new("R22", 17803.0, 17803.0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakTransient {
    pub peak: PeakCoordinate,
    pub class: SignalLabel,
    pub snapped_cm1: (f64, f64),
    pub snap_distance_cm1: f64,
    pub waiting_fs: Vec<f64>,
    pub values: Vec<C64>,
}

impl PeakTransient {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.norm()).collect()
    }
}

/// Spectral value at the snapped peak coordinate for every spectrum of a
/// waiting-time stack.
pub fn peak_transient(stack: &[Spectrum2D], peak: &PeakCoordinate) -> Result<PeakTransient, SpectraError> {
    let first = stack.first().ok_or(SpectraError::Empty("spectrum stack"))?;
    let (a, b, d) = first.snap(peak.omega_tau_cm1, peak.omega_t_cm1)?;
    let waiting: Vec<f64> = stack.iter().map(|s| s.waiting_fs).collect();
    if waiting.len() > 2 {
        let step = waiting[1] - waiting[0];
        if waiting.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step.abs().max(1.0)) {
            return Err(SpectraError::NonUniform("T"));
        }
    }
    Ok(PeakTransient {
        peak: peak.clone(),
        class: first.label,
        snapped_cm1: (first.omega_tau_cm1[a], first.omega_t_cm1[b]),
        snap_distance_cm1: d,
        waiting_fs: waiting,
        values: stack.iter().map(|s| s.at(a, b)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationMetrics {
    pub window_fs: (f64, f64),
    /// Quadratic baseline `c₀ + c₁x + c₂x²` with `x = (T − T_mid)/half_span`.
    pub baseline: [f64; 3],
    /// Peak-to-peak of the detrended series.
    pub amplitude: f64,
    pub frequency_cm1: f64,
    /// Peak-to-peak (2A) of the least-squares sinusoid at `frequency_cm1`.
    pub fitted_amplitude: f64,
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> [f64; 3] {
    let det = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(m);
    let mut out = [0.0; 3];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut mk = m;
        for i in 0..3 {
            mk[i][k] = r[i];
        }
        *slot = det(mk) / d;
    }
    out
}

/// Joint least-squares fit of a quadratic plus `a cos ωt + b sin ωt`;
/// returns (residual sum of squares, sinusoid amplitude).
fn sinusoid_fit(t: &[f64], x: &[f64], y: &[f64], omega: f64) -> (f64, f64) {
    let mut m = [[0.0; 5]; 5];
    let mut r = [0.0; 5];
    let rows: Vec<[f64; 5]> = t.iter().zip(x).map(|(&ti, &xi)| [1.0, xi, xi * xi, (omega * ti).cos(), (omega * ti).sin()]).collect();
    for (b, &yi) in rows.iter().zip(y) {
        for i in 0..5 {
            for j in 0..5 {
                m[i][j] += b[i] * b[j];
            }
            r[i] += b[i] * yi;
        }
    }
    // Gaussian elimination with partial pivoting
    let mut c = r;
    for col in 0..5 {
        let piv = (col..5).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap_or(col);
        if m[piv][col].abs() < 1e-300 {
            return (f64::INFINITY, 0.0);
        }
        m.swap(col, piv);
        c.swap(col, piv);
        for row in col + 1..5 {
            let f = m[row][col] / m[col][col];
            for k in col..5 {
                m[row][k] -= f * m[col][k];
            }
            c[row] -= f * c[col];
        }
    }
    let mut sol = [0.0; 5];
    for i in (0..5).rev() {
        let mut acc = c[i];
        for k in i + 1..5 {
            acc -= m[i][k] * sol[k];
        }
        sol[i] = acc / m[i][i];
    }
    let rss = rows.iter().zip(y).map(|(b, &yi)| (yi - (0..5).map(|k| b[k] * sol[k]).sum::<f64>()).powi(2)).sum();
    (rss, (sol[3] * sol[3] + sol[4] * sol[4]).sqrt())
}

struct Detrended {
    pts: Vec<(f64, f64)>,
    xs: Vec<f64>,
    resid: Vec<f64>,
    step: f64,
    baseline: [f64; 3],
    amplitude: f64,
}

fn detrend(waiting_fs: &[f64], values: &[f64], window: (f64, f64)) -> Result<Detrended, SpectraError> {
    let pts: Vec<(f64, f64)> = waiting_fs
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= window.0 - 1e-9 && **t <= window.1 + 1e-9)
        .map(|(t, v)| (*t, *v))
        .collect();
    if pts.len() < 4 {
        return Err(SpectraError::WindowPoints { start: window.0, stop: window.1, points: pts.len() });
    }
    let step = pts[1].0 - pts[0].0;
    if pts.windows(2).any(|w| ((w[1].0 - w[0].0) - step).abs() > 1e-9 * step.abs().max(1.0)) {
        return Err(SpectraError::NonUniform("T"));
    }
    let t0 = 0.5 * (pts[0].0 + pts[pts.len() - 1].0);
    let half = 0.5 * (pts[pts.len() - 1].0 - pts[0].0);
    let xs: Vec<f64> = pts.iter().map(|p| (p.0 - t0) / half).collect();
    let mut m = [[0.0; 3]; 3];
    let mut r = [0.0; 3];
    for (x, p) in xs.iter().zip(&pts) {
        let basis = [1.0, *x, x * x];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += basis[i] * basis[j];
            }
            r[i] += basis[i] * p.1;
        }
    }
    let c = solve3(m, r);
    let resid: Vec<f64> = xs.iter().zip(&pts).map(|(x, p)| p.1 - (c[0] + c[1] * x + c[2] * x * x)).collect();
    let amplitude = resid.iter().cloned().fold(f64::MIN, f64::max) - resid.iter().cloned().fold(f64::MAX, f64::min);
    Ok(Detrended { pts, xs, resid, step, baseline: c, amplitude })
}

/// Peak-to-peak of the quadratic-detrended series over `[start, stop]`,
/// without a frequency estimate (usable on windows shorter than a period).
pub fn detrended_amplitude(waiting_fs: &[f64], values: &[f64], window: (f64, f64)) -> Result<f64, SpectraError> {
    Ok(detrend(waiting_fs, values, window)?.amplitude)
}

/// Baseline, amplitude and dominant frequency of a real series over the
/// waiting-time window `[start, stop]`.
pub fn oscillation_metrics(waiting_fs: &[f64], values: &[f64], window: (f64, f64)) -> Result<OscillationMetrics, SpectraError> {
    let Detrended { pts, xs, resid, step, baseline: c, amplitude } = detrend(waiting_fs, values, window)?;

    // dominant frequency: zero-padded FFT with parabolic peak refinement,
    // then a local least-squares refinement
    let n = resid.len();
    let mpad = (16 * n).next_power_of_two();
    let mut buf: Vec<C64> = resid.iter().map(|&v| C64::new(v, 0.0)).collect();
    buf.resize(mpad, ZERO);
    FftPlanner::<f64>::new().plan_fft_forward(mpad).process(&mut buf);
    let mag: Vec<f64> = buf.iter().map(|z| z.norm()).collect();
    let kmax = (1..=mpad / 2).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap_or(1);
    let mut k = kmax as f64;
    if kmax > 1 && kmax < mpad / 2 {
        let (a, b, cc) = (mag[kmax - 1], mag[kmax], mag[kmax + 1]);
        let den = a - 2.0 * b + cc;
        if den.abs() > 0.0 {
            k += 0.5 * (a - cc) / den;
        }
    }
    let nyq = PI / step;
    let mut omega = (2.0 * PI * k / (mpad as f64 * step)).min(nyq);
    let ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let raw: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let bin = 2.0 * PI / (mpad as f64 * step);
    let (mut lo, mut hi) = ((omega - 4.0 * bin).max(0.0), (omega + 4.0 * bin).min(nyq));
    for _ in 0..60 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if sinusoid_fit(&ts, &xs, &raw, m1).0 > sinusoid_fit(&ts, &xs, &raw, m2).0 {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    omega = 0.5 * (lo + hi);
    let fitted = 2.0 * sinusoid_fit(&ts, &xs, &raw, omega).1;
    let scale = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if amplitude > 1e-9 * scale && omega > 0.0 {
        require_full_period((pts[0].0, pts[pts.len() - 1].0), omega / TWO_PI_C).map_err(|e| match e {
            SpectraError::WindowTooShort { span, period, .. } => SpectraError::WindowTooShort { start: window.0, stop: window.1, span, period },
            other => other,
        })?;
    }
    Ok(OscillationMetrics { window_fs: window, baseline: c, amplitude, frequency_cm1: omega / TWO_PI_C, fitted_amplitude: fitted })
}

/// Largest peak-to-peak sinusoid amplitude over frequencies from
/// `min_cm1` to the Nyquist limit, each fitted jointly with a quadratic
/// baseline over `[start, stop]`. Slow relaxation below `min_cm1` is excluded.
pub fn band_amplitude(waiting_fs: &[f64], values: &[f64], window: (f64, f64), min_cm1: f64) -> Result<f64, SpectraError> {
    let Detrended { pts, xs, step, .. } = detrend(waiting_fs, values, window)?;
    let ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let raw: Vec<f64> = pts.iter().map(|p| p.1).collect();
    // the sine column vanishes on the grid at exactly Nyquist
    let hi = PI / step - PI / (step * pts.len() as f64);
    let lo = min_cm1 * TWO_PI_C;
    let n_scan = 400;
    Ok((0..=n_scan)
        .map(|k| lo + (hi - lo) * k as f64 / n_scan as f64)
        .map(|w| 2.0 * sinusoid_fit(&ts, &xs, &raw, w).1)
        .fold(0.0, f64::max))
}

/// Errors unless `[start, stop]` spans at least one period of `frequency_cm1`.
pub fn require_full_period(window: (f64, f64), frequency_cm1: f64) -> Result<(), SpectraError> {
    let span = window.1 - window.0;
    let period = 1.0 / (frequency_cm1 * TWO_PI_C / (2.0 * PI));
    if span < period {
        return Err(SpectraError::WindowTooShort { start: window.0, stop: window.1, span, period });
    }
    Ok(())
}

/// Ground-class over excited-class oscillation amplitude.
pub fn suppression_ratio(ground: &OscillationMetrics, excited: &OscillationMetrics) -> f64 {
    ground.amplitude / excited.amplitude
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Absorption {
    pub time_fs: Vec<f64>,
    /// `⟨μ⁻(t) μ⁺ ρ_eq⟩` in the rotating frame.
    pub polarization: Vec<C64>,
    pub omega_cm1: Vec<f64>,
    /// `Re ∫₀^∞ P(t) e^{i(ω−Ω)t} dt` (fs).
    pub intensity: Vec<f64>,
}

impl Absorption {
    /// `∫ I dω` over the axis, in rad/fs × fs; equals `π Re P(0)` for a
    /// record that has decayed.
    pub fn integrated(&self) -> f64 {
        let dw = (self.omega_cm1[1] - self.omega_cm1[0]) * TWO_PI_C;
        self.intensity.iter().sum::<f64>() * dw
    }

    /// Local maxima above `threshold` × global maximum, ascending.
    pub fn maxima(&self, threshold: f64) -> Vec<f64> {
        let top = self.intensity.iter().cloned().fold(f64::MIN, f64::max);
        let n = self.intensity.len();
        (1..n - 1)
            .filter(|&k| {
                let v = self.intensity[k];
                v > self.intensity[k - 1] && v >= self.intensity[k + 1] && v > threshold * top
            })
            .map(|k| self.omega_cm1[k])
            .collect()
    }
}

/// Linear absorption from the (single, ground) block of the hierarchy,
/// sampled every `step_fs` for `n_samples` points (first point half weight).
pub fn linear_absorption(h: &Hierarchy, dt_fs: f64, step_fs: f64, n_samples: usize, zero_pad: usize) -> Result<Absorption, SpectraError> {
    if n_samples < 2 {
        return Err(SpectraError::Empty("absorption record"));
    }
    let gblk = Block::manifolds(h, Manifold::Ground, Manifold::Ground)?;
    let mut rho = HierarchyState::zeros(h, gblk, 1);
    rho.set(0, 0, 0, 0, C64::new(1.0, 0.0));
    let x = apply_dipole(h, &rho, Side::Ket, Part::Raising)?;
    let gen = BlockGenerator::new(h, x.block.clone())?;
    let (states, _) = crate::heom::propagate(&gen, &x, dt_fs, step_fs, n_samples, None)?;
    let blk = x.block.clone();
    let polarization: Vec<C64> = states
        .iter()
        .map(|s| {
            let mut p = ZERO;
            for r in 0..blk.rows.len() {
                for c in 0..blk.cols.len() {
                    p += s.get(0, r, c, 0) * h.system.raising[(blk.rows.start + r, blk.cols.start + c)];
                }
            }
            p
        })
        .collect();
    let m = n_samples * zero_pad.max(1);
    let mut buf = vec![ZERO; m];
    for (k, p) in polarization.iter().enumerate() {
        buf[k] = *p * step_fs * if k == 0 { 0.5 } else { 1.0 };
    }
    // e^{+iω′t}
    FftPlanner::<f64>::new().plan_fft_inverse(m).process(&mut buf);
    let omega_cm1 = axis_cm1(m, step_fs, h.frame_cm1);
    let intensity = (0..m).map(|i| buf[(i + m - m / 2) % m].re).collect();
    Ok(Absorption { time_fs: (0..n_samples).map(|k| k as f64 * step_fs).collect(), polarization, omega_cm1, intensity })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisorderSpec {
    /// Gaussian standard deviation per site (cm⁻¹).
    pub sigma_cm1: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Site-energy realizations. Sample `i` draws from its own ChaCha stream so
/// the set is independent of evaluation order and worker count.
pub fn sample_site_energies(base_cm1: &[f64], spec: &DisorderSpec) -> Vec<Vec<f64>> {
    (0..spec.n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            base_cm1
                .iter()
                .zip(&spec.sigma_cm1)
                .map(|(&e, &s)| if s > 0.0 { Normal::new(e, s).expect("finite σ").sample(&mut rng) } else { e })
                .collect()
        })
        .collect()
}

/// Coherent average of spectrum stacks over disorder realizations. Samples
/// run in parallel; the reduction runs in sample order.
pub fn disorder_average<F, E>(base_cm1: &[f64], spec: &DisorderSpec, run: F) -> Result<(Vec<Vec<f64>>, Vec<Spectrum2D>), E>
where
    F: Fn(&[f64]) -> Result<Vec<Spectrum2D>, E> + Sync,
    E: Send,
{
    let samples = if spec.sigma_cm1.iter().all(|&s| s == 0.0) {
        vec![base_cm1.to_vec()]
    } else {
        sample_site_energies(base_cm1, spec)
    };
    let stacks: Vec<Result<Vec<Spectrum2D>, E>> = samples.par_iter().map(|e| run(e)).collect();
    let mut acc: Option<Vec<Spectrum2D>> = None;
    for r in stacks {
        let st = r?;
        match acc.as_mut() {
            None => acc = Some(st),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&st) {
                    x.add_assign(y);
                }
            }
        }
    }
    let mut out = acc.unwrap_or_default();
    if samples.len() > 1 {
        let f = 1.0 / samples.len() as f64;
        for s in out.iter_mut() {
            s.data.iter_mut().for_each(|z| *z *= f);
        }
    }
    Ok((samples, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::response::{Axis, SignalGrid};
    use proptest::prelude::*;

    fn synthetic(wa: f64, wb: f64, frame: f64) -> Signal3 {
        let grid = SignalGrid { tau: Axis::new(0.0, 2.0, 64), waiting: Axis::new(100.0, 20.0, 2), t: Axis::new(0.0, 2.0, 48) };
        let mut s = Signal3::zeros(SignalLabel::Total, grid, frame, 0.0);
        for iw in 0..2 {
            for a in 0..64 {
                for b in 0..48 {
                    let (tau, t) = (2.0 * a as f64, 2.0 * b as f64);
                    let k = s.index(iw, a, b);
                    s.data[k] = C64::from_polar(1.0, ((wa - frame) * tau - (wb - frame) * t) * TWO_PI_C);
                }
            }
        }
        s
    }

    #[test]
    fn single_peak_lands_at_positive_frequencies() {
        let s = synthetic(16997.0, 17803.0, 17400.0);
        let sp = rephasing_spectrum(&s, 0, &FtOptions::default()).unwrap();
        let (mut best, mut at) = (0.0, (0, 0));
        for a in 0..sp.omega_tau_cm1.len() {
            for b in 0..sp.omega_t_cm1.len() {
                if sp.at(a, b).norm() > best {
                    best = sp.at(a, b).norm();
                    at = (a, b);
                }
            }
        }
        let da = sp.omega_tau_cm1[1] - sp.omega_tau_cm1[0];
        let db = sp.omega_t_cm1[1] - sp.omega_t_cm1[0];
        assert!((sp.omega_tau_cm1[at.0] - 16997.0).abs() <= da);
        assert!((sp.omega_t_cm1[at.1] - 17803.0).abs() <= db);
        // peak position invariant under zero padding within one unpadded bin
        let sp1 = rephasing_spectrum(&s, 0, &FtOptions { zero_pad: 1, ..Default::default() }).unwrap();
        let (a1, b1, _) = sp1.snap(16997.0, 17803.0).unwrap();
        let bin = sp1.omega_tau_cm1[1] - sp1.omega_tau_cm1[0];
        assert!((sp1.omega_tau_cm1[a1] - sp.omega_tau_cm1[at.0]).abs() <= bin);
        assert!((sp1.omega_t_cm1[b1] - sp.omega_t_cm1[at.1]).abs() <= sp1.omega_t_cm1[1] - sp1.omega_t_cm1[0]);
    }

    #[test]
    fn parseval_and_round_trip() {
        let mut s = synthetic(17100.0, 17500.0, 17400.0);
        s.grid.tau.start_fs = 6.0;
        s.grid.t.start_fs = 4.0;
        for (k, z) in s.data.iter_mut().enumerate() {
            *z *= C64::new(1.0 + (k as f64 * 0.37).sin(), (k as f64 * 0.11).cos());
        }
        let opts = FtOptions::default();
        let sp = rephasing_spectrum(&s, 1, &opts).unwrap();
        let wa = apodization(64, 0.25);
        let wb = apodization(48, 0.25);
        let x = s.slice(1);
        let mut windowed = vec![ZERO; 64 * 48];
        for a in 0..64 {
            for b in 0..48 {
                windowed[a * 48 + b] = x[a * 48 + b] * wa[a] * wb[b];
            }
        }
        let p_time: f64 = windowed.iter().map(|z| z.norm_sqr()).sum();
        assert!((sp.power() - p_time).abs() < 1e-8 * p_time);
        let back = inverse_rephasing(&sp);
        let err = back.iter().zip(&windowed).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn class_additivity_survives_transform() {
        let a = synthetic(17000.0, 17000.0, 17400.0);
        let b = synthetic(17800.0, 17000.0, 17400.0);
        let mut tot = a.clone();
        tot.add_assign(&b);
        let o = FtOptions::default();
        let (sa, sb, st) = (rephasing_spectrum(&a, 0, &o).unwrap(), rephasing_spectrum(&b, 0, &o).unwrap(), rephasing_spectrum(&tot, 0, &o).unwrap());
        for k in 0..st.data.len() {
            assert!((sa.data[k] + sb.data[k] - st.data[k]).norm() <= 1e-12 * (1.0 + st.data[k].norm()));
        }
    }

    #[test]
    fn transient_on_synthetic_peak() {
        let mut s = synthetic(17000.0, 17000.0, 17400.0);
        let len = s.grid.tau.n * s.grid.t.n;
        for z in &mut s.data[len..] {
            *z *= 0.5;
        }
        let stack = rephasing_stack(&s, &FtOptions::default()).unwrap();
        let tr = peak_transient(&stack, &PeakCoordinate::new("P", 17000.0, 17000.0)).unwrap();
        assert_eq!(tr.waiting_fs, vec![100.0, 120.0]);
        let (a, b, _) = stack[0].snap(17000.0, 17000.0).unwrap();
        assert_eq!(tr.values[0], stack[0].at(a, b));
        assert!((tr.values[1] - 0.5 * tr.values[0]).norm() < 1e-12 * tr.values[0].norm());
        assert!(peak_transient(&stack, &PeakCoordinate::new("far", 30000.0, 17000.0)).is_err());
    }

    #[test]
    fn cosine_and_drift_metrics() {
        let t: Vec<f64> = (0..46).map(|k| 100.0 + 20.0 * k as f64).collect();
        let w = 800.0 * TWO_PI_C;
        let y: Vec<f64> = t.iter().map(|&x| 0.3 * (w * x).cos() + 2.0).collect();
        let m = oscillation_metrics(&t, &y, (100.0, 1000.0)).unwrap();
        assert!((m.frequency_cm1 - 800.0).abs() < 1.0, "{}", m.frequency_cm1);
        assert!((m.fitted_amplitude - 0.6).abs() < 0.01, "{}", m.fitted_amplitude);
        assert!((m.amplitude - 0.6).abs() < 0.05, "{}", m.amplitude);
        assert!((m.baseline[0] - 2.0).abs() < 0.02);
        let drift: Vec<f64> = t.iter().map(|&x| 5.0 + 0.01 * x).collect();
        let m = oscillation_metrics(&t, &drift, (100.0, 1000.0)).unwrap();
        assert!(m.amplitude < 1e-10 * 10.0);
        let flat = oscillation_metrics(&t, &vec![0.25; t.len()], (100.0, 160.0)).unwrap();
        assert!(flat.amplitude < 1e-12);
        // 800 cm⁻¹ has a 41.7 fs period
        assert!(matches!(require_full_period((100.0, 140.0), 800.0), Err(SpectraError::WindowTooShort { .. })));
        assert!(require_full_period((100.0, 142.0), 800.0).is_ok());
    }

    #[test]
    fn band_amplitude_ignores_slow_decay() {
        let t: Vec<f64> = (0..46).map(|k| 100.0 + 20.0 * k as f64).collect();
        let w = 780.0 * TWO_PI_C;
        let decay: Vec<f64> = t.iter().map(|&x| (-x / 150.0).exp()).collect();
        let slow = band_amplitude(&t, &decay, (100.0, 1000.0), 400.0).unwrap();
        assert!(slow < 0.02, "{slow}");
        let osc: Vec<f64> = t.iter().zip(&decay).map(|(&x, d)| d + 0.1 * (w * x).cos()).collect();
        assert!((band_amplitude(&t, &osc, (100.0, 1000.0), 400.0).unwrap() - 0.2).abs() < 0.02);
    }

    #[test]
    fn disorder_sampling_is_reproducible() {
        let spec = DisorderSpec { sigma_cm1: vec![50.0, 50.0], n_samples: 5, seed: 7 };
        let a = sample_site_energies(&[17050.0, 17750.0], &spec);
        let b = sample_site_energies(&[17050.0, 17750.0], &spec);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        let zero = DisorderSpec { sigma_cm1: vec![0.0, 0.0], n_samples: 4, seed: 7 };
        let s = synthetic(17000.0, 17000.0, 17400.0);
        let run = |_: &[f64]| -> Result<Vec<Spectrum2D>, SpectraError> { rephasing_stack(&s, &FtOptions::default()) };
        let (_, avg) = disorder_average(&[17050.0, 17750.0], &zero, run).unwrap();
        assert_eq!(avg, run(&[]).unwrap());
    }

    proptest! {
        #[test]
        fn apodization_bounds(n in 1usize..300, f in 0.0f64..1.0) {
            let w = apodization(n, f);
            prop_assert_eq!(w.len(), n);
            prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(w.windows(2).all(|p| p[1] <= p[0] + 1e-15));
        }
    }
}
