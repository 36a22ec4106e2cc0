//! Gaussian pulse sequences and their RWA coupling to the system.
//!
//! A pulse of duration `D` has field envelope `A exp(−(t−t_k)² / 2σ²)` with
//! `σ = D / (2√(2 ln2))`: `D` is the FWHM of the field envelope, and the
//! intensity FWHM is `D/√2`.
//!
//! Arrival times follow the rephasing sequence: pulse 3 arrives at 0, pulse 2
//! at −T, pulse 1 at −(τ+T); detection time `t` is measured from pulse 3.

use crate::units::TWO_PI_C;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PulseError {
    #[error("pulse {label}: {what} must be positive and finite, got {value}")]
    NonPositive { label: usize, what: &'static str, value: f64 },
    #[error("pulse {label}: amplitude must be finite and ≥ 0, got {value}")]
    Amplitude { label: usize, value: f64 },
}

/// Envelope support used by discretized quadratures, in field σ.
pub const SUPPORT_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub center_cm1: f64,
    /// Field-envelope FWHM.
    pub duration_fs: f64,
    pub arrival_fs: f64,
    /// Peak field strength times dipole, in cm⁻¹ (peak Rabi-type frequency).
    pub amplitude_cm1: f64,
    /// Wavevector label 1, 2 or 3.
    pub label: usize,
}

impl Pulse {
    pub fn validate(&self) -> Result<(), PulseError> {
        for (what, v) in [("duration", self.duration_fs), ("center frequency", self.center_cm1)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PulseError::NonPositive { label: self.label, what, value: v });
            }
        }
        if !(self.amplitude_cm1 >= 0.0 && self.amplitude_cm1.is_finite()) {
            return Err(PulseError::Amplitude { label: self.label, value: self.amplitude_cm1 });
        }
        Ok(())
    }

    /// Field σ in fs.
    pub fn sigma_fs(&self) -> f64 {
        field_sigma_fs(self.duration_fs)
    }

    /// Field envelope at time `t` (cm⁻¹).
    pub fn envelope(&self, t: f64) -> f64 {
        envelope(self, t)
    }

    /// Complex field in the frame rotating at `frame_cm1`, with carrier
    /// phase referenced to the pulse center and extra phase `phi` (cm⁻¹).
    pub fn field(&self, t: f64, frame_cm1: f64, phi: f64) -> Complex64 {
        let dt = t - self.arrival_fs;
        let ph = -(self.center_cm1 - frame_cm1) * TWO_PI_C * dt + phi;
        Complex64::from_polar(self.envelope(t), ph)
    }

    /// Analytic amplitude spectrum |Ê(ω)| of the field, ω in cm⁻¹,
    /// normalized so that `(1/2π)∫|Ê|² dω_rad = ∫|E|² dt`.
    pub fn spectrum(&self, omega_cm1: f64) -> f64 {
        let s = self.sigma_fs();
        let dw = (omega_cm1 - self.center_cm1) * TWO_PI_C;
        self.amplitude_cm1 * (2.0 * std::f64::consts::PI).sqrt() * s * (-0.5 * s * s * dw * dw).exp()
    }

    /// ∫|E(t)|² dt in cm⁻²·fs.
    pub fn energy(&self) -> f64 {
        let s = self.sigma_fs();
        self.amplitude_cm1 * self.amplitude_cm1 * std::f64::consts::PI.sqrt() * s
    }

    /// FWHM of the spectral intensity |Ê|² in cm⁻¹.
    pub fn spectral_fwhm_cm1(&self) -> f64 {
        2.0 * std::f64::consts::LN_2.sqrt() / self.sigma_fs() / TWO_PI_C
    }

    /// Pulse area ∫A(t)dt in radians.
    pub fn area(&self) -> f64 {
        self.amplitude_cm1 * TWO_PI_C * (2.0 * std::f64::consts::PI).sqrt() * self.sigma_fs()
    }
}

/// Field σ for a field-envelope FWHM.
pub fn field_sigma_fs(duration_fs: f64) -> f64 {
    duration_fs / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Gaussian field envelope of `p` at `t`.
pub fn envelope(p: &Pulse, t: f64) -> f64 {
    let s = p.sigma_fs();
    let x = (t - p.arrival_fs) / s;
    p.amplitude_cm1 * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub pulses: [Pulse; 3],
    pub tau_fs: f64,
    pub waiting_fs: f64,
}

impl PulseSequence {
    /// Sequence with arrival times set from (τ, T).
    pub fn new(mut pulses: [Pulse; 3], tau_fs: f64, waiting_fs: f64) -> Result<PulseSequence, PulseError> {
        for (k, p) in pulses.iter_mut().enumerate() {
            p.label = k + 1;
            p.validate()?;
        }
        let mut s = PulseSequence { pulses, tau_fs, waiting_fs };
        s.set_delays(tau_fs, waiting_fs);
        Ok(s)
    }

    pub fn set_delays(&mut self, tau_fs: f64, waiting_fs: f64) {
        self.tau_fs = tau_fs;
        self.waiting_fs = waiting_fs;
        let t = arrival_times(tau_fs, waiting_fs);
        for (p, a) in self.pulses.iter_mut().zip(t) {
            p.arrival_fs = a;
        }
    }

    pub fn with_delays(&self, tau_fs: f64, waiting_fs: f64) -> PulseSequence {
        let mut s = *self;
        s.set_delays(tau_fs, waiting_fs);
        s
    }

    /// Every amplitude multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> PulseSequence {
        let mut s = *self;
        s.pulses.iter_mut().for_each(|p| p.amplitude_cm1 *= alpha);
        s
    }

    /// Centre-frequency offset from the first pulse: Ω₂ − Ω₁.
    pub fn delta_omega_cm1(&self) -> f64 {
        self.pulses[1].center_cm1 - self.pulses[0].center_cm1
    }
}

/// Arrival times of pulses 1..3 for delays (τ, T).
pub fn arrival_times(tau_fs: f64, waiting_fs: f64) -> [f64; 3] {
    [-(tau_fs + waiting_fs), -waiting_fs, 0.0]
}

/// Three identical pulses.
pub fn single_color_sequence(omega_cm1: f64, duration_fs: f64, amplitude_cm1: f64, tau_fs: f64, waiting_fs: f64) -> Result<PulseSequence, PulseError> {
    multi_color_sequence(omega_cm1, 0.0, duration_fs, amplitude_cm1, tau_fs, waiting_fs)
}

/// Ω₂ = Ω₁ + ΔΩ (blue-shifted), Ω₃ = Ω₁ − ΔΩ (red-shifted).
pub fn multi_color_sequence(
    omega1_cm1: f64,
    delta_omega_cm1: f64,
    duration_fs: f64,
    amplitude_cm1: f64,
    tau_fs: f64,
    waiting_fs: f64,
) -> Result<PulseSequence, PulseError> {
    let centers = [omega1_cm1, omega1_cm1 + delta_omega_cm1, omega1_cm1 - delta_omega_cm1];
    let pulses = std::array::from_fn(|k| Pulse {
        center_cm1: centers[k],
        duration_fs,
        arrival_fs: 0.0,
        amplitude_cm1,
        label: k + 1,
    });
    PulseSequence::new(pulses, tau_fs, waiting_fs)
}

/// `H_int(t) = −Σ_k A_k(t)[e^{iφ_k} e^{−i(Ω_k−Ω_ref)(t−t_k)} μ⁺ + h.c.]` in cm⁻¹.
pub fn interaction_hamiltonian(
    seq: &PulseSequence,
    raising: &DMatrix<f64>,
    t: f64,
    frame_cm1: f64,
    phases: [f64; 3],
) -> DMatrix<Complex64> {
    let mut f = Complex64::new(0.0, 0.0);
    for (p, &phi) in seq.pulses.iter().zip(&phases) {
        if p.amplitude_cm1 > 0.0 {
            f += p.field(t, frame_cm1, phi);
        }
    }
    let d = raising.nrows();
    DMatrix::from_fn(d, d, |a, b| -(f * raising[(a, b)] + f.conj() * raising[(b, a)]))
}

/// Quadrature weights of one pulse for field-resolved integrals on a grid of
/// step `h` centred at the arrival time: offsets `u = k·h` for
/// `k ∈ [−W, W]`, weight `h·E(t_k+u)` (rad/fs·fs) with the rotating-frame
/// carrier, optionally conjugated. The samples are rescaled so their sum
/// matches the exact envelope area, which makes pulses shorter than the grid
/// step act as δ-functions of the correct weight.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldWeights {
    pub half_width: usize,
    pub weights: Vec<Complex64>,
}

impl FieldWeights {
    pub fn new(p: &Pulse, step_fs: f64, frame_cm1: f64, conjugate: bool) -> FieldWeights {
        let s = p.sigma_fs();
        let w = (SUPPORT_SIGMAS * s / step_fs).ceil() as usize;
        let mut raw = Vec::with_capacity(2 * w + 1);
        let mut total = 0.0;
        for k in -(w as i64)..=(w as i64) {
            let u = k as f64 * step_fs;
            let x = u / s;
            let e = (-0.5 * x * x).exp();
            total += e * step_fs;
            raw.push((u, e));
        }
        let area = (2.0 * std::f64::consts::PI).sqrt() * s;
        let norm = if total > 0.0 { area / total } else { 0.0 };
        let a = p.amplitude_cm1 * TWO_PI_C;
        let dw = (p.center_cm1 - frame_cm1) * TWO_PI_C;
        let weights = raw
            .into_iter()
            .map(|(u, e)| {
                let z = Complex64::from_polar(a * e * step_fs * norm, -dw * u);
                if conjugate {
                    z.conj()
                } else {
                    z
                }
            })
            .collect();
        FieldWeights { half_width: w, weights }
    }

    /// Weight at offset index `k ∈ [−W, W]`.
    pub fn at(&self, k: i64) -> Complex64 {
        self.weights[(k + self.half_width as i64) as usize]
    }
}
