//! Spectral densities and exponential decompositions of bath correlation functions.
//!
//! The correlation function of one site is
//! `C(t) = (1/π) ∫ J(ω) [coth(βω/2) cos ωt − i sin ωt] dω`, expanded as
//! `Σ_j c_j exp(−γ_j t)` by contour integration through the lower half plane:
//! physical poles of `J` plus Matsubara poles of the Bose factor. Amplitudes are
//! stored in cm⁻² and rates in fs⁻¹.

use crate::model::UnderdampedMode;
use crate::units::{thermal_energy_cm1, TWO_PI_C};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Largest ratio of truncated Matsubara weight to integrated correlation
/// strength accepted by [`correlation_expansion`].
pub const MATSUBARA_TAIL_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BathError {
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("temperature must be positive (got {0} K)")]
    Temperature(f64),
    #[error(
        "Matsubara count K={k} leaves {ratio:.3} of the correlation strength in the truncated tail; \
         use K ≥ {suggested}"
    )]
    MatsubaraInsufficient { k: usize, ratio: f64, suggested: usize },
    #[error("Matsubara frequency {k} coincides with a spectral-density pole; shift the temperature slightly")]
    DegeneratePole { k: usize },
}

/// Overdamped (Drude–Lorentz) contribution `2λγω/(ω²+γ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrudeTerm {
    pub reorganization_cm1: f64,
    pub relaxation_time_fs: f64,
}

impl DrudeTerm {
    /// Cutoff γ̃ = 1/(2πc τ) in cm⁻¹.
    pub fn cutoff_cm1(&self) -> f64 {
        1.0 / (TWO_PI_C * self.relaxation_time_fs)
    }
}

/// Underdamped Brownian-oscillator contribution
/// `2λν²γω/((ω²−ν²)² + γ²ω²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrownianTerm {
    pub reorganization_cm1: f64,
    pub frequency_cm1: f64,
    pub damping_time_fs: f64,
}

impl BrownianTerm {
    pub fn damping_cm1(&self) -> f64 {
        1.0 / (TWO_PI_C * self.damping_time_fs)
    }
}

impl From<UnderdampedMode> for BrownianTerm {
    fn from(m: UnderdampedMode) -> Self {
        BrownianTerm {
            reorganization_cm1: m.reorganization_cm1(),
            frequency_cm1: m.frequency_cm1,
            damping_time_fs: m.damping_time_fs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpectralDensity {
    pub drude: Option<DrudeTerm>,
    pub underdamped: Vec<BrownianTerm>,
}

impl SpectralDensity {
    pub fn new(drude: Option<DrudeTerm>, underdamped: Vec<BrownianTerm>) -> Result<Self, BathError> {
        let sd = SpectralDensity { drude, underdamped };
        sd.validate()?;
        Ok(sd)
    }

    pub fn validate(&self) -> Result<(), BathError> {
        let pos = |x: f64, what| if x > 0.0 && x.is_finite() { Ok(()) } else { Err(BathError::NonPositive(what)) };
        if let Some(d) = &self.drude {
            pos(d.reorganization_cm1, "Drude reorganization energy")?;
            pos(d.relaxation_time_fs, "Drude relaxation time")?;
        }
        for b in &self.underdamped {
            pos(b.reorganization_cm1, "mode reorganization energy")?;
            pos(b.frequency_cm1, "mode frequency")?;
            pos(b.damping_time_fs, "mode damping time")?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.drude.is_none() && self.underdamped.is_empty()
    }

    /// Total reorganization energy Σλ.
    pub fn reorganization_cm1(&self) -> f64 {
        self.drude.map_or(0.0, |d| d.reorganization_cm1)
            + self.underdamped.iter().map(|b| b.reorganization_cm1).sum::<f64>()
    }

    /// J(ω) in cm⁻¹ for ω in cm⁻¹ (odd in ω).
    pub fn evaluate(&self, w: f64) -> f64 {
        evaluate_spectral_density(self, w)
    }

    /// J evaluated at a complex frequency (analytic continuation).
    fn evaluate_complex(&self, w: Complex64) -> Complex64 {
        let mut j = Complex64::new(0.0, 0.0);
        if let Some(d) = &self.drude {
            let g = d.cutoff_cm1();
            j += 2.0 * d.reorganization_cm1 * g * w / (w * w + g * g);
        }
        for b in &self.underdamped {
            let (nu, g) = (b.frequency_cm1, b.damping_cm1());
            let a = w * w - nu * nu;
            j += 2.0 * b.reorganization_cm1 * nu * nu * g * w / (a * a + g * g * w * w);
        }
        j
    }
}

pub fn evaluate_spectral_density(sd: &SpectralDensity, w: f64) -> f64 {
    sd.evaluate_complex(Complex64::new(w, 0.0)).re
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TermKind {
    DrudePole,
    /// Physical pole of underdamped term `mode`.
    BrownianPole { mode: usize },
    /// Combined Matsubara term k ≥ 1 (all spectral components share the rate).
    Matsubara { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpTerm {
    /// c_j in cm⁻².
    pub amplitude: Complex64,
    /// γ_j in fs⁻¹ (Re γ_j > 0).
    pub rate: Complex64,
    /// Index of the term whose rate is conj(γ_j).
    pub pair: usize,
    pub kind: TermKind,
}

/// `C(t) = Σ_j c_j exp(−γ_j t)` for t ≥ 0 plus a Markovian tail estimate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrelationExpansion {
    pub terms: Vec<ExpTerm>,
    pub temperature_k: f64,
    pub matsubara_count: usize,
    /// Δ = Σ_{k>K} c_k/ν_k in cm⁻²·fs (weight of the Matsubara terms left out).
    pub residual_strength: f64,
    /// |Δ| relative to Σ_j |c_j/γ_j| of the retained terms.
    pub residual_ratio: f64,
}

impl CorrelationExpansion {
    /// Coefficient c̃_j of the conjugate correlation function,
    /// `C*(t) = Σ_j c̃_j exp(−γ_j t)`.
    pub fn conj_amplitude(&self, j: usize) -> Complex64 {
        self.terms[self.terms[j].pair].amplitude.conj()
    }

    /// Σ c_j e^{−γ_j t} (cm⁻²), t in fs.
    pub fn reconstruct(&self, t: f64) -> Complex64 {
        reconstruct_correlation(self, t)
    }

    /// Σ_j |c_j/γ_j| (cm⁻²·fs): bound on ∫|C(t)|dt of the retained terms.
    pub fn integrated_strength(&self) -> f64 {
        self.terms.iter().map(|t| (t.amplitude / t.rate).norm()).sum()
    }

    /// Σ_j c_j = C(0⁺) of the retained terms.
    pub fn initial_value(&self) -> Complex64 {
        self.terms.iter().map(|t| t.amplitude).sum()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

pub fn reconstruct_correlation(exp: &CorrelationExpansion, t: f64) -> Complex64 {
    exp.terms.iter().map(|term| term.amplitude * (-term.rate * t).exp()).sum()
}

/// Matsubara amplitude for frequency ν_k = 2πk/β (cm⁻¹ units):
/// `c_k = −(2i/β) J(−iν_k)`, real for every J considered here.
fn matsubara_amplitude_cm(sd: &SpectralDensity, beta: f64, k: usize) -> f64 {
    let nu = 2.0 * PI * k as f64 / beta;
    let c = Complex64::new(0.0, -2.0 / beta) * sd.evaluate_complex(Complex64::new(0.0, -nu));
    c.re
}

/// Σ_{k>K} c_k/ν_k in cm⁻¹ (rates and amplitudes both in cm⁻¹ units).
fn matsubara_tail_cm(sd: &SpectralDensity, beta: f64, k_max: usize) -> f64 {
    let mut tail = 0.0;
    if let Some(d) = &sd.drude {
        let (lam, g) = (d.reorganization_cm1, d.cutoff_cm1());
        let x = beta * g / 2.0;
        // Σ_{k≥1} 4λγ/(β(ν_k²−γ²)) = 2λ/(βγ) − λ cot(βγ/2)
        let mut s = 2.0 * lam / (beta * g) - lam / x.tan();
        for k in 1..=k_max {
            let nu = 2.0 * PI * k as f64 / beta;
            s -= 4.0 * lam * g / (beta * (nu * nu - g * g));
        }
        tail += s;
    }
    if !sd.underdamped.is_empty() {
        // c_k/ν_k falls off as k⁻⁴; sum explicitly and close with the integral.
        let only = SpectralDensity { drude: None, underdamped: sd.underdamped.clone() };
        let n_explicit = 20_000.max(k_max + 1);
        let mut s = 0.0;
        for k in (k_max + 1..=n_explicit).rev() {
            let nu = 2.0 * PI * k as f64 / beta;
            s += matsubara_amplitude_cm(&only, beta, k) / nu;
        }
        // tail beyond n_explicit: c_k/ν_k ≈ −4λν²γ/(β ν_k⁴)
        let nu_end = 2.0 * PI * (n_explicit as f64 + 0.5) / beta;
        let coef: f64 = sd
            .underdamped
            .iter()
            .map(|b| -4.0 * b.reorganization_cm1 * b.frequency_cm1.powi(2) * b.damping_cm1() / beta)
            .sum();
        s += coef * beta / (2.0 * PI) / (3.0 * nu_end.powi(3));
        tail += s;
    }
    tail
}

/// Exponential decomposition without the tail-size check.
pub fn expand_correlation(sd: &SpectralDensity, temperature_k: f64, k: usize) -> Result<CorrelationExpansion, BathError> {
    sd.validate()?;
    if !(temperature_k > 0.0 && temperature_k.is_finite()) {
        return Err(BathError::Temperature(temperature_k));
    }
    let beta = 1.0 / thermal_energy_cm1(temperature_k);
    let i = Complex64::i();
    let mut terms: Vec<ExpTerm> = Vec::new();

    // Residue contribution of a simple LHP pole ω_p with residue r of J:
    // −2i · r / (1 − e^{−βω_p}), decaying as e^{−iω_p t}.
    let bose_residue = |res_j: Complex64, wp: Complex64| -> Complex64 {
        let x = -beta * wp;
        // 1/(1 − e^x), rewritten for Re x > 0 to avoid overflow at low temperature
        let bose = if x.re > 0.0 { -(-x).exp() / (1.0 - (-x).exp()) } else { 1.0 / (1.0 - x.exp()) };
        -2.0 * i * res_j * bose
    };

    if let Some(d) = &sd.drude {
        let (lam, g) = (d.reorganization_cm1, d.cutoff_cm1());
        // J = 2λγω/((ω−iγ)(ω+iγ)); residue at −iγ is λγ.
        let wp = Complex64::new(0.0, -g);
        let c = bose_residue(Complex64::new(lam * g, 0.0), wp);
        terms.push(ExpTerm { amplitude: c, rate: i * wp * TWO_PI_C, pair: 0, kind: TermKind::DrudePole });
    }
    for (m, b) in sd.underdamped.iter().enumerate() {
        let (lam, nu, g) = (b.reorganization_cm1, b.frequency_cm1, b.damping_cm1());
        let zeta = Complex64::new(nu * nu - g * g / 4.0, 0.0).sqrt();
        let half = Complex64::new(0.0, g / 2.0);
        let poles = [zeta - half, -zeta - half, zeta + half, -zeta + half];
        for p in 0..2 {
            let wp = poles[p];
            let denom: Complex64 = (0..4).filter(|&q| q != p).map(|q| wp - poles[q]).product();
            let res = 2.0 * lam * nu * nu * g * wp / denom;
            let c = bose_residue(res, wp);
            terms.push(ExpTerm { amplitude: c, rate: i * wp * TWO_PI_C, pair: 0, kind: TermKind::BrownianPole { mode: m } });
        }
    }
    for kk in 1..=k {
        let nu = 2.0 * PI * kk as f64 / beta;
        let near = |x: f64| ((x - nu) / nu).abs() < 1e-9;
        if sd.drude.is_some_and(|d| near(d.cutoff_cm1())) {
            return Err(BathError::DegeneratePole { k: kk });
        }
        let c = matsubara_amplitude_cm(sd, beta, kk);
        if c != 0.0 {
            terms.push(ExpTerm {
                amplitude: Complex64::new(c, 0.0),
                rate: Complex64::new(nu * TWO_PI_C, 0.0),
                pair: 0,
                kind: TermKind::Matsubara { k: kk },
            });
        }
    }

    for j in 0..terms.len() {
        let target = terms[j].rate.conj();
        let scale = terms[j].rate.norm();
        terms[j].pair = (0..terms.len())
            .min_by(|&a, &b| (terms[a].rate - target).norm().total_cmp(&(terms[b].rate - target).norm()))
            .filter(|&a| (terms[a].rate - target).norm() <= 1e-12 * scale)
            .expect("rates close under conjugation");
    }

    let residual_strength = matsubara_tail_cm(sd, beta, k) / TWO_PI_C;
    let mut exp = CorrelationExpansion { terms, temperature_k, matsubara_count: k, residual_strength, residual_ratio: 0.0 };
    let strength = exp.integrated_strength();
    exp.residual_ratio = if strength > 0.0 { residual_strength.abs() / strength } else { 0.0 };
    Ok(exp)
}

/// Exponential decomposition with K Matsubara terms. Fails when the truncated
/// Matsubara tail carries more than [`MATSUBARA_TAIL_TOLERANCE`] of the
/// integrated correlation strength, suggesting a sufficient K.
pub fn correlation_expansion(sd: &SpectralDensity, temperature_k: f64, k: usize) -> Result<CorrelationExpansion, BathError> {
    let exp = expand_correlation(sd, temperature_k, k)?;
    if exp.residual_ratio > MATSUBARA_TAIL_TOLERANCE {
        let suggested = (k + 1..=k + 256)
            .find(|&kk| {
                expand_correlation(sd, temperature_k, kk).is_ok_and(|e| e.residual_ratio <= MATSUBARA_TAIL_TOLERANCE)
            })
            .unwrap_or(k + 256);
        return Err(BathError::MatsubaraInsufficient { k, ratio: exp.residual_ratio, suggested });
    }
    Ok(exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn drude(lam: f64, tau: f64) -> SpectralDensity {
        SpectralDensity::new(Some(DrudeTerm { reorganization_cm1: lam, relaxation_time_fs: tau }), vec![]).unwrap()
    }

    fn paper_sd() -> SpectralDensity {
        SpectralDensity::new(
            Some(DrudeTerm { reorganization_cm1: 50.0, relaxation_time_fs: 100.0 }),
            vec![BrownianTerm { reorganization_cm1: 40.0, frequency_cm1: 800.0, damping_time_fs: 1000.0 }],
        )
        .unwrap()
    }

    #[test]
    fn drude_peak_and_oddness() {
        let sd = drude(50.0, 100.0);
        let g = sd.drude.unwrap().cutoff_cm1();
        assert!((g - 53.0884).abs() < 1e-3);
        assert_relative_eq!(sd.evaluate(g), 50.0, max_relative = 1e-14);
        assert_eq!(sd.evaluate(0.0), 0.0);
        assert_eq!(sd.evaluate(-300.0), -sd.evaluate(300.0));
    }

    #[test]
    fn brownian_resonant_height() {
        let sd = SpectralDensity::new(
            None,
            vec![BrownianTerm { reorganization_cm1: 40.0, frequency_cm1: 800.0, damping_time_fs: 1000.0 }],
        )
        .unwrap();
        let g = sd.underdamped[0].damping_cm1();
        assert!((g - 5.30884).abs() < 1e-4);
        let j = sd.evaluate(800.0);
        assert_relative_eq!(j, 2.0 * 40.0 * 800.0 / g, max_relative = 1e-12);
        assert!((j - 1.2e4).abs() < 0.1e4);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SpectralDensity::new(Some(DrudeTerm { reorganization_cm1: -1.0, relaxation_time_fs: 1.0 }), vec![]).is_err());
        assert!(matches!(expand_correlation(&paper_sd(), 0.0, 2), Err(BathError::Temperature(_))));
    }

    #[test]
    fn drude_leading_amplitude_high_temperature() {
        let exp = expand_correlation(&drude(50.0, 100.0), 300.0, 2).unwrap();
        let c0 = exp.terms[0].amplitude;
        let kt = thermal_energy_cm1(300.0);
        assert!(((c0.re - 2.0 * 50.0 * kt) / (2.0 * 50.0 * kt)).abs() < 0.01);
        assert_relative_eq!(c0.im, -50.0 * 53.0884, max_relative = 1e-5);
        assert_relative_eq!(exp.terms[0].rate.re, 0.01, max_relative = 1e-12);
    }

    #[test]
    fn imaginary_initial_value_sum_rule() {
        // Only the Drude component has a 1/ω tail, so Im C(0⁺) = −λ_D γ̃_D;
        // the Brownian pole pair contributes nothing.
        for temp in [77.0, 300.0, 1e6] {
            for k in [0, 2, 5] {
                let sd = paper_sd();
                let exp = expand_correlation(&sd, temp, k).unwrap();
                let d = sd.drude.unwrap();
                let want = -d.reorganization_cm1 * d.cutoff_cm1();
                assert_relative_eq!(exp.initial_value().im, want, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn zero_temperature_undamped_oscillation() {
        let sd = SpectralDensity::new(
            None,
            vec![BrownianTerm { reorganization_cm1: 40.0, frequency_cm1: 800.0, damping_time_fs: 1e9 }],
        )
        .unwrap();
        let exp = expand_correlation(&sd, 1.0, 0).unwrap();
        let w = 800.0 * TWO_PI_C;
        for t in [0.0, 3.0, 17.0, 100.0] {
            let want = Complex64::from_polar(40.0 * 800.0, -w * t);
            assert!((exp.reconstruct(t) - want).norm() < 1e-3 * 32000.0);
        }
    }

    #[test]
    fn pair_structure() {
        let exp = expand_correlation(&paper_sd(), 300.0, 3).unwrap();
        assert_eq!(exp.len(), 1 + 2 + 3);
        for (j, t) in exp.terms.iter().enumerate() {
            assert!(t.rate.re > 0.0);
            let p = &exp.terms[t.pair];
            assert!((p.rate - t.rate.conj()).norm() < 1e-15);
            assert_eq!(exp.terms[t.pair].pair, j);
        }
        // Brownian poles decay at γ/2 with frequency ζ
        let b = exp.terms.iter().find(|t| matches!(t.kind, TermKind::BrownianPole { .. })).unwrap();
        assert_relative_eq!(b.rate.re, 0.5e-3, max_relative = 1e-12);
        // C*(t) from conjugate amplitudes equals conj of C(t)
        for t in [0.0, 1.0, 50.0] {
            let cc: Complex64 = (0..exp.len()).map(|j| exp.conj_amplitude(j) * (-exp.terms[j].rate * t).exp()).sum();
            assert!((cc - exp.reconstruct(t).conj()).norm() < 1e-9 * exp.reconstruct(t).norm());
        }
    }

    #[test]
    fn drude_tail_closed_form() {
        // closed form vs long explicit sum
        let sd = drude(50.0, 100.0);
        let beta = 1.0 / thermal_energy_cm1(300.0);
        let tail = matsubara_tail_cm(&sd, beta, 2);
        let mut s = 0.0;
        for k in (3..2_000_000).rev() {
            let nu = 2.0 * PI * k as f64 / beta;
            s += matsubara_amplitude_cm(&sd, beta, k) / nu;
        }
        assert_relative_eq!(tail, s, max_relative = 1e-5);
    }

    #[test]
    fn matsubara_insufficient_reported() {
        // cold, slow bath: Matsubara frequencies are small and many are needed
        let sd = drude(50.0, 10.0);
        let err = correlation_expansion(&sd, 30.0, 0).unwrap_err();
        match err {
            BathError::MatsubaraInsufficient { suggested, .. } => {
                assert!(suggested > 0);
                assert!(correlation_expansion(&sd, 30.0, suggested).is_ok());
            }
            e => panic!("unexpected {e}"),
        }
        assert!(correlation_expansion(&paper_sd(), 300.0, 2).is_ok());
    }

    proptest! {
        #[test]
        fn residual_shrinks_with_k(lam in 5.0f64..200.0, tau in 20.0f64..500.0, temp in 50.0f64..400.0, k in 0usize..6) {
            let sd = SpectralDensity::new(
                Some(DrudeTerm { reorganization_cm1: lam, relaxation_time_fs: tau }),
                vec![BrownianTerm { reorganization_cm1: 0.05 * 800.0, frequency_cm1: 800.0, damping_time_fs: 1000.0 }],
            ).unwrap();
            let a = expand_correlation(&sd, temp, k).unwrap();
            let b = expand_correlation(&sd, temp, k + 1).unwrap();
            prop_assert!(b.residual_strength.abs() < a.residual_strength.abs());
        }

        #[test]
        fn spectral_density_nonnegative(w in 0.0f64..1e5) {
            prop_assert!(paper_sd().evaluate(w) >= 0.0);
        }
    }
}
