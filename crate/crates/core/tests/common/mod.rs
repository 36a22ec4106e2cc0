//! Independent numerical references shared by the integration tests.
#![allow(dead_code)]

use heom2d::bath::SpectralDensity;
use heom2d::units::{thermal_energy_cm1, TWO_PI_C};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on [−1, 1] by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                let dp = {
                    let (mut p0, mut p1) = (1.0, z);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    n as f64 * (z * p1 - p0) / (z * z - 1.0)
                };
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
                break;
            }
        }
    }
    (x, w)
}

/// Composite Gauss–Legendre over consecutive breakpoints with uniform panels
/// of at most `h` inside each segment.
pub fn integrate<F: Fn(f64) -> Complex64>(f: F, segments: &[(f64, f64, f64)]) -> Complex64 {
    let (x, w) = gauss_legendre(10);
    let mut acc = Complex64::new(0.0, 0.0);
    for &(a, b, h) in segments {
        let n = ((b - a) / h).ceil().max(1.0) as usize;
        let step = (b - a) / n as f64;
        for p in 0..n {
            let lo = a + p as f64 * step;
            let mid = lo + 0.5 * step;
            for (xi, wi) in x.iter().zip(&w) {
                acc += f(mid + 0.5 * step * xi) * (0.5 * step * wi);
            }
        }
    }
    acc
}

const W_MAX: f64 = 1.0e5;

fn frequency_segments(sd: &SpectralDensity, t_fs: f64) -> Vec<(f64, f64, f64)> {
    let tau = t_fs * TWO_PI_C;
    let osc = if tau > 0.0 { (2.0 * PI / tau) / 12.0 } else { f64::INFINITY };
    let mut segs = Vec::new();
    let mut edges = vec![0.0, W_MAX];
    for b in &sd.underdamped {
        let g = b.damping_cm1();
        edges.push((b.frequency_cm1 - 200.0 * g).max(0.0));
        edges.push(b.frequency_cm1 + 200.0 * g);
    }
    edges.sort_by(f64::total_cmp);
    for win in edges.windows(2) {
        let (a, b) = (win[0], win[1]);
        if b <= a {
            continue;
        }
        let near_peak = sd.underdamped.iter().any(|m| a >= m.frequency_cm1 - 200.0 * m.damping_cm1() - 1e-9 && b <= m.frequency_cm1 + 200.0 * m.damping_cm1() + 1e-9);
        let base = if near_peak {
            sd.underdamped.iter().map(|m| m.damping_cm1()).fold(f64::INFINITY, f64::min) / 4.0
        } else if b <= 3000.0 {
            1.0
        } else {
            10.0
        };
        segs.push((a, b, base.min(osc)));
    }
    segs
}

fn coth(x: f64) -> f64 {
    1.0 / x.tanh()
}

/// C(t) (cm⁻²) by direct quadrature of the coth integral, t > 0 in fs.
/// The Drude 1/ω tail beyond `W_MAX` is added through the asymptotic sine and
/// cosine integrals.
pub fn correlation_quadrature(sd: &SpectralDensity, temperature_k: f64, t_fs: f64) -> Complex64 {
    let beta = 1.0 / thermal_energy_cm1(temperature_k);
    let tau = t_fs * TWO_PI_C;
    let f = |w: f64| {
        if w == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let j = sd.evaluate(w);
        Complex64::new(j * coth(beta * w / 2.0) * (w * tau).cos(), -j * (w * tau).sin())
    };
    let mut c = integrate(f, &frequency_segments(sd, t_fs)) / PI;
    if let Some(d) = &sd.drude {
        let x = W_MAX * tau;
        let (s, co) = x.sin_cos();
        // −Ci(x) and π/2 − Si(x) for large x
        let neg_ci = -s / x + co / (x * x) + 2.0 * s / x.powi(3);
        let si_c = co / x + s / (x * x) - 2.0 * co / x.powi(3);
        let amp = 2.0 * d.reorganization_cm1 * d.cutoff_cm1() / PI;
        c += Complex64::new(amp * neg_ci, -amp * si_c);
    }
    c
}

/// Lineshape function g(t) = ∫₀ᵗ∫₀ˢ C(s′) ds′ ds (dimensionless), t in fs.
pub fn lineshape_quadrature(sd: &SpectralDensity, temperature_k: f64, t_fs: f64) -> Complex64 {
    let beta = 1.0 / thermal_energy_cm1(temperature_k);
    let tau = t_fs * TWO_PI_C;
    let f = |w: f64| {
        if w == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let j = sd.evaluate(w) / (w * w);
        let (s, c) = (w * tau).sin_cos();
        Complex64::new(j * coth(beta * w / 2.0) * (1.0 - c), j * (s - w * tau))
    };
    let mut g = integrate(f, &frequency_segments(sd, t_fs)) / PI;
    if let Some(d) = &sd.drude {
        // ∫_W^∞ 2λγ/ω³ (sin ωτ − ωτ) dω ≈ −2λγτ/W
        g += Complex64::new(0.0, -2.0 * d.reorganization_cm1 * d.cutoff_cm1() * tau / W_MAX / PI);
    }
    g
}
