mod common;

use common::{correlation_quadrature, gauss_legendre, integrate};
use heom2d::bath::{expand_correlation, BrownianTerm, DrudeTerm, SpectralDensity};
use num_complex::Complex64;

fn drude_only() -> SpectralDensity {
    SpectralDensity::new(Some(DrudeTerm { reorganization_cm1: 50.0, relaxation_time_fs: 100.0 }), vec![]).unwrap()
}

#[test]
fn gauss_legendre_exactness() {
    let (x, w) = gauss_legendre(10);
    assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    let m18: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
    assert!((m18 - 2.0 / 19.0).abs() < 1e-14);
    let v = integrate(|x| Complex64::new(x.cos(), 0.0), &[(0.0, 3.0, 0.1)]);
    assert!((v.re - 3f64.sin()).abs() < 1e-13);
}

#[test]
fn drude_expansion_matches_quadrature() {
    let sd = drude_only();
    let exp = expand_correlation(&sd, 300.0, 2).unwrap();
    let mut worst = 0.0f64;
    for i in 0..=100 {
        let t = 5.0 + 4.95 * i as f64;
        let q = correlation_quadrature(&sd, 300.0, t);
        let e = exp.reconstruct(t);
        worst = worst.max((q - e).norm() / q.norm());
    }
    println!("drude K=2 worst relative deviation on [5, 500] fs: {worst:.2e}");
    assert!(worst < 0.01);
}

#[test]
fn paper_bath_expansion_matches_quadrature() {
    let sd = SpectralDensity::new(
        Some(DrudeTerm { reorganization_cm1: 50.0, relaxation_time_fs: 100.0 }),
        vec![BrownianTerm { reorganization_cm1: 40.0, frequency_cm1: 800.0, damping_time_fs: 1000.0 }],
    )
    .unwrap();
    let exp = expand_correlation(&sd, 300.0, 2).unwrap();
    let scale = exp.terms.iter().map(|t| t.amplitude.norm()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for i in 0..=60 {
        let t = 5.0 + 16.5 * i as f64;
        let q = correlation_quadrature(&sd, 300.0, t);
        worst = worst.max((q - exp.reconstruct(t)).norm() / scale);
    }
    println!("paper bath K=2 worst deviation / max amplitude: {worst:.2e}");
    assert!(worst < 5e-3);
}

#[test]
fn underdamped_envelope_decay() {
    // |C(t)| of the undamped-limit mode decays at γ/2 (1/2000 fs⁻¹ for a 1 ps damping time)
    let sd = SpectralDensity::new(
        None,
        vec![BrownianTerm { reorganization_cm1: 40.0, frequency_cm1: 800.0, damping_time_fs: 1000.0 }],
    )
    .unwrap();
    let exp = expand_correlation(&sd, 300.0, 4).unwrap();
    // log-linear fit of the envelope over [200, 2000] fs
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..=90 {
        let t = 200.0 + 20.0 * i as f64;
        let y = exp.reconstruct(t).norm().ln();
        sx += t;
        sy += y;
        sxx += t * t;
        sxy += t * y;
        n += 1.0;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    assert!((slope + 0.5e-3).abs() < 0.02e-3, "{slope}");
}
