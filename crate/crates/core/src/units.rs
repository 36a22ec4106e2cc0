//! Unit conventions.
//!
//! Energies and frequencies are carried in wavenumbers (cm⁻¹), times in
//! femtoseconds, and ħ = 1. The single conversion between the two is
//! [`TWO_PI_C`]: an energy `E` in cm⁻¹ corresponds to an angular frequency
//! `E * TWO_PI_C` in rad/fs.

/// 2πc in rad·fs⁻¹·cm.
pub const TWO_PI_C: f64 = 2.0 * std::f64::consts::PI * 2.997_924_58e10 * 1e-15;

/// Boltzmann constant in cm⁻¹/K.
pub const KB_CM1_PER_K: f64 = 0.695_034_8;

/// cm⁻¹ → rad/fs.
#[inline]
pub fn cm1_to_rad_fs(e: f64) -> f64 {
    e * TWO_PI_C
}

/// rad/fs → cm⁻¹.
#[inline]
pub fn rad_fs_to_cm1(w: f64) -> f64 {
    w / TWO_PI_C
}

/// Thermal energy k_B T in cm⁻¹.
#[inline]
pub fn thermal_energy_cm1(temperature_k: f64) -> f64 {
    KB_CM1_PER_K * temperature_k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversion_constant() {
        assert!((TWO_PI_C - 1.88365e-4).abs() < 1e-9);
        assert!((rad_fs_to_cm1(cm1_to_rad_fs(17400.0)) - 17400.0).abs() < 1e-9);
    }

    #[test]
    fn room_temperature() {
        assert!((thermal_energy_cm1(300.0) - 208.51).abs() < 0.01);
    }
}
