//! Physical constants, unit conversions and closed-form derived quantities.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CODATA 2018 values in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysConstants {
    pub planck_h: f64,
    pub hbar: f64,
    pub bohr_magneton: f64,
    pub boltzmann_k: f64,
    pub light_speed: f64,
    pub elementary_charge: f64,
}

pub const CONSTANTS: PhysConstants = PhysConstants {
    planck_h: 6.626_070_15e-34,
    hbar: 6.626_070_15e-34 / (2.0 * PI),
    bohr_magneton: 9.274_010_078_3e-24,
    boltzmann_k: 1.380_649e-23,
    light_speed: 299_792_458.0,
    elementary_charge: 1.602_176_634e-19,
};

/// Temperature used for thermal spin populations unless overridden.
pub const DEFAULT_TEMPERATURE_K: f64 = 4.2;

/// Speed of light in nm·GHz (numerically equal to c in m/s).
const C_NM_GHZ: f64 = 299_792_458.0;

/// Converts an ordinary frequency (value/2π, GHz) to angular frequency in
/// rad/ns. This is the only place the factor 2π enters.
#[inline]
pub fn angular(freq_ghz: f64) -> f64 {
    2.0 * PI * freq_ghz
}

pub fn wavelength_to_frequency(lambda_nm: f64) -> Result<f64> {
    if !(lambda_nm > 0.0) || !lambda_nm.is_finite() {
        return Err(Error::Domain(format!(
            "wavelength must be positive, got {lambda_nm} nm"
        )));
    }
    Ok(C_NM_GHZ / lambda_nm)
}

pub fn frequency_to_wavelength(freq_ghz: f64) -> Result<f64> {
    if !(freq_ghz > 0.0) || !freq_ghz.is_finite() {
        return Err(Error::Domain(format!(
            "frequency must be positive, got {freq_ghz} GHz"
        )));
    }
    Ok(C_NM_GHZ / freq_ghz)
}

/// First-order conversion of a wavelength splitting to a frequency
/// splitting, `c Δλ / λ²`.
pub fn splitting_nm_to_ghz(delta_lambda_nm: f64, center_lambda_nm: f64) -> Result<f64> {
    if !(center_lambda_nm > 0.0) {
        return Err(Error::Domain(format!(
            "center wavelength must be positive, got {center_lambda_nm} nm"
        )));
    }
    Ok(C_NM_GHZ * delta_lambda_nm / (center_lambda_nm * center_lambda_nm))
}

pub fn mev_to_ghz(energy_mev: f64) -> f64 {
    energy_mev * 1.0e-3 * CONSTANTS.elementary_charge / CONSTANTS.planck_h / 1.0e9
}

pub fn ghz_to_mev(freq_ghz: f64) -> f64 {
    freq_ghz * 1.0e9 * CONSTANTS.planck_h / CONSTANTS.elementary_charge * 1.0e3
}

/// Landé g-factor `h Δν / (μ_B B)` from a ground-state splitting in GHz.
pub fn lande_g_factor(splitting_ghz: f64, field_t: f64) -> Result<f64> {
    if !(field_t > 0.0) {
        return Err(Error::Domain(format!(
            "magnetic field must be positive, got {field_t} T"
        )));
    }
    Ok(CONSTANTS.planck_h * splitting_ghz * 1.0e9 / (CONSTANTS.bohr_magneton * field_t))
}

/// Zeeman splitting `g μ_B B / h` in GHz.
pub fn zeeman_splitting_ghz(g_factor: f64, field_t: f64) -> f64 {
    g_factor * CONSTANTS.bohr_magneton * field_t / CONSTANTS.planck_h / 1.0e9
}

/// Boltzmann occupation of the upper of two ground states split by
/// `delta_e_mev`.
pub fn thermal_spin_up_population(delta_e_mev: f64, temperature_k: f64) -> Result<f64> {
    if !(temperature_k > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature_k} K"
        )));
    }
    let kt = CONSTANTS.boltzmann_k * temperature_k;
    let de = delta_e_mev * 1.0e-3 * CONSTANTS.elementary_charge;
    // r / (1 + r) written as a logistic to stay finite for large |ΔE|.
    Ok(1.0 / (1.0 + (de / kt).exp()))
}

/// Atomic cooperativity `2 g² / (κ γ)`.
pub fn cooperativity(g: f64, kappa: f64, gamma: f64) -> Result<f64> {
    if !(kappa > 0.0) || !(gamma > 0.0) {
        return Err(Error::Domain(format!(
            "cooperativity needs positive kappa and gamma, got kappa={kappa}, gamma={gamma}"
        )));
    }
    Ok(2.0 * g * g / (kappa * gamma))
}

pub fn is_strongly_coupled(g: f64, kappa: f64, gamma: f64) -> bool {
    4.0 * g > kappa + gamma
}

/// Zeeman-split trion in a Voigt-geometry field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrionLevels {
    /// Transition frequency at zero field, GHz.
    pub zero_field_frequency: f64,
    pub electron_g: f64,
    pub hole_g: f64,
    /// Quadratic diamagnetic shift coefficient, GHz/T². Phenomenological.
    #[serde(default)]
    pub diamagnetic_coeff: f64,
    /// Field amplitude, T.
    #[serde(default)]
    pub field: f64,
}

/// Transition frequencies ordered from the highest (σ₁) to the lowest (σ₄).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionFrequencies {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub sigma4: f64,
}

impl TransitionFrequencies {
    pub fn as_array(&self) -> [f64; 4] {
        [self.sigma1, self.sigma2, self.sigma3, self.sigma4]
    }
}

impl TrionLevels {
    pub fn validate(&self) -> Result<()> {
        if !self.zero_field_frequency.is_finite() || !self.diamagnetic_coeff.is_finite() {
            return Err(Error::Validation(
                "trion frequencies must be finite".to_string(),
            ));
        }
        if !self.electron_g.is_finite() || !self.hole_g.is_finite() {
            return Err(Error::Validation("g-factors must be finite".to_string()));
        }
        if !(self.field >= 0.0) || !self.field.is_finite() {
            return Err(Error::Validation(format!(
                "field must be non-negative, got {}",
                self.field
            )));
        }
        Ok(())
    }

    pub fn at_field(&self, field: f64) -> Self {
        Self { field, ..*self }
    }

    /// Ground-state (electron) Zeeman splitting Δ_e in GHz.
    pub fn electron_splitting(&self) -> f64 {
        zeeman_splitting_ghz(self.electron_g, self.field)
    }

    /// Excited-state (hole) Zeeman splitting Δ_h in GHz.
    pub fn hole_splitting(&self) -> f64 {
        zeeman_splitting_ghz(self.hole_g, self.field)
    }

    pub fn transition_frequencies(&self) -> TransitionFrequencies {
        let center = self.zero_field_frequency + self.diamagnetic_coeff * self.field * self.field;
        let half_e = 0.5 * self.electron_splitting();
        let half_h = 0.5 * self.hole_splitting();
        TransitionFrequencies {
            sigma1: center + half_e + half_h,
            sigma2: center + half_e - half_h,
            sigma3: center - half_e + half_h,
            sigma4: center - half_e - half_h,
        }
    }
}
