//! Reflectivity spectra from closed-form linear response and from the
//! master-equation steady state.
//!
//! Every closed-form model has the shape `R(ω) = B_bg + S · response(ω)`
//! where `response` is the squared modulus of the cavity field amplitude per
//! unit drive, computed in angular units. With `S = (πκ)²` the bare cavity
//! peaks at `B_bg + 1`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{self, SystemParams};
use crate::physcalc::{angular, TrionLevels};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub freq: f64,
    pub reflectivity: f64,
    pub weight: f64,
}

/// Sampled reflectivity on a strictly increasing frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    points: Vec<SpectrumPoint>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl Spectrum {
    pub const MIN_POINTS: usize = 3;

    pub fn new(points: Vec<SpectrumPoint>) -> Result<Self> {
        if points.len() < Self::MIN_POINTS {
            return Err(Error::Validation(format!(
                "spectrum needs at least {} points, got {}",
                Self::MIN_POINTS,
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.freq.is_finite() {
                return Err(Error::Validation(format!(
                    "point {i}: frequency is not finite"
                )));
            }
            if !p.reflectivity.is_finite() || p.reflectivity < 0.0 {
                return Err(Error::Validation(format!(
                    "point {i}: reflectivity {} must be finite and non-negative",
                    p.reflectivity
                )));
            }
            if !(p.weight > 0.0) || !p.weight.is_finite() {
                return Err(Error::Validation(format!(
                    "point {i}: weight {} must be positive",
                    p.weight
                )));
            }
            if i > 0 && !(p.freq > points[i - 1].freq) {
                return Err(Error::Validation(format!(
                    "point {i}: frequency {} does not increase",
                    p.freq
                )));
            }
        }
        Ok(Self {
            points,
            meta: BTreeMap::new(),
        })
    }

    /// Unit-weight spectrum from parallel slices.
    pub fn from_values(freqs: &[f64], values: &[f64]) -> Result<Self> {
        if freqs.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} frequencies but {} values",
                freqs.len(),
                values.len()
            )));
        }
        Self::new(
            freqs
                .iter()
                .zip(values)
                .map(|(&freq, &reflectivity)| SpectrumPoint {
                    freq,
                    reflectivity,
                    weight: 1.0,
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[SpectrumPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn freqs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.freq).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.reflectivity).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.weight).collect()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.trim().parse().ok())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.set_meta(key, value);
        self
    }

    pub fn with_weights(mut self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.points.len() {
            return Err(Error::Shape("weight vector has the wrong length".into()));
        }
        for (p, &w) in self.points.iter_mut().zip(weights) {
            p.weight = w;
        }
        Self::new(self.points).map(|s| Self {
            meta: self.meta,
            ..s
        })
    }

    /// Same grid, new reflectivity values. Weights and metadata are kept.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.points.len() {
            return Err(Error::Shape("value vector has the wrong length".into()));
        }
        let points = self
            .points
            .iter()
            .zip(values)
            .map(|(p, &r)| SpectrumPoint {
                reflectivity: r,
                ..*p
            })
            .collect();
        Ok(Self {
            meta: self.meta.clone(),
            ..Self::new(points)?
        })
    }

    pub fn same_grid(&self, other: &Spectrum) -> bool {
        self.points.len() == other.points.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| a.freq == b.freq)
    }

    pub fn max_value(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.reflectivity)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Indices of strict interior local maxima.
    pub fn local_maxima(&self) -> Vec<usize> {
        let v = self.values();
        (1..v.len() - 1)
            .filter(|&i| v[i] > v[i - 1] && v[i] >= v[i + 1])
            .collect()
    }

    /// Frequencies of the two highest local maxima, in increasing order.
    pub fn two_main_peaks(&self) -> Option<(f64, f64)> {
        let mut peaks = self.local_maxima();
        if peaks.len() < 2 {
            return None;
        }
        peaks.sort_by(|&a, &b| {
            self.points[b]
                .reflectivity
                .total_cmp(&self.points[a].reflectivity)
        });
        let (a, b) = (self.points[peaks[0]].freq, self.points[peaks[1]].freq);
        Some((a.min(b), a.max(b)))
    }

    /// Frequency of the lowest sample between the two main peaks.
    pub fn central_dip(&self) -> Option<f64> {
        let (lo, hi) = self.two_main_peaks()?;
        self.points
            .iter()
            .filter(|p| p.freq > lo && p.freq < hi)
            .min_by(|a, b| a.reflectivity.total_cmp(&b.reflectivity))
            .map(|p| p.freq)
    }
}

/// Probe frequency grid plus the scale and background of the closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub start: f64,
    pub stop: f64,
    pub n_points: usize,
    pub scale: f64,
    pub background: f64,
}

impl ScanConfig {
    pub fn new(start: f64, stop: f64, n_points: usize) -> Self {
        Self {
            start,
            stop,
            n_points,
            scale: 1.0,
            background: 0.0,
        }
    }

    /// Scale chosen so that a bare cavity of width `kappa` peaks at
    /// `background + 1`.
    pub fn normalized(start: f64, stop: f64, n_points: usize, kappa: f64) -> Self {
        Self {
            scale: normalizing_scale(kappa),
            ..Self::new(start, stop, n_points)
        }
    }

    pub fn with_background(mut self, background: f64) -> Self {
        self.background = background;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start < self.stop) || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(Error::Validation(format!(
                "scan start {} must be below stop {}",
                self.start, self.stop
            )));
        }
        if self.n_points < Spectrum::MIN_POINTS {
            return Err(Error::Validation(format!(
                "scan needs at least {} points",
                Spectrum::MIN_POINTS
            )));
        }
        if !(self.background >= 0.0) || !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::Validation(
                "scale and background must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let step = (self.stop - self.start) / (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| {
                if i == self.n_points - 1 {
                    self.stop
                } else {
                    self.start + step * i as f64
                }
            })
            .collect()
    }
}

/// `(πκ)²`, the scale at which a bare Lorentzian peaks at 1.
pub fn normalizing_scale(kappa: f64) -> f64 {
    let half = 0.5 * angular(kappa);
    half * half
}

/// Multiplicative etalon fringe `1 + A sin(2πω/period + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeModel {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl FringeModel {
    pub fn none() -> Self {
        Self {
            amplitude: 0.0,
            period: 1.0,
            phase: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.amplitude) {
            return Err(Error::Validation(format!(
                "fringe amplitude {} must lie in [0, 0.5)",
                self.amplitude
            )));
        }
        if !(self.period > 0.0) {
            return Err(Error::Validation("fringe period must be positive".into()));
        }
        Ok(())
    }

    pub fn factor(&self, freq: f64) -> f64 {
        1.0 + self.amplitude * (std::f64::consts::TAU * freq / self.period + self.phase).sin()
    }
}

/// Bare-cavity response `1 / (Δω² + (κ/2)²)` in angular units.
pub fn lorentzian_response(freq: f64, kappa: f64, omega_c: f64) -> f64 {
    let det = angular(freq - omega_c);
    let half = 0.5 * angular(kappa);
    1.0 / (det * det + half * half)
}

/// `1 / |−iΔω + κ/2 + g² / (−i(Δω − δ) + γ)|²` with `Δω = ω − ω_c`.
///
/// `gamma` is the transverse (coherence) decay rate of the dipole.
pub fn dit_response(freq: f64, g: f64, kappa: f64, gamma: f64, delta: f64, omega_c: f64) -> f64 {
    let dw = angular(freq - omega_c);
    let denom = Complex64::new(0.5 * angular(kappa), -dw)
        + coupling_term(angular(g), angular(gamma), dw - angular(delta));
    1.0 / denom.norm_sqr()
}

/// `g² / (−iΔ + γ)`.
fn coupling_term(g: f64, gamma: f64, detuning: f64) -> Complex64 {
    if g == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    Complex64::new(g * g, 0.0) / Complex64::new(gamma, -detuning)
}

/// Linear response with both σ₃ and σ₄ loading the cavity. Each dipole
/// decays at its transverse rate γ/2 + γ_d.
pub fn two_transition_response(freq: f64, params: &SystemParams) -> f64 {
    let dw = angular(freq - params.omega_c);
    let denom = Complex64::new(0.5 * angular(params.kappa), -dw)
        + coupling_term(
            angular(params.g3),
            angular(params.transverse3()),
            angular(freq - params.omega_x),
        )
        + coupling_term(
            angular(params.g4),
            angular(params.transverse4()),
            angular(freq - params.sigma4_frequency()),
        );
    1.0 / denom.norm_sqr()
}

fn from_response(cfg: &ScanConfig, response: impl Fn(f64) -> f64) -> Result<Spectrum> {
    cfg.validate()?;
    let freqs = cfg.frequencies();
    let values: Vec<f64> = freqs
        .iter()
        .map(|&f| cfg.background + cfg.scale * response(f))
        .collect();
    Spectrum::from_values(&freqs, &values)
}

pub fn lorentzian_spectrum(kappa: f64, omega_c: f64, cfg: &ScanConfig) -> Result<Spectrum> {
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    from_response(cfg, |f| lorentzian_response(f, kappa, omega_c))
}

/// Single dipole-induced-transparency spectrum. `delta` is the dipole
/// frequency minus `omega_c`.
pub fn dit_spectrum(
    g: f64,
    kappa: f64,
    gamma: f64,
    delta: f64,
    omega_c: f64,
    cfg: &ScanConfig,
) -> Result<Spectrum> {
    if !(kappa > 0.0) || !(gamma > 0.0) {
        return Err(Error::Domain(format!(
            "kappa and gamma must be positive, got kappa={kappa}, gamma={gamma}"
        )));
    }
    from_response(cfg, |f| dit_response(f, g, kappa, gamma, delta, omega_c))
}

pub fn two_transition_spectrum(params: &SystemParams, cfg: &ScanConfig) -> Result<Spectrum> {
    params.validate()?;
    from_response(cfg, |f| two_transition_response(f, params))
}

/// Which steady-state quantity a master-equation spectrum reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MasterObservable {
    /// `Tr(ρ a†a)`, coherent plus incoherent intracavity intensity.
    #[default]
    PhotonNumber,
    /// `|Tr(ρ a)|²`, the coherently scattered part only.
    CoherentField,
}

/// Spectrum from the steady-state photon number, `B_bg + S · n / ε²` with ε
/// angular, so that it is on the same scale as the closed forms.
pub fn master_spectrum(params: &SystemParams, cfg: &ScanConfig) -> Result<Spectrum> {
    master_spectrum_with(params, cfg, MasterObservable::PhotonNumber)
}

pub fn master_spectrum_with(
    params: &SystemParams,
    cfg: &ScanConfig,
    observable: MasterObservable,
) -> Result<Spectrum> {
    let (photon, coherent) = master_spectra(params, cfg)?;
    Ok(match observable {
        MasterObservable::PhotonNumber => photon,
        MasterObservable::CoherentField => coherent,
    })
}

/// Photon-number and coherent-field spectra from a single steady-state
/// solve per frequency.
pub fn master_spectra(params: &SystemParams, cfg: &ScanConfig) -> Result<(Spectrum, Spectrum)> {
    params.validate()?;
    cfg.validate()?;
    if !(params.drive_amp > 0.0) {
        return Err(Error::Domain(
            "master-equation spectrum needs a non-zero drive".into(),
        ));
    }
    let eps = angular(params.drive_amp);
    let freqs = cfg.frequencies();
    let observed: Vec<(f64, f64)> = freqs
        .par_iter()
        .map(|&f| {
            let rho = hilbert::steady_state(params, f)?;
            let n = hilbert::expectation_photon_number(&rho)?;
            Ok((n, hilbert::expectation_field(&rho).norm_sqr()))
        })
        .collect::<Result<_>>()?;
    let to_spectrum = |pick: fn(&(f64, f64)) -> f64| {
        let values: Vec<f64> = observed
            .iter()
            .map(|o| cfg.background + cfg.scale * pick(o) / (eps * eps))
            .collect();
        Spectrum::from_values(&freqs, &values)
    };
    Ok((to_spectrum(|o| o.0)?, to_spectrum(|o| o.1)?))
}

/// Largest `|a − b| / |b|` over the grid, with background removed.
pub fn max_relative_deviation(a: &Spectrum, b: &Spectrum, background: f64) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(Error::Shape("spectra are on different grids".into()));
    }
    Ok(a.points
        .iter()
        .zip(&b.points)
        .map(|(x, y)| {
            let (x, y) = (x.reflectivity - background, y.reflectivity - background);
            (x - y).abs() / y.abs()
        })
        .fold(0.0, f64::max))
}

/// `P_up R_up + (1 − P_up) R_down` pointwise.
pub fn mixed_spectrum(
    p_up: f64,
    spectrum_up: &Spectrum,
    spectrum_down: &Spectrum,
) -> Result<Spectrum> {
    if !(0.0..=1.0).contains(&p_up) {
        return Err(Error::Domain(format!("p_up {p_up} outside [0, 1]")));
    }
    if !spectrum_up.same_grid(spectrum_down) {
        return Err(Error::Shape(
            "spin-up and spin-down spectra are on different grids".into(),
        ));
    }
    if p_up == 1.0 {
        return Ok(spectrum_up.clone());
    }
    if p_up == 0.0 {
        return Ok(spectrum_down.clone());
    }
    let values: Vec<f64> = spectrum_up
        .points
        .iter()
        .zip(&spectrum_down.points)
        .map(|(u, d)| p_up * u.reflectivity + (1.0 - p_up) * d.reflectivity)
        .collect();
    spectrum_down.with_values(&values)
}

/// Spin-mixed closed-form spectrum: spin up sees the bare cavity, spin down
/// the two-transition response. Both share `S` and `B_bg`.
pub fn mixed_two_transition_spectrum(
    params: &SystemParams,
    p_up: f64,
    cfg: &ScanConfig,
) -> Result<Spectrum> {
    let up = two_transition_spectrum(&params.bare_cavity(), cfg)?;
    let down = two_transition_spectrum(params, cfg)?;
    mixed_spectrum(p_up, &up, &down)
}

/// System parameters at a given field: σ₃ and σ₄ follow the trion levels,
/// the cavity stays put.
pub fn params_at_field(levels: &TrionLevels, params: &SystemParams, field: f64) -> SystemParams {
    let tf = levels.at_field(field).transition_frequencies();
    SystemParams {
        omega_x: tf.sigma3,
        delta_h: tf.sigma3 - tf.sigma4,
        ..*params
    }
}

/// Two-transition spectra at each field, tagged with `field_T` metadata.
pub fn field_sweep(
    levels: &TrionLevels,
    params: &SystemParams,
    fields: &[f64],
    cfg: &ScanConfig,
) -> Result<Vec<Spectrum>> {
    levels.validate()?;
    if fields.is_empty() {
        return Err(Error::Validation("field list is empty".into()));
    }
    if let Some(b) = fields.iter().find(|b| !(**b >= 0.0)) {
        return Err(Error::Validation(format!("field {b} must be non-negative")));
    }
    fields
        .par_iter()
        .map(|&b| {
            let p = params_at_field(levels, params, b);
            two_transition_spectrum(&p, cfg).map(|s| s.with_meta("field_T", b))
        })
        .collect()
}

/// Divides every reflectivity by `peak`.
pub fn normalize(spectrum: &Spectrum, peak: f64) -> Result<Spectrum> {
    if !(peak > 0.0) {
        return Err(Error::Domain("normalization peak must be positive".into()));
    }
    let values: Vec<f64> = spectrum
        .points
        .iter()
        .map(|p| p.reflectivity / peak)
        .collect();
    spectrum.with_values(&values)
}

/// Applies the fringe and relative Gaussian noise. Deterministic in `seed`.
pub fn synthesize_noisy(
    spectrum: &Spectrum,
    noise_rel: f64,
    fringe: &FringeModel,
    seed: u64,
) -> Result<Spectrum> {
    if !(noise_rel >= 0.0) {
        return Err(Error::Domain(format!(
            "noise_rel {noise_rel} must be non-negative"
        )));
    }
    fringe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let values: Vec<f64> = spectrum
        .points
        .iter()
        .map(|p| {
            let signal = p.reflectivity * fringe.factor(p.freq);
            let z: f64 = unit.sample(&mut rng);
            if noise_rel == 0.0 {
                signal
            } else {
                (signal + noise_rel * signal * z).max(0.0)
            }
        })
        .collect();
    spectrum.with_values(&values)
}
