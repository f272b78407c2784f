//! Reflectivity of a charged quantum dot strongly coupled to a photonic
//! crystal cavity.
//!
//! The crate has four layers:
//!
//! - [`physcalc`]: constants, unit conversions and closed-form derived
//!   quantities (Landé factor, thermal spin population, cooperativity).
//! - [`hilbert`]: the driven V-scheme master equation on an atom ⊗ Fock
//!   space, its Liouvillian and steady state, plus a Runge–Kutta oracle.
//! - [`spectra`]: closed-form and master-equation reflectivity spectra,
//!   spin mixtures, magnetic field sweeps and synthetic noisy data.
//! - [`fitkit`]: weighted Levenberg–Marquardt fits of spectra with
//!   confidence bounds and profile likelihoods.
//!
//! [`dataio`] holds the on-disk formats.
//!
//! Rates and frequencies are given everywhere as ordinary frequencies in GHz
//! (the quoted value of `rate / 2π`). Conversion to angular units happens in
//! one place, [`physcalc::angular`].

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod fitkit;
pub mod hilbert;
pub mod physcalc;
pub mod spectra;

pub use error::{Error, Result};
pub use fitkit::{fit, fit_thermal_pup, FitProblem, FitResult, Model};
pub use hilbert::{steady_state, DensityMatrix, SystemParams};
pub use physcalc::TrionLevels;
pub use spectra::{ScanConfig, Spectrum};
