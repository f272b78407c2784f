//! Weighted nonlinear least-squares fits of reflectivity spectra.
//!
//! The optimizer is a bound-constrained Levenberg–Marquardt iteration with
//! central-difference Jacobians and Marquardt's diagonal scaling. Confidence
//! half-widths come from the linearized covariance for interior optima and
//! from the profile likelihood for parameters that end on a bound.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::hilbert::SystemParams;
use crate::physcalc;
use crate::spectra::{self, Spectrum};

/// Named parameter values.
pub type ParamMap = BTreeMap<String, f64>;

pub const DEFAULT_CENTER_FACTOR: f64 = 10.0;
pub const DEFAULT_CENTER_POINTS: usize = 3;

/// Gradient cosine below which a fit is declared converged.
const STALL_GTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Lorentzian,
    SingleTransition,
    MixedTwoTransition,
}

const LORENTZIAN_PARAMS: &[&str] = &["kappa", "omega_c", "scale", "background"];
const SINGLE_PARAMS: &[&str] = &[
    "g",
    "kappa",
    "gamma",
    "delta",
    "omega_c",
    "scale",
    "background",
];
const MIXED_PARAMS: &[&str] = &[
    "kappa",
    "g3",
    "g4",
    "gamma3",
    "gamma4",
    "gamma_d3",
    "gamma_d4",
    "omega_c",
    "omega_x",
    "delta_h",
    "p_up",
    "scale",
    "background",
];

impl Model {
    pub fn parameter_names(&self) -> &'static [&'static str] {
        match self {
            Model::Lorentzian => LORENTZIAN_PARAMS,
            Model::SingleTransition => SINGLE_PARAMS,
            Model::MixedTwoTransition => MIXED_PARAMS,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lorentzian" => Ok(Model::Lorentzian),
            "single" | "single_transition" | "dit" => Ok(Model::SingleTransition),
            "mixed" | "mixed_two_transition" => Ok(Model::MixedTwoTransition),
            other => Err(Error::Validation(format!("unknown model '{other}'"))),
        }
    }

    /// Model reflectivity at each frequency. `params` must hold every name.
    pub fn evaluate(&self, params: &ParamMap, freqs: &[f64]) -> Result<Vec<f64>> {
        let get = |name: &str| {
            params
                .get(name)
                .copied()
                .ok_or_else(|| Error::Schema(format!("missing parameter '{name}'")))
        };
        let scale = get("scale")?;
        let background = get("background")?;
        let out = match self {
            Model::Lorentzian => {
                let (kappa, omega_c) = (get("kappa")?, get("omega_c")?);
                freqs
                    .iter()
                    .map(|&f| background + scale * spectra::lorentzian_response(f, kappa, omega_c))
                    .collect()
            }
            Model::SingleTransition => {
                let (g, kappa, gamma, delta, omega_c) = (
                    get("g")?,
                    get("kappa")?,
                    get("gamma")?,
                    get("delta")?,
                    get("omega_c")?,
                );
                freqs
                    .iter()
                    .map(|&f| {
                        background
                            + scale * spectra::dit_response(f, g, kappa, gamma, delta, omega_c)
                    })
                    .collect()
            }
            Model::MixedTwoTransition => {
                let p = system_params_from(params)?;
                let p_up = get("p_up")?;
                freqs
                    .iter()
                    .map(|&f| {
                        let up = spectra::lorentzian_response(f, p.kappa, p.omega_c);
                        let down = spectra::two_transition_response(f, &p);
                        background + scale * (p_up * up + (1.0 - p_up) * down)
                    })
                    .collect()
            }
        };
        Ok(out)
    }
}

fn system_params_from(params: &ParamMap) -> Result<SystemParams> {
    let get = |name: &str| {
        params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing parameter '{name}'")))
    };
    let mut p = SystemParams::new(
        get("kappa")?,
        get("g3")?,
        get("g4")?,
        get("omega_c")?,
        get("omega_x")?,
        get("delta_h")?,
    );
    p.gamma3 = get("gamma3")?;
    p.gamma4 = get("gamma4")?;
    p.gamma_d3 = get("gamma_d3")?;
    p.gamma_d4 = get("gamma_d4")?;
    Ok(p)
}

/// Parameter map for the mixed model from a parameter set.
pub fn mixed_params_from(
    system: &SystemParams,
    p_up: f64,
    scale: f64,
    background: f64,
) -> ParamMap {
    [
        ("kappa", system.kappa),
        ("g3", system.g3),
        ("g4", system.g4),
        ("gamma3", system.gamma3),
        ("gamma4", system.gamma4),
        ("gamma_d3", system.gamma_d3),
        ("gamma_d4", system.gamma_d4),
        ("omega_c", system.omega_c),
        ("omega_x", system.omega_x),
        ("delta_h", system.delta_h),
        ("p_up", p_up),
        ("scale", scale),
        ("background", background),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn is_absolute_frequency(name: &str) -> bool {
    matches!(name, "omega_c" | "omega_x")
}

/// Natural bounds for a parameter name.
pub fn default_bounds(name: &str) -> (f64, f64) {
    match name {
        "p_up" => (0.0, 1.0),
        "kappa" | "gamma" => (1e-6, f64::INFINITY),
        "omega_c" | "omega_x" | "delta" | "delta_h" => (f64::NEG_INFINITY, f64::INFINITY),
        _ => (0.0, f64::INFINITY),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeParam {
    pub name: String,
    pub initial: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Eliminates g₃ through `g₃² + g₄² = g_total²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingConstraint {
    pub g_total: f64,
}

impl CouplingConstraint {
    pub fn g3(&self, g4: f64) -> Result<f64> {
        if g4 > self.g_total {
            return Err(Error::Domain(format!(
                "constraint infeasible: g4 = {g4} exceeds g_total = {}",
                self.g_total
            )));
        }
        Ok((self.g_total * self.g_total - g4 * g4).max(0.0).sqrt())
    }
}

/// Extra weight on the points nearest the reflection dip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterWeight {
    pub n_points: usize,
    pub factor: f64,
    /// Explicit dip frequency; located from the data when absent.
    #[serde(default)]
    pub center: Option<f64>,
}

impl Default for CenterWeight {
    fn default() -> Self {
        Self {
            n_points: DEFAULT_CENTER_POINTS,
            factor: DEFAULT_CENTER_FACTOR,
            center: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative gradient tolerance (cosine between residual and Jacobian
    /// columns).
    pub gtol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gtol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    pub data: Spectrum,
    pub model: Model,
    pub free: Vec<FreeParam>,
    pub fixed: ParamMap,
    pub constraint: Option<CouplingConstraint>,
    pub center_weight: Option<CenterWeight>,
    pub options: FitOptions,
}

impl FitProblem {
    pub fn new(data: Spectrum, model: Model) -> Self {
        Self {
            data,
            model,
            free: Vec::new(),
            fixed: ParamMap::new(),
            constraint: None,
            center_weight: None,
            options: FitOptions::default(),
        }
    }

    /// Frees `name` with its natural bounds.
    pub fn free(self, name: &str, initial: f64) -> Self {
        let (lower, upper) = default_bounds(name);
        self.free_bounded(name, initial, lower, upper)
    }

    pub fn free_bounded(mut self, name: &str, initial: f64, lower: f64, upper: f64) -> Self {
        self.fixed.remove(name);
        self.free.retain(|p| p.name != name);
        self.free.push(FreeParam {
            name: name.to_string(),
            initial,
            lower,
            upper,
        });
        self
    }

    pub fn fixed(mut self, name: &str, value: f64) -> Self {
        self.free.retain(|p| p.name != name);
        self.fixed.insert(name.to_string(), value);
        self
    }

    pub fn with_constraint(mut self, g_total: f64) -> Self {
        self.constraint = Some(CouplingConstraint { g_total });
        self.fixed.remove("g3");
        self.free.retain(|p| p.name != "g3");
        self
    }

    pub fn with_center_weight(mut self, weight: CenterWeight) -> Self {
        self.center_weight = Some(weight);
        self
    }

    pub fn with_options(mut self, options: FitOptions) -> Self {
        self.options = options;
        self
    }

    pub fn free_names(&self) -> Vec<String> {
        self.free.iter().map(|p| p.name.clone()).collect()
    }

    fn derived_names(&self) -> &'static [&'static str] {
        if self.constraint.is_some() {
            &["g3"]
        } else {
            &[]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.model.parameter_names();
        let derived = self.derived_names();
        if self.constraint.is_some() && self.model != Model::MixedTwoTransition {
            return Err(Error::Validation(
                "the coupling constraint applies only to the mixed two-transition model".into(),
            ));
        }
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for n in self
            .free
            .iter()
            .map(|p| p.name.as_str())
            .chain(self.fixed.keys().map(String::as_str))
        {
            *seen.entry(n).or_default() += 1;
        }
        for n in derived {
            *seen.entry(n).or_default() += 1;
        }
        for (n, count) in &seen {
            if !names.contains(n) {
                return Err(Error::Schema(format!(
                    "parameter '{n}' is not part of the {:?} model",
                    self.model
                )));
            }
            if *count > 1 {
                return Err(Error::Schema(format!(
                    "parameter '{n}' is specified more than once"
                )));
            }
        }
        let missing: Vec<&str> = names
            .iter()
            .copied()
            .filter(|n| !seen.contains_key(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!(
                "parameters not specified: {}",
                missing.join(", ")
            )));
        }
        for p in &self.free {
            if !(p.lower <= p.initial && p.initial <= p.upper) || !p.initial.is_finite() {
                return Err(Error::Validation(format!(
                    "initial value {} of '{}' is outside [{}, {}]",
                    p.initial, p.name, p.lower, p.upper
                )));
            }
        }
        for (n, v) in &self.fixed {
            let (lo, hi) = default_bounds(n);
            if !v.is_finite() || *v < lo || *v > hi {
                return Err(Error::Validation(format!(
                    "fixed value {v} of '{n}' is out of range"
                )));
            }
        }
        if self.data.len() < self.free.len() + 2 {
            return Err(Error::Validation(format!(
                "{} data points cannot constrain {} free parameters",
                self.data.len(),
                self.free.len()
            )));
        }
        if let Some(c) = self.constraint {
            if !(c.g_total >= 0.0) {
                return Err(Error::Validation("g_total must be non-negative".into()));
            }
            let g4 = self
                .free
                .iter()
                .find(|p| p.name == "g4")
                .map(|p| p.initial)
                .or_else(|| self.fixed.get("g4").copied())
                .unwrap_or(0.0);
            c.g3(g4)?;
        }
        if let Some(w) = self.center_weight {
            if !(w.factor > 0.0) {
                return Err(Error::Validation(
                    "center weight factor must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Which method produced a confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Covariance,
    Profile,
    Propagated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedSummary {
    #[serde(default)]
    pub g3: Option<f64>,
    pub cooperativity: f64,
    pub strong_coupling: bool,
    #[serde(default)]
    pub detuning_sigma4_cavity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: Model,
    /// Every model parameter: free, fixed and derived.
    pub params: ParamMap,
    pub free: Vec<String>,
    /// 95% half-widths; `inf` when a parameter is not identifiable.
    #[serde(with = "serde_inf_map")]
    pub ci95: ParamMap,
    pub ci_method: BTreeMap<String, CiMethod>,
    pub residual_rms: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Largest cosine between the residual vector and a Jacobian column.
    pub gradient_cosine: f64,
    #[serde(default)]
    pub g_total: Option<f64>,
    #[serde(default)]
    pub derived: Option<DerivedSummary>,
}

mod serde_inf_map {
    //! JSON has no infinity; unbounded half-widths are stored as null.
    use super::ParamMap;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(map: &ParamMap, s: S) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<&String, Option<f64>> = map
            .iter()
            .map(|(k, v)| (k, v.is_finite().then_some(*v)))
            .collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ParamMap, D::Error> {
        let m: BTreeMap<String, Option<f64>> = BTreeMap::deserialize(d)?;
        Ok(m.into_iter()
            .map(|(k, v)| (k, v.unwrap_or(f64::INFINITY)))
            .collect())
    }
}

/// Compiled problem: free vector ↔ full parameter map, weights, residuals.
struct Objective<'a> {
    problem: &'a FitProblem,
    freqs: Vec<f64>,
    values: Vec<f64>,
    sqrt_weights: Vec<f64>,
    /// Subtracted from absolute-frequency parameters inside the free vector.
    freq_ref: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    typical: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(problem: &'a FitProblem) -> Result<Self> {
        let freqs = problem.data.freqs();
        let values = problem.data.values();
        let mut weights = problem.data.weights();
        if let Some(cw) = problem.center_weight {
            for i in center_indices(&problem.data, &cw) {
                weights[i] *= cw.factor;
            }
        }
        let freq_ref = 0.5 * (freqs[0] + freqs[freqs.len() - 1]);
        let data_scale = values
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let offset = |name: &str| {
            if is_absolute_frequency(name) {
                freq_ref
            } else {
                0.0
            }
        };
        let lower = problem
            .free
            .iter()
            .map(|p| p.lower - offset(&p.name))
            .collect();
        let mut upper: Vec<f64> = problem
            .free
            .iter()
            .map(|p| p.upper - offset(&p.name))
            .collect();
        if let Some(c) = problem.constraint {
            for (u, p) in upper.iter_mut().zip(&problem.free) {
                if p.name == "g4" {
                    *u = u.min(c.g_total);
                }
            }
        }
        let typical = problem
            .free
            .iter()
            .map(|p| match p.name.as_str() {
                "background" => data_scale,
                "scale" => p.initial.abs().max(f64::MIN_POSITIVE),
                _ => 1.0,
            })
            .collect();
        Ok(Self {
            problem,
            freqs,
            values,
            sqrt_weights: weights.iter().map(|w| w.sqrt()).collect(),
            freq_ref,
            lower,
            upper,
            typical,
        })
    }

    fn initial(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.problem.free.len(),
            self.problem.free.iter().map(|p| {
                if is_absolute_frequency(&p.name) {
                    p.initial - self.freq_ref
                } else {
                    p.initial
                }
            }),
        )
    }

    fn project(&self, x: &mut DVector<f64>) {
        for j in 0..x.len() {
            x[j] = x[j].clamp(self.lower[j], self.upper[j]);
        }
    }

    fn full_params(&self, x: &DVector<f64>) -> Result<ParamMap> {
        let mut map = self.problem.fixed.clone();
        for (p, &v) in self.problem.free.iter().zip(x.iter()) {
            let v = if is_absolute_frequency(&p.name) {
                v + self.freq_ref
            } else {
                v
            };
            map.insert(p.name.clone(), v);
        }
        if let Some(c) = self.problem.constraint {
            let g4 = map.get("g4").copied().unwrap_or(0.0);
            map.insert("g3".into(), c.g3(g4)?);
        }
        Ok(map)
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let params = self.full_params(x)?;
        let model = self.problem.model.evaluate(&params, &self.freqs)?;
        let r = DVector::from_iterator(
            self.freqs.len(),
            model
                .iter()
                .zip(&self.values)
                .zip(&self.sqrt_weights)
                .map(|((m, y), w)| w * (y - m)),
        );
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("model produced non-finite residuals"));
        }
        Ok(r)
    }

    /// Central differences, one-sided next to a bound. Jacobian of the
    /// residuals (data minus model).
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.freqs.len();
        let cols: Vec<Result<DVector<f64>>> = (0..x.len())
            .map(|j| {
                let h = 6e-6 * x[j].abs().max(self.typical[j]);
                let up_ok = x[j] + h <= self.upper[j];
                let down_ok = x[j] - h >= self.lower[j];
                let eval = |delta: f64| {
                    let mut xp = x.clone();
                    xp[j] += delta;
                    self.residuals(&xp)
                };
                Ok(match (up_ok, down_ok) {
                    (true, true) => (eval(h)? - eval(-h)?) / (2.0 * h),
                    (true, false) => (eval(h)? - self.residuals(x)?) / h,
                    (false, true) => (self.residuals(x)? - eval(-h)?) / h,
                    (false, false) => {
                        let span = self.upper[j] - self.lower[j];
                        if span <= 0.0 {
                            DVector::zeros(n)
                        } else {
                            let mut a = x.clone();
                            let mut b = x.clone();
                            a[j] = self.lower[j];
                            b[j] = self.upper[j];
                            (self.residuals(&b)? - self.residuals(&a)?) / span
                        }
                    }
                })
            })
            .collect();
        let mut jac = DMatrix::zeros(n, x.len());
        for (j, c) in cols.into_iter().enumerate() {
            jac.set_column(j, &c?);
        }
        Ok(jac)
    }

    fn at_bound(&self, x: &DVector<f64>, j: usize) -> Option<Bound> {
        let tol = |b: f64| 1e-9 * b.abs().max(self.typical[j]);
        if self.lower[j].is_finite() && x[j] - self.lower[j] <= tol(self.lower[j]) {
            Some(Bound::Lower)
        } else if self.upper[j].is_finite() && self.upper[j] - x[j] <= tol(self.upper[j]) {
            Some(Bound::Upper)
        } else {
            None
        }
    }

    /// Cosine between the residual vector and each Jacobian column, ignoring
    /// columns pinned against an active bound.
    fn gradient_cosine(&self, x: &DVector<f64>, jac: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
        let rn = r.norm();
        if rn == 0.0 {
            return 0.0;
        }
        let grad = jac.transpose() * r; // gradient of ½‖r‖² is Jᵀr
        let mut worst: f64 = 0.0;
        for j in 0..x.len() {
            let g = grad[j];
            // Descent direction is −g; blocked if it points out of the box.
            match self.at_bound(x, j) {
                Some(Bound::Lower) if g > 0.0 => continue,
                Some(Bound::Upper) if g < 0.0 => continue,
                _ => {}
            }
            let cn = jac.column(j).norm();
            if cn > 0.0 {
                worst = worst.max(g.abs() / (cn * rn));
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Lower,
    Upper,
}

/// Indices of the `n_points` samples nearest the reflection dip.
pub fn center_indices(data: &Spectrum, weight: &CenterWeight) -> Vec<usize> {
    let freqs = data.freqs();
    let center = weight.center.unwrap_or_else(|| locate_dip(data));
    let mut idx: Vec<usize> = (0..freqs.len()).collect();
    idx.sort_by(|&a, &b| {
        (freqs[a] - center)
            .abs()
            .total_cmp(&(freqs[b] - center).abs())
    });
    idx.truncate(weight.n_points.min(freqs.len()));
    idx.sort_unstable();
    idx
}

/// Lowest point between the two main peaks of a lightly smoothed copy of the
/// data; falls back to the global maximum when there is no dip.
pub fn locate_dip(data: &Spectrum) -> f64 {
    let v = data.values();
    let n = v.len();
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 2).min(n - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let freqs = data.freqs();
    let fallback = freqs[v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)];
    let Ok(s) = Spectrum::from_values(&freqs, &smoothed) else {
        return fallback;
    };
    s.central_dip().unwrap_or(fallback)
}

pub fn fit(problem: &FitProblem) -> Result<FitResult> {
    problem.validate()?;
    let obj = Objective::new(problem)?;
    let mut x = obj.initial();
    obj.project(&mut x);
    let outcome = levenberg_marquardt(&obj, x, &problem.options)?;
    finish(&obj, outcome)
}

struct LmOutcome {
    x: DVector<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
    gradient_cosine: f64,
}

fn levenberg_marquardt(
    obj: &Objective,
    mut x: DVector<f64>,
    opts: &FitOptions,
) -> Result<LmOutcome> {
    let m = x.len();
    let mut r = obj.residuals(&x)?;
    let mut cost = 0.5 * r.norm_squared();
    if m == 0 {
        return Ok(LmOutcome {
            x,
            cost,
            iterations: 0,
            converged: true,
            gradient_cosine: 0.0,
        });
    }
    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut diag_scale = DVector::<f64>::zeros(m);
    let mut iterations = 0;
    let mut converged = false;
    let mut gradient_cosine = f64::INFINITY;

    while iterations < opts.max_iterations {
        iterations += 1;
        let jac = obj.jacobian(&x)?;
        gradient_cosine = obj.gradient_cosine(&x, &jac, &r);
        if gradient_cosine <= opts.gtol {
            converged = true;
            break;
        }
        let jtj = jac.transpose() * &jac;
        let neg_grad = -(jac.transpose() * &r);
        for j in 0..m {
            diag_scale[j] = diag_scale[j].max(jtj[(j, j)]).max(1e-300);
        }

        let mut improved = false;
        loop {
            let mut a = jtj.clone();
            for j in 0..m {
                a[(j, j)] += lambda * diag_scale[j];
            }
            let step = a
                .clone()
                .cholesky()
                .map(|c| c.solve(&neg_grad))
                .or_else(|| a.lu().solve(&neg_grad));
            let Some(step) = step else {
                lambda *= nu;
                nu *= 2.0;
                if lambda > 1e20 {
                    break;
                }
                continue;
            };
            let mut x_new = &x + &step;
            obj.project(&mut x_new);
            let actual_step = &x_new - &x;
            let r_new = match obj.residuals(&x_new) {
                Ok(r) => r,
                Err(Error::Domain(_)) | Err(Error::Numerical { .. }) => {
                    lambda *= nu;
                    nu *= 2.0;
                    if lambda > 1e20 {
                        break;
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let cost_new = 0.5 * r_new.norm_squared();
            if cost_new < cost {
                // Gain ratio against the linear model prediction.
                let predicted = {
                    let lin = &r + &jac * &actual_step;
                    cost - 0.5 * lin.norm_squared()
                };
                let rho = if predicted > 0.0 {
                    (cost - cost_new) / predicted
                } else {
                    0.5
                };
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                let rel_reduction = (cost - cost_new) / cost.max(f64::MIN_POSITIVE);
                let rel_step = actual_step
                    .iter()
                    .zip(x.iter())
                    .enumerate()
                    .map(|(j, (d, xj))| d.abs() / xj.abs().max(obj.typical[j]))
                    .fold(0.0, f64::max);
                x = x_new;
                r = r_new;
                cost = cost_new;
                improved = true;
                if rel_reduction < 1e-15 && rel_step < 1e-12 {
                    improved = false;
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e20 {
                break;
            }
        }
        if !improved {
            let jac = obj.jacobian(&x)?;
            gradient_cosine = obj.gradient_cosine(&x, &jac, &r);
            converged = gradient_cosine <= opts.gtol.max(STALL_GTOL);
            break;
        }
    }
    if !converged && iterations >= opts.max_iterations {
        let jac = obj.jacobian(&x)?;
        gradient_cosine = obj.gradient_cosine(&x, &jac, &r);
        converged = gradient_cosine <= opts.gtol;
    }
    if !cost.is_finite() {
        converged = false;
    }
    Ok(LmOutcome {
        x,
        cost,
        iterations,
        converged,
        gradient_cosine,
    })
}

fn chi2_95() -> f64 {
    ChiSquared::new(1.0).expect("dof 1").inverse_cdf(0.95)
}

fn student_t_975(dof: usize) -> f64 {
    if dof == 0 {
        return f64::INFINITY;
    }
    StudentsT::new(0.0, 1.0, dof as f64)
        .expect("valid dof")
        .inverse_cdf(0.975)
}

fn finish(obj: &Objective, outcome: LmOutcome) -> Result<FitResult> {
    let problem = obj.problem;
    let n = obj.freqs.len();
    let m = outcome.x.len();
    let params = obj.full_params(&outcome.x)?;
    let residual_rms = (2.0 * outcome.cost / n as f64).sqrt();

    let mut ci95 = ParamMap::new();
    let mut ci_method = BTreeMap::new();
    if m > 0 {
        let jac = obj.jacobian(&outcome.x)?;
        let half_widths = covariance_half_widths(&jac, outcome.cost, n);
        for (j, p) in problem.free.iter().enumerate() {
            ci95.insert(p.name.clone(), half_widths[j]);
            ci_method.insert(p.name.clone(), CiMethod::Covariance);
        }
        for (j, p) in problem.free.iter().enumerate() {
            if let Some(bound) = obj.at_bound(&outcome.x, j) {
                let dir = match bound {
                    Bound::Lower => Direction::Up,
                    Bound::Upper => Direction::Down,
                };
                let best = params[&p.name];
                if let Ok(edge) = profile_bound_from(problem, &params, outcome.cost, &p.name, dir) {
                    ci95.insert(p.name.clone(), (edge - best).abs());
                    ci_method.insert(p.name.clone(), CiMethod::Profile);
                }
            }
        }
    }
    let mut g_total = None;
    if let Some(c) = problem.constraint {
        g_total = Some(c.g_total);
        let g3 = params["g3"];
        let g4 = params["g4"];
        if let Some(ci_g4) = ci95.get("g4").copied() {
            let ci = if g3 > 0.0 {
                (g4 / g3).abs() * ci_g4
            } else {
                f64::INFINITY
            };
            ci95.insert("g3".into(), ci);
            ci_method.insert("g3".into(), CiMethod::Propagated);
        }
    }
    let mut report_input = params.clone();
    if let Some(g) = g_total {
        report_input.insert("g_total".into(), g);
    }
    let derived = match problem.model {
        Model::Lorentzian => None,
        _ => derive_report(&report_input).ok(),
    };
    Ok(FitResult {
        model: problem.model,
        params,
        free: problem.free_names(),
        ci95,
        ci_method,
        residual_rms,
        n_iterations: outcome.iterations,
        converged: outcome.converged,
        gradient_cosine: outcome.gradient_cosine,
        g_total,
        derived,
    })
}

/// `t · sqrt(diag(s² (JᵀJ)⁻¹))`, infinite for directions the data do not
/// constrain.
fn covariance_half_widths(jac: &DMatrix<f64>, cost: f64, n: usize) -> Vec<f64> {
    let m = jac.ncols();
    let dof = n.saturating_sub(m);
    let s2 = if dof > 0 {
        2.0 * cost / dof as f64
    } else {
        f64::INFINITY
    };
    let t = student_t_975(dof);
    let jtj = jac.transpose() * jac;
    let eig = jtj.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let cutoff = 1e-13 * max_ev;
    (0..m)
        .map(|j| {
            let mut var = 0.0;
            for k in 0..m {
                let v = eig.eigenvectors[(j, k)];
                let ev = eig.eigenvalues[k];
                if ev <= cutoff {
                    if v * v > 1e-8 {
                        return f64::INFINITY;
                    }
                } else {
                    var += v * v / ev;
                }
            }
            t * (s2 * var).sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Problem with `name` pinned at `value` and the other free parameters
/// warm-started from `start`.
fn pinned_problem(problem: &FitProblem, start: &ParamMap, name: &str, value: f64) -> FitProblem {
    let mut p = problem.clone();
    p.free = problem
        .free
        .iter()
        .filter(|f| f.name != name)
        .map(|f| FreeParam {
            initial: start[&f.name].clamp(f.lower, f.upper),
            ..f.clone()
        })
        .collect();
    p.fixed.insert(name.to_string(), value);
    p
}

/// ½ Σ wᵢ rᵢ², recovered from `residual_rms = sqrt(2 cost / n)`.
fn cost_of(result: &FitResult, n: usize) -> f64 {
    0.5 * result.residual_rms * result.residual_rms * n as f64
}

/// Residual rms after re-optimizing every other free parameter at each grid
/// value of `param_name`.
pub fn goodness_profile(
    problem: &FitProblem,
    param_name: &str,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if !problem.free.iter().any(|p| p.name == param_name) {
        return Err(Error::Schema(format!(
            "'{param_name}' is not a free parameter"
        )));
    }
    let best = fit(problem)?;
    grid.par_iter()
        .map(|&v| {
            let r = fit(&pinned_problem(problem, &best.params, param_name, v))?;
            Ok((v, r.residual_rms))
        })
        .collect()
}

/// Profile-likelihood 95% bound on one side of the optimum: the value where
/// the weighted sum of squares exceeds its minimum by the χ²₁(0.95) quantile
/// in units of the residual variance.
pub fn profile_bound(
    problem: &FitProblem,
    best: &FitResult,
    name: &str,
    direction: Direction,
) -> Result<f64> {
    profile_bound_from(
        problem,
        &best.params,
        cost_of(best, problem.data.len()),
        name,
        direction,
    )
}

fn profile_bound_from(
    problem: &FitProblem,
    best: &ParamMap,
    best_cost: f64,
    name: &str,
    direction: Direction,
) -> Result<f64> {
    let spec = problem
        .free
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Schema(format!("'{name}' is not a free parameter")))?;
    let n = problem.data.len();
    let dof = n.saturating_sub(problem.free.len()).max(1);
    let threshold = best_cost * (1.0 + chi2_95() / dof as f64);
    let x0 = best[name];
    let limit = match direction {
        Direction::Up => spec.upper,
        Direction::Down => spec.lower,
    };
    let sign = if direction == Direction::Up {
        1.0
    } else {
        -1.0
    };
    let cost_at = |v: f64| -> Result<f64> {
        let r = fit(&pinned_problem(problem, best, name, v))?;
        Ok(cost_of(&r, n))
    };
    let mut step = 1e-3 * x0.abs().max(1.0);
    let mut inside = x0;
    let mut outside = None;
    for _ in 0..60 {
        let mut v = inside + sign * step;
        if (sign > 0.0 && v >= limit) || (sign < 0.0 && v <= limit) {
            v = limit;
        }
        if cost_at(v)? > threshold {
            outside = Some(v);
            break;
        }
        if v == limit {
            return Ok(limit);
        }
        inside = v;
        step *= 2.0;
    }
    let mut outside = outside.ok_or_else(|| {
        Error::numerical(format!("profile of '{name}' never crosses the threshold"))
    })?;
    for _ in 0..40 {
        let mid = 0.5 * (inside + outside);
        if cost_at(mid)? > threshold {
            outside = mid;
        } else {
            inside = mid;
        }
        if (outside - inside).abs() <= 1e-6 * x0.abs().max(1e-3) {
            break;
        }
    }
    Ok(0.5 * (inside + outside))
}

/// Cooperativity, strong-coupling flag, constrained g₃ and the σ₄–cavity
/// detuning from a set of named values.
///
/// The coupling is `g_total`, else `g`, else `√(g3² + g4²)`. The dipole rate
/// is `gamma`, else the σ₄ transverse rate `gamma4/2 + gamma_d4`.
pub fn derive_report(params: &ParamMap) -> Result<DerivedSummary> {
    let get = |k: &str| params.get(k).copied();
    let kappa = get("kappa").ok_or_else(|| Error::Schema("missing parameter 'kappa'".into()))?;
    let g = get("g_total")
        .or_else(|| get("g"))
        .or_else(|| Some((get("g3")?.powi(2) + get("g4")?.powi(2)).sqrt()))
        .ok_or_else(|| {
            Error::Schema("missing coupling: need 'g_total', 'g', or 'g3' and 'g4'".into())
        })?;
    let gamma = get("gamma")
        .or_else(|| Some(0.5 * get("gamma4")? + get("gamma_d4")?))
        .ok_or_else(|| {
            Error::Schema("missing dipole rate: need 'gamma' or 'gamma4' and 'gamma_d4'".into())
        })?;
    let g3 = match (get("g_total"), get("g4")) {
        (Some(gt), Some(g4)) => Some(CouplingConstraint { g_total: gt }.g3(g4)?),
        _ => get("g3"),
    };
    let detuning = match (get("omega_x"), get("delta_h"), get("omega_c")) {
        (Some(wx), Some(dh), Some(wc)) => Some((wx - dh - wc).abs()),
        _ => get("delta").map(f64::abs),
    };
    Ok(DerivedSummary {
        g3,
        cooperativity: physcalc::cooperativity(g, kappa, gamma)?,
        strong_coupling: physcalc::is_strongly_coupled(g, kappa, gamma),
        detuning_sigma4_cavity: detuning,
    })
}

/// Weighted linear least squares for `y ≈ B + S · shape` with `B ≥ 0`.
pub fn linear_scale_background(data: &Spectrum, shape: &[f64]) -> (f64, f64) {
    let y = data.values();
    let w = data.weights();
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..y.len() {
        sw += w[i];
        sx += w[i] * shape[i];
        sy += w[i] * y[i];
        sxx += w[i] * shape[i] * shape[i];
        sxy += w[i] * shape[i] * y[i];
    }
    let det = sw * sxx - sx * sx;
    if det.abs() > 0.0 {
        let s = (sw * sxy - sx * sy) / det;
        let b = (sxx * sy - sx * sxy) / det;
        if b >= 0.0 && s >= 0.0 {
            return (s, b);
        }
    }
    let s = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    (s, 0.0)
}

fn shape_of(model: Model, params: &ParamMap, data: &Spectrum) -> Result<Vec<f64>> {
    let mut p = params.clone();
    p.insert("scale".into(), 1.0);
    p.insert("background".into(), 0.0);
    model.evaluate(&p, &data.freqs())
}

/// Heuristic start for a Lorentzian: peak position, half-maximum width and
/// linear scale/background.
pub fn lorentzian_guess(data: &Spectrum) -> Result<ParamMap> {
    let f = data.freqs();
    let v = data.values();
    let imax = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
    let half = vmin + 0.5 * (v[imax] - vmin);
    let right = (imax..v.len())
        .find(|&i| v[i] < half)
        .map(|i| f[i])
        .unwrap_or(f[f.len() - 1]);
    let left = (0..=imax)
        .rev()
        .find(|&i| v[i] < half)
        .map(|i| f[i])
        .unwrap_or(f[0]);
    let kappa = (right - left).max(3.0 * (f[1] - f[0]));
    let mut p = ParamMap::new();
    p.insert("kappa".into(), kappa);
    p.insert("omega_c".into(), f[imax]);
    let (s, b) = linear_scale_background(data, &shape_of(Model::Lorentzian, &p, data)?);
    p.insert("scale".into(), s);
    p.insert("background".into(), b);
    Ok(p)
}

/// Heuristic start for a single dipole: cavity at the dip, coupling from
/// the peak splitting.
pub fn single_transition_guess(data: &Spectrum, kappa: f64) -> Result<ParamMap> {
    let smoothed = {
        let v = data.values();
        let n = v.len();
        let s: Vec<f64> = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(2);
                let hi = (i + 2).min(n - 1);
                v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect();
        Spectrum::from_values(&data.freqs(), &s)?
    };
    let (omega_c, g) = match smoothed.two_main_peaks() {
        Some((lo, hi)) => (locate_dip(data), 0.5 * (hi - lo)),
        None => (locate_dip(data), kappa / 2.0),
    };
    let mut p = ParamMap::new();
    p.insert("g".into(), g.max(0.1));
    p.insert("kappa".into(), kappa);
    p.insert("gamma".into(), 1.0);
    p.insert("delta".into(), 0.0);
    p.insert("omega_c".into(), omega_c);
    let (s, b) = linear_scale_background(data, &shape_of(Model::SingleTransition, &p, data)?);
    p.insert("scale".into(), s);
    p.insert("background".into(), b);
    Ok(p)
}

impl FitProblem {
    /// All four Lorentzian parameters free, seeded heuristically.
    pub fn lorentzian(data: Spectrum) -> Result<Self> {
        let guess = lorentzian_guess(&data)?;
        let mut p = FitProblem::new(data, Model::Lorentzian);
        for name in LORENTZIAN_PARAMS {
            p = p.free(name, guess[*name]);
        }
        Ok(p)
    }

    /// Single-transition fit with κ fixed and the default center weighting.
    pub fn single_transition(data: Spectrum, kappa: f64) -> Result<Self> {
        let guess = single_transition_guess(&data, kappa)?;
        let mut p = FitProblem::new(data, Model::SingleTransition).fixed("kappa", kappa);
        for name in ["g", "gamma", "delta", "omega_c", "scale", "background"] {
            p = p.free(name, guess[name]);
        }
        Ok(p.with_center_weight(CenterWeight::default()))
    }

    /// Optically pumped spectrum protocol: κ, γ₃, γ₄, Δ_h fixed from
    /// `start`; g₃ from the coupling constraint; g₄, dephasings, ω_c, ω_x,
    /// P_up, scale and background free; center weighting on.
    pub fn mixed_two_transition(
        data: Spectrum,
        start: &SystemParams,
        g_total: f64,
        p_up: f64,
    ) -> Result<Self> {
        let mut init = mixed_params_from(start, p_up, 1.0, 0.0);
        let shape = shape_of(Model::MixedTwoTransition, &init, &data)?;
        let (s, b) = linear_scale_background(&data, &shape);
        init.insert("scale".into(), s);
        init.insert("background".into(), b);
        let mut p = FitProblem::new(data, Model::MixedTwoTransition)
            .with_constraint(g_total)
            .fixed("kappa", start.kappa)
            .fixed("gamma3", start.gamma3)
            .fixed("gamma4", start.gamma4)
            .fixed("delta_h", start.delta_h);
        for name in [
            "g4",
            "gamma_d3",
            "gamma_d4",
            "omega_c",
            "omega_x",
            "p_up",
            "scale",
            "background",
        ] {
            p = p.free(name, init[name]);
        }
        Ok(p.with_center_weight(CenterWeight::default()))
    }
}

/// Second stage of the two-stage protocol: every quantum parameter fixed,
/// only `p_up`, `scale` and `background` free.
pub fn fit_thermal_pup(data: &Spectrum, fixed: &SystemParams) -> Result<FitResult> {
    fixed.validate()?;
    let mut init = mixed_params_from(fixed, 0.5, 1.0, 0.0);
    let shape = shape_of(Model::MixedTwoTransition, &init, data)?;
    let (s, b) = linear_scale_background(data, &shape);
    init.insert("scale".into(), s);
    init.insert("background".into(), b);
    let mut problem = FitProblem::new(data.clone(), Model::MixedTwoTransition);
    for name in MIXED_PARAMS {
        problem = match *name {
            "p_up" | "scale" | "background" => problem.free(name, init[*name]),
            _ => problem.fixed(name, init[*name]),
        };
    }
    fit(&problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{FringeModel, ScanConfig};
    use approx::assert_abs_diff_eq;

    const WC: f64 = 321_855.664;
    const KAPPA: f64 = 31.79;

    fn lorentz_data() -> Spectrum {
        let c = ScanConfig::normalized(WC - 100.0, WC + 100.0, 201, KAPPA).with_background(0.05);
        spectra::lorentzian_spectrum(KAPPA, WC + 2.0, &c).unwrap()
    }

    #[test]
    fn noiseless_lorentzian_round_trip() {
        let r = fit(&FitProblem::lorentzian(lorentz_data()).unwrap()).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.params["kappa"] - KAPPA).abs() < 1e-6 * KAPPA);
        assert!((r.params["omega_c"] - (WC + 2.0)).abs() < 1e-6);
        assert!(r.residual_rms < 1e-9);
        assert!(r.derived.is_none());
    }

    #[test]
    fn problem_schema_checks() {
        let d = lorentz_data();
        let p = FitProblem::new(d.clone(), Model::Lorentzian).free("kappa", 30.0);
        assert!(matches!(p.validate(), Err(Error::Schema(_))));
        let p = FitProblem::lorentzian(d.clone())
            .unwrap()
            .fixed("gamma", 1.0);
        assert!(matches!(p.validate(), Err(Error::Schema(_))));
        let p = FitProblem::lorentzian(d.clone())
            .unwrap()
            .free_bounded("kappa", 50.0, 0.0, 40.0);
        assert!(matches!(p.validate(), Err(Error::Validation(_))));
        let p = FitProblem::lorentzian(d.clone())
            .unwrap()
            .with_constraint(18.0);
        assert!(p.validate().is_err());
        let short = Spectrum::from_values(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0; 5]).unwrap();
        let p = FitProblem::new(short, Model::Lorentzian)
            .free("kappa", 1.0)
            .free("omega_c", 3.0)
            .free("scale", 1.0)
            .free("background", 0.0);
        assert!(p.validate().is_err());
    }

    fn device() -> SystemParams {
        SystemParams::new(KAPPA, 7.2615, 17.2, WC, WC + 12.0, 12.0).with_dephasing(3.1, 1.4)
    }

    #[test]
    fn infeasible_constraint() {
        let c = ScanConfig::normalized(WC - 80.0, WC + 80.0, 161, KAPPA);
        let data = spectra::mixed_two_transition_spectrum(&device(), 0.01, &c).unwrap();
        let mut start = device();
        start.g4 = 20.0;
        let p = FitProblem::mixed_two_transition(data, &start, 18.67, 0.05).unwrap();
        assert!(matches!(fit(&p), Err(Error::Domain(_))));
    }

    #[test]
    fn thermal_pup_exact_endpoints() {
        let c = ScanConfig::normalized(WC - 80.0, WC + 80.0, 161, KAPPA).with_background(0.02);
        let p = device();
        for truth in [0.0, 1.0, 0.52] {
            let data = spectra::mixed_two_transition_spectrum(&p, truth, &c).unwrap();
            let r = fit_thermal_pup(&data, &p).unwrap();
            assert!(
                (r.params["p_up"] - truth).abs() < 1e-6,
                "truth {truth}: {}",
                r.params["p_up"]
            );
            assert!(r.residual_rms < 1e-8);
        }
    }

    #[test]
    fn derive_report_examples() {
        let mut m = ParamMap::new();
        m.insert("g_total".into(), 18.67);
        m.insert("g4".into(), 17.2);
        m.insert("kappa".into(), 31.79);
        m.insert("gamma".into(), 1.78);
        let d = derive_report(&m).unwrap();
        assert_abs_diff_eq!(d.g3.unwrap(), 7.26, epsilon = 0.005);
        assert_abs_diff_eq!(d.cooperativity, 12.32, epsilon = 0.005);
        assert!(d.strong_coupling);
        assert!(d.detuning_sigma4_cavity.is_none());
        m.insert("omega_c".into(), WC);
        m.insert("omega_x".into(), WC + 14.0);
        m.insert("delta_h".into(), 12.0);
        assert_abs_diff_eq!(
            derive_report(&m).unwrap().detuning_sigma4_cavity.unwrap(),
            2.0,
            epsilon = 1e-9
        );
        m.remove("kappa");
        assert!(matches!(derive_report(&m), Err(Error::Schema(_))));
        let mut bad = ParamMap::new();
        bad.insert("kappa".into(), 31.79);
        assert!(matches!(derive_report(&bad), Err(Error::Schema(_))));
    }

    #[test]
    fn profile_minimum_at_truth() {
        let p = FitProblem::lorentzian(lorentz_data()).unwrap();
        let grid = [KAPPA - 1.0, KAPPA - 0.5, KAPPA, KAPPA + 0.5, KAPPA + 1.0];
        let prof = goodness_profile(&p, "kappa", &grid).unwrap();
        let best = prof.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert_eq!(best.0, KAPPA);
        assert!(best.1 < 1e-9);
        assert!(prof[0].1 > prof[1].1 && prof[4].1 > prof[3].1);
        assert!(goodness_profile(&p, "gamma", &grid).is_err());
    }

    #[test]
    fn center_indices_pick_the_dip() {
        let c = ScanConfig::normalized(WC - 80.0, WC + 80.0, 161, KAPPA);
        let data = spectra::dit_spectrum(18.67, KAPPA, 1.78, 0.0, WC + 3.0, &c).unwrap();
        let idx = center_indices(&data, &CenterWeight::default());
        let f = data.freqs();
        assert_eq!(idx.len(), 3);
        assert!(idx.iter().all(|&i| (f[i] - (WC + 3.0)).abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn deterministic() {
        let c = ScanConfig::normalized(WC - 100.0, WC + 100.0, 201, KAPPA);
        let clean = spectra::dit_spectrum(18.67, KAPPA, 1.78, 0.0, WC, &c).unwrap();
        let data = spectra::synthesize_noisy(&clean, 0.01, &FringeModel::none(), 3).unwrap();
        let a = fit(&FitProblem::single_transition(data.clone(), KAPPA).unwrap()).unwrap();
        let b = fit(&FitProblem::single_transition(data, KAPPA).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    fn truth_mixed(g4: f64) -> SystemParams {
        let g3 = (18.67f64.powi(2) - g4 * g4).sqrt();
        SystemParams::new(KAPPA, g3, g4, WC, WC + 12.0, 12.0).with_dephasing(3.1, 1.4)
    }

    #[test]
    fn constraint_consistency() {
        let c = ScanConfig::normalized(WC - 80.0, WC + 80.0, 161, KAPPA).with_background(0.02);
        let clean = spectra::mixed_two_transition_spectrum(&truth_mixed(17.2), 0.01, &c).unwrap();
        let data = spectra::synthesize_noisy(&clean, 0.01, &FringeModel::none(), 11).unwrap();
        let mut start = truth_mixed(16.0);
        start.omega_c += 1.0;
        let r = fit(&FitProblem::mixed_two_transition(data, &start, 18.67, 0.05).unwrap()).unwrap();
        let (g3, g4) = (r.params["g3"], r.params["g4"]);
        assert!((g3 * g3 + g4 * g4 - 18.67f64.powi(2)).abs() < 1e-10);
        assert_eq!(r.ci_method["g3"], CiMethod::Propagated);
        assert!(r.derived.unwrap().strong_coupling);
    }

    #[test]
    fn boundary_p_up_profile_bound() {
        let c = ScanConfig::normalized(WC - 80.0, WC + 80.0, 161, KAPPA).with_background(0.02);
        let clean = spectra::mixed_two_transition_spectrum(&truth_mixed(17.2), 0.0, &c).unwrap();
        let data = spectra::synthesize_noisy(&clean, 0.01, &FringeModel::none(), 5).unwrap();
        let problem =
            FitProblem::mixed_two_transition(data, &truth_mixed(16.5), 18.67, 0.05).unwrap();
        let best = fit(&problem).unwrap();
        let upper = profile_bound(&problem, &best, "p_up", Direction::Up).unwrap();
        assert!(
            upper > best.params["p_up"] && upper < 0.02,
            "upper bound {upper}"
        );
        let grid: Vec<f64> = (0..6)
            .map(|i| best.params["p_up"] + 0.004 * i as f64)
            .collect();
        let prof = goodness_profile(&problem, "p_up", &grid).unwrap();
        assert!(prof.windows(2).all(|w| w[1].1 >= w[0].1), "{prof:?}");
    }

    #[test]
    fn g4_profile_locally_quadratic() {
        let c = ScanConfig::normalized(WC - 80.0, WC + 80.0, 161, KAPPA).with_background(0.02);
        let clean = spectra::mixed_two_transition_spectrum(&truth_mixed(17.2), 0.01, &c).unwrap();
        let data = spectra::synthesize_noisy(&clean, 0.01, &FringeModel::none(), 2).unwrap();
        let problem =
            FitProblem::mixed_two_transition(data, &truth_mixed(16.5), 18.67, 0.05).unwrap();
        let best = fit(&problem).unwrap();
        let g4 = best.params["g4"];
        let h = 0.05;
        let prof = goodness_profile(&problem, "g4", &[g4 - h, g4, g4 + h]).unwrap();
        let cost = |rms: f64| rms * rms;
        let rise_lo = cost(prof[0].1) - cost(prof[1].1);
        let rise_hi = cost(prof[2].1) - cost(prof[1].1);
        assert!(rise_lo > 0.0 && rise_hi > 0.0);
        assert!(
            (rise_lo - rise_hi).abs() < 0.1 * (rise_lo + rise_hi),
            "{rise_lo} vs {rise_hi}"
        );
    }

    #[test]
    fn center_weighting_improves_dip() {
        let c = ScanConfig::normalized(WC - 100.0, WC + 100.0, 201, KAPPA).with_background(0.02);
        let clean = spectra::dit_spectrum(18.67, KAPPA, 1.78, 0.0, WC, &c).unwrap();
        // A fringe bump on the red shoulder only.
        let distorted: Vec<f64> = clean
            .points()
            .iter()
            .map(|p| {
                let x = (p.freq - (WC - 45.0)) / 12.0;
                p.reflectivity * (1.0 + 0.25 * (-x * x).exp())
            })
            .collect();
        let data = clean.with_values(&distorted).unwrap();
        let dip_error = |weighted: bool| {
            let mut p = FitProblem::single_transition(data.clone(), KAPPA).unwrap();
            if !weighted {
                p.center_weight = None;
            }
            let r = fit(&p).unwrap();
            let model = Model::SingleTransition
                .evaluate(&r.params, &data.freqs())
                .unwrap();
            center_indices(&data, &CenterWeight::default())
                .into_iter()
                .map(|i| (model[i] - distorted[i]).powi(2))
                .sum::<f64>()
        };
        let (w, u) = (dip_error(true), dip_error(false));
        assert!(w < u, "weighted {w} vs unweighted {u}");
    }

    #[test]
    fn ci_grows_with_noise() {
        let c = ScanConfig::normalized(WC - 100.0, WC + 100.0, 201, KAPPA).with_background(0.02);
        let clean = spectra::dit_spectrum(18.67, KAPPA, 1.78, 0.0, WC, &c).unwrap();
        let mean_ci = |noise: f64| {
            (0..30)
                .map(|seed| {
                    let d = spectra::synthesize_noisy(&clean, noise, &FringeModel::none(), seed)
                        .unwrap();
                    fit(&FitProblem::single_transition(d, KAPPA).unwrap())
                        .unwrap()
                        .ci95["g"]
                })
                .sum::<f64>()
                / 30.0
        };
        let cis: Vec<f64> = [0.005, 0.01, 0.02].into_iter().map(mean_ci).collect();
        assert!(cis[0] < cis[1] && cis[1] < cis[2], "{cis:?}");
    }

    #[test]
    fn result_json_round_trip_with_infinite_ci() {
        let mut r = fit(&FitProblem::lorentzian(lorentz_data()).unwrap()).unwrap();
        r.ci95.insert("kappa".into(), f64::INFINITY);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"kappa\":null"));
        let back: FitResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    mod identifiability {
        use super::*;
        use proptest::prelude::*;

        fn rel_close(
            fit: &ParamMap,
            truth: &ParamMap,
            names: &[&str],
        ) -> std::result::Result<(), String> {
            for n in names {
                let (a, b) = (fit[*n], truth[*n]);
                let rel = (a - b).abs() / b.abs().max(1.0);
                if rel >= 1e-4 {
                    return Err(format!("{n}: fitted {a}, truth {b}"));
                }
            }
            Ok(())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn lorentzian(kappa in 10.0f64..50.0, shift in -10.0f64..10.0, bg in 0.0f64..0.1) {
                let c = ScanConfig::normalized(WC - 120.0, WC + 120.0, 241, kappa).with_background(bg);
                let data = spectra::lorentzian_spectrum(kappa, WC + shift, &c).unwrap();
                let r = fit(&FitProblem::lorentzian(data).unwrap()).unwrap();
                let mut truth = ParamMap::new();
                truth.insert("kappa".into(), kappa);
                truth.insert("omega_c".into(), WC + shift);
                truth.insert("background".into(), bg);
                prop_assert!(rel_close(&r.params, &truth, &["kappa", "omega_c", "background"]).is_ok());
            }

            #[test]
            fn single_transition(g in 12.0f64..25.0, gamma in 0.5f64..4.0, delta in -3.0f64..3.0) {
                let c = ScanConfig::normalized(WC - 100.0, WC + 100.0, 201, KAPPA).with_background(0.02);
                let data = spectra::dit_spectrum(g, KAPPA, gamma, delta, WC, &c).unwrap();
                let r = fit(&FitProblem::single_transition(data, KAPPA).unwrap()).unwrap();
                let truth: ParamMap = [("g", g), ("gamma", gamma), ("delta", delta), ("omega_c", WC)]
                    .into_iter().map(|(k, v)| (k.to_string(), v)).collect();
                let check = rel_close(&r.params, &truth, &["g", "gamma", "delta", "omega_c"]);
                prop_assert!(check.is_ok(), "{:?}", check);
            }

            #[test]
            fn mixed(g4 in 14.0f64..18.0, gd3 in 1.0f64..4.0, gd4 in 0.5f64..2.5, p_up in 0.05f64..0.6) {
                let mut truth = truth_mixed(g4);
                truth.gamma_d3 = gd3;
                truth.gamma_d4 = gd4;
                let c = ScanConfig::normalized(WC - 80.0, WC + 80.0, 161, KAPPA).with_background(0.02);
                let data = spectra::mixed_two_transition_spectrum(&truth, p_up, &c).unwrap();
                let mut start = truth;
                start.g4 = g4 - 0.5;
                start.gamma_d3 = gd3 + 0.5;
                start.gamma_d4 = gd4 + 0.3;
                let r = fit(&FitProblem::mixed_two_transition(data, &start, 18.67, p_up + 0.05).unwrap()).unwrap();
                let expect = mixed_params_from(&truth, p_up, 1.0, 0.02);
                let check = rel_close(&r.params, &expect, &["g4", "gamma_d3", "gamma_d4", "omega_c", "omega_x", "p_up"]);
                prop_assert!(check.is_ok(), "{:?}", check);
            }
        }
    }
}
