//! Python bindings for the `qdcavity` core crate.
//!
//! Spectra come back as `(freqs, values)` lists; fit results as plain dicts
//! with the same keys as the JSON fit report.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use qdcavity::spectra::{self, ScanConfig, Spectrum};
use qdcavity::{hilbert, physcalc, Error, FitProblem};

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Cavity-QED parameters, rates as value/2π in GHz.
#[pyclass(name = "SystemParams", frozen, from_py_object)]
#[derive(Clone)]
struct PySystemParams {
    inner: hilbert::SystemParams,
}

#[pymethods]
impl PySystemParams {
    #[new]
    #[pyo3(signature = (kappa, g3, g4, omega_c, omega_x, delta_h, gamma3=0.1, gamma4=0.1, gamma_d3=0.0, gamma_d4=0.0, drive_amp=None, fock_dim=4))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kappa: f64,
        g3: f64,
        g4: f64,
        omega_c: f64,
        omega_x: f64,
        delta_h: f64,
        gamma3: f64,
        gamma4: f64,
        gamma_d3: f64,
        gamma_d4: f64,
        drive_amp: Option<f64>,
        fock_dim: usize,
    ) -> PyResult<Self> {
        let mut p = hilbert::SystemParams::new(kappa, g3, g4, omega_c, omega_x, delta_h)
            .with_dephasing(gamma_d3, gamma_d4)
            .with_fock_dim(fock_dim);
        p.gamma3 = gamma3;
        p.gamma4 = gamma4;
        if let Some(eps) = drive_amp {
            p = p.with_drive(eps);
        }
        p.validate().map_err(to_py)?;
        Ok(Self { inner: p })
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa
    }

    #[getter]
    fn g3(&self) -> f64 {
        self.inner.g3
    }

    #[getter]
    fn g4(&self) -> f64 {
        self.inner.g4
    }

    #[getter]
    fn omega_c(&self) -> f64 {
        self.inner.omega_c
    }

    #[getter]
    fn sigma4_frequency(&self) -> f64 {
        self.inner.sigma4_frequency()
    }

    fn warnings(&self) -> Vec<String> {
        self.inner.warnings()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

type Pair = (Vec<f64>, Vec<f64>);

fn pair(s: &Spectrum) -> Pair {
    (s.freqs(), s.values())
}

fn scan(start: f64, stop: f64, n: usize, kappa: f64, background: f64) -> ScanConfig {
    ScanConfig::normalized(start, stop, n, kappa).with_background(background)
}

#[pyfunction]
#[pyo3(signature = (kappa, omega_c, start, stop, n, background=0.0))]
fn lorentzian_spectrum(
    kappa: f64,
    omega_c: f64,
    start: f64,
    stop: f64,
    n: usize,
    background: f64,
) -> PyResult<Pair> {
    let s = spectra::lorentzian_spectrum(kappa, omega_c, &scan(start, stop, n, kappa, background))
        .map_err(to_py)?;
    Ok(pair(&s))
}

#[pyfunction]
#[pyo3(signature = (params, start, stop, n, background=0.0))]
fn two_transition_spectrum(
    params: &PySystemParams,
    start: f64,
    stop: f64,
    n: usize,
    background: f64,
) -> PyResult<Pair> {
    let p = &params.inner;
    let s = spectra::two_transition_spectrum(p, &scan(start, stop, n, p.kappa, background))
        .map_err(to_py)?;
    Ok(pair(&s))
}

#[pyfunction]
#[pyo3(signature = (params, p_up, start, stop, n, background=0.0))]
fn mixed_spectrum(
    params: &PySystemParams,
    p_up: f64,
    start: f64,
    stop: f64,
    n: usize,
    background: f64,
) -> PyResult<Pair> {
    let p = &params.inner;
    let s =
        spectra::mixed_two_transition_spectrum(p, p_up, &scan(start, stop, n, p.kappa, background))
            .map_err(to_py)?;
    Ok(pair(&s))
}

/// Steady-state ⟨a†a⟩ spectrum, normalized like the closed form.
#[pyfunction]
#[pyo3(signature = (params, start, stop, n, background=0.0))]
fn master_spectrum(
    py: Python<'_>,
    params: &PySystemParams,
    start: f64,
    stop: f64,
    n: usize,
    background: f64,
) -> PyResult<Pair> {
    let p = params.inner;
    let cfg = scan(start, stop, n, p.kappa, background);
    let s = py
        .detach(|| spectra::master_spectrum(&p, &cfg))
        .map_err(to_py)?;
    Ok(pair(&s))
}

#[pyfunction]
fn steady_state_photon_number(params: &PySystemParams, probe_freq: f64) -> PyResult<f64> {
    hilbert::steady_state_photon_number(&params.inner, probe_freq).map_err(to_py)
}

/// Fits `model` ("lorentzian", "single" or "mixed") to the data. "single"
/// takes κ from `params`; "mixed" starts from `params` and needs `g_total`.
#[pyfunction]
#[pyo3(signature = (freqs, values, model, params=None, g_total=None, p_up=0.05, weights=None))]
#[allow(clippy::too_many_arguments)]
fn fit_spectrum<'py>(
    py: Python<'py>,
    freqs: Vec<f64>,
    values: Vec<f64>,
    model: &str,
    params: Option<PySystemParams>,
    g_total: Option<f64>,
    p_up: f64,
    weights: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut data = Spectrum::from_values(&freqs, &values).map_err(to_py)?;
    if let Some(w) = weights {
        data = data.with_weights(&w).map_err(to_py)?;
    }
    let need_params = || {
        params
            .as_ref()
            .map(|p| p.inner)
            .ok_or_else(|| PyValueError::new_err(format!("model {model} needs params")))
    };
    let problem = match model {
        "lorentzian" => FitProblem::lorentzian(data),
        "single" => FitProblem::single_transition(data, need_params()?.kappa),
        "mixed" => {
            let g = g_total.ok_or_else(|| PyValueError::new_err("model mixed needs g_total"))?;
            FitProblem::mixed_two_transition(data, &need_params()?, g, p_up)
        }
        other => return Err(PyValueError::new_err(format!("unknown model {other}"))),
    }
    .map_err(to_py)?;
    let result = py.detach(|| qdcavity::fit(&problem)).map_err(to_py)?;
    let text =
        serde_json::to_string(&result).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn lande_g_factor(splitting_ghz: f64, field_t: f64) -> PyResult<f64> {
    physcalc::lande_g_factor(splitting_ghz, field_t).map_err(to_py)
}

#[pyfunction]
fn splitting_nm_to_ghz(delta_lambda_nm: f64, center_lambda_nm: f64) -> PyResult<f64> {
    physcalc::splitting_nm_to_ghz(delta_lambda_nm, center_lambda_nm).map_err(to_py)
}

#[pyfunction]
fn thermal_spin_up_population(delta_e_mev: f64, temperature_k: f64) -> PyResult<f64> {
    physcalc::thermal_spin_up_population(delta_e_mev, temperature_k).map_err(to_py)
}

#[pyfunction]
fn cooperativity(g: f64, kappa: f64, gamma: f64) -> PyResult<f64> {
    physcalc::cooperativity(g, kappa, gamma).map_err(to_py)
}

#[pyfunction]
fn is_strongly_coupled(g: f64, kappa: f64, gamma: f64) -> bool {
    physcalc::is_strongly_coupled(g, kappa, gamma)
}

#[pymodule]
fn pyqdcavity(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySystemParams>()?;
    m.add_function(wrap_pyfunction!(lorentzian_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(two_transition_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(mixed_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(master_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(steady_state_photon_number, m)?)?;
    m.add_function(wrap_pyfunction!(fit_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(lande_g_factor, m)?)?;
    m.add_function(wrap_pyfunction!(splitting_nm_to_ghz, m)?)?;
    m.add_function(wrap_pyfunction!(thermal_spin_up_population, m)?)?;
    m.add_function(wrap_pyfunction!(cooperativity, m)?)?;
    m.add_function(wrap_pyfunction!(is_strongly_coupled, m)?)?;
    Ok(())
}
