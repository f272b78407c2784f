//! Driven V-scheme master equation on a truncated atom ⊗ Fock space.
//!
//! The basis is `|atom⟩ ⊗ |n⟩` with `atom ∈ {ground, e3, e4}` and
//! `n ∈ 0..fock_dim`, flattened as `atom * fock_dim + n`. Density matrices are
//! vectorized column-major (`vec(AρB) = (Bᵀ ⊗ A) vec(ρ)`), which is nalgebra's
//! native storage order.
//!
//! All matrices are in angular units (rad/ns); inputs are ordinary
//! frequencies in GHz and go through [`angular`] exactly once.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physcalc::angular;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

pub const DEFAULT_FOCK_DIM: usize = 4;
pub const DEFAULT_EMITTER_DECAY: f64 = 0.1;

const ATOM_DIM: usize = 3;
const GROUND: usize = 0;
const E3: usize = 1;
const E4: usize = 2;

const HERMITIAN_TOL: f64 = 1e-10;
const TRACE_TOL: f64 = 1e-10;
const POSITIVITY_TOL: f64 = 1e-8;
const TRUNCATION_POSITIVITY_TOL: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e14;
const RESIDUAL_TOL: f64 = 1e-9;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Cavity-QED rates and frequencies, all as value/2π in GHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Cavity energy decay rate κ.
    pub kappa: f64,
    pub g3: f64,
    pub g4: f64,
    /// Spontaneous emission of σ₃ and σ₄.
    pub gamma3: f64,
    pub gamma4: f64,
    /// Pure dephasing of σ₃ and σ₄.
    pub gamma_d3: f64,
    pub gamma_d4: f64,
    pub omega_c: f64,
    /// σ₃ transition frequency; σ₄ sits at `omega_x - delta_h`.
    pub omega_x: f64,
    pub delta_h: f64,
    /// Coherent probe amplitude ε on the cavity.
    pub drive_amp: f64,
    pub fock_dim: usize,
}

impl SystemParams {
    /// Parameters with the default emitter decay, no dephasing, drive κ/100
    /// and the default Fock cutoff.
    pub fn new(kappa: f64, g3: f64, g4: f64, omega_c: f64, omega_x: f64, delta_h: f64) -> Self {
        Self {
            kappa,
            g3,
            g4,
            gamma3: DEFAULT_EMITTER_DECAY,
            gamma4: DEFAULT_EMITTER_DECAY,
            gamma_d3: 0.0,
            gamma_d4: 0.0,
            omega_c,
            omega_x,
            delta_h,
            drive_amp: kappa / 100.0,
            fock_dim: DEFAULT_FOCK_DIM,
        }
    }

    pub fn with_dephasing(mut self, gamma_d3: f64, gamma_d4: f64) -> Self {
        self.gamma_d3 = gamma_d3;
        self.gamma_d4 = gamma_d4;
        self
    }

    pub fn with_drive(mut self, drive_amp: f64) -> Self {
        self.drive_amp = drive_amp;
        self
    }

    pub fn with_fock_dim(mut self, fock_dim: usize) -> Self {
        self.fock_dim = fock_dim;
        self
    }

    /// Spin-up manifold: the same cavity with both couplings switched off.
    pub fn bare_cavity(&self) -> Self {
        Self {
            g3: 0.0,
            g4: 0.0,
            ..*self
        }
    }

    pub fn sigma4_frequency(&self) -> f64 {
        self.omega_x - self.delta_h
    }

    /// Coherence decay of σ₃ as an ordinary frequency: γ₃/2 + γ_d3.
    pub fn transverse3(&self) -> f64 {
        0.5 * self.gamma3 + self.gamma_d3
    }

    pub fn transverse4(&self) -> f64 {
        0.5 * self.gamma4 + self.gamma_d4
    }

    pub fn dim(&self) -> usize {
        ATOM_DIM * self.fock_dim
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.kappa,
            self.g3,
            self.g4,
            self.gamma3,
            self.gamma4,
            self.gamma_d3,
            self.gamma_d4,
            self.omega_c,
            self.omega_x,
            self.delta_h,
            self.drive_amp,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("system parameters must be finite".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Validation(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        for (name, v) in [
            ("g3", self.g3),
            ("g4", self.g4),
            ("gamma3", self.gamma3),
            ("gamma4", self.gamma4),
            ("gamma_d3", self.gamma_d3),
            ("gamma_d4", self.gamma_d4),
            ("drive_amp", self.drive_amp),
        ] {
            if v < 0.0 {
                return Err(Error::Validation(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.fock_dim < 2 {
            return Err(Error::Validation(format!(
                "fock_dim must be at least 2, got {}",
                self.fock_dim
            )));
        }
        Ok(())
    }

    /// Non-fatal concerns about the parameter set.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.drive_amp > self.kappa / 10.0 {
            out.push(format!(
                "drive_amp {} exceeds kappa/10; linear-response comparisons are unreliable",
                self.drive_amp
            ));
        }
        out
    }
}

/// Sign convention for the σ₃ coupling term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CouplingPhase {
    /// `i g₃ (a σ₃† − σ₃ a†)`, the convention used for fitting.
    #[default]
    Imaginary,
    /// `g₃ (a σ₃† + σ₃ a†)`.
    Real,
}

/// A dense operator on the atom ⊗ Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    fock_dim: usize,
    matrix: CMatrix,
}

impl OperatorMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn fock_dim(&self) -> usize {
        self.fock_dim
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn adjoint(&self) -> Self {
        Self {
            fock_dim: self.fock_dim,
            matrix: self.matrix.adjoint(),
        }
    }
}

pub fn basis_index(atom: usize, n: usize, fock_dim: usize) -> usize {
    atom * fock_dim + n
}

/// Cavity annihilation operator `1 ⊗ a`.
pub fn annihilation(fock_dim: usize) -> OperatorMatrix {
    let dim = ATOM_DIM * fock_dim;
    let mut m = CMatrix::zeros(dim, dim);
    for atom in 0..ATOM_DIM {
        for n in 1..fock_dim {
            m[(
                basis_index(atom, n - 1, fock_dim),
                basis_index(atom, n, fock_dim),
            )] = C64::new((n as f64).sqrt(), 0.0);
        }
    }
    OperatorMatrix {
        fock_dim,
        matrix: m,
    }
}

fn atomic_lowering(excited: usize, fock_dim: usize) -> OperatorMatrix {
    let dim = ATOM_DIM * fock_dim;
    let mut m = CMatrix::zeros(dim, dim);
    for n in 0..fock_dim {
        m[(
            basis_index(GROUND, n, fock_dim),
            basis_index(excited, n, fock_dim),
        )] = ONE;
    }
    OperatorMatrix {
        fock_dim,
        matrix: m,
    }
}

/// `|ground⟩⟨e3| ⊗ 1`.
pub fn sigma3(fock_dim: usize) -> OperatorMatrix {
    atomic_lowering(E3, fock_dim)
}

/// `|ground⟩⟨e4| ⊗ 1`.
pub fn sigma4(fock_dim: usize) -> OperatorMatrix {
    atomic_lowering(E4, fock_dim)
}

/// Rotating-frame Hamiltonian (divided by ħ) at the given probe frequency,
/// including the coherent cavity drive `ε (a + a†)`.
pub fn build_hamiltonian(params: &SystemParams, probe_freq: f64) -> Result<OperatorMatrix> {
    build_hamiltonian_with(params, probe_freq, CouplingPhase::Imaginary)
}

pub fn build_hamiltonian_with(
    params: &SystemParams,
    probe_freq: f64,
    phase: CouplingPhase,
) -> Result<OperatorMatrix> {
    params.validate()?;
    let nf = params.fock_dim;
    let a = annihilation(nf).into_matrix();
    let s3 = sigma3(nf).into_matrix();
    let s4 = sigma4(nf).into_matrix();
    let ad = a.adjoint();
    let s3d = s3.adjoint();
    let s4d = s4.adjoint();

    let re = |x: f64| C64::new(x, 0.0);
    let det_c = angular(params.omega_c - probe_freq);
    let det_3 = angular(params.omega_x - probe_freq);
    let det_4 = angular(params.omega_x - params.delta_h - probe_freq);
    let g3 = angular(params.g3);
    let g4 = angular(params.g4);
    let eps = angular(params.drive_amp);

    let mut h = &ad * &a * re(det_c) + &s3d * &s3 * re(det_3) + &s4d * &s4 * re(det_4);
    h += match phase {
        CouplingPhase::Imaginary => (&a * &s3d - &s3 * &ad) * (I * g3),
        CouplingPhase::Real => (&a * &s3d + &s3 * &ad) * re(g3),
    };
    h += (&a * &s4d + &s4 * &ad) * re(g4);
    h += (&a + &ad) * re(eps);
    Ok(OperatorMatrix {
        fock_dim: nf,
        matrix: h,
    })
}

/// Superoperator acting on column-stacked density matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Liouvillian {
    fock_dim: usize,
    matrix: CMatrix,
}

impl Liouvillian {
    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    /// Hilbert-space dimension (the superoperator is `dim² × dim²`).
    pub fn dim(&self) -> usize {
        ATOM_DIM * self.fock_dim
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let d = self.dim();
        let v = DVector::from_column_slice(rho.as_slice());
        let out = &self.matrix * v;
        CMatrix::from_column_slice(d, d, out.as_slice())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.norm()
    }
}

/// Lindblad dissipator `D(O)` as a superoperator, unscaled.
fn dissipator(op: &CMatrix) -> CMatrix {
    let d = op.nrows();
    let id = CMatrix::identity(d, d);
    let od_o = op.adjoint() * op;
    op.conjugate().kronecker(op)
        - id.kronecker(&od_o) * C64::new(0.5, 0.0)
        - od_o.transpose().kronecker(&id) * C64::new(0.5, 0.0)
}

pub fn build_liouvillian(params: &SystemParams, probe_freq: f64) -> Result<Liouvillian> {
    build_liouvillian_with(params, probe_freq, CouplingPhase::Imaginary)
}

pub fn build_liouvillian_with(
    params: &SystemParams,
    probe_freq: f64,
    phase: CouplingPhase,
) -> Result<Liouvillian> {
    let h = build_hamiltonian_with(params, probe_freq, phase)?.into_matrix();
    let nf = params.fock_dim;
    let d = h.nrows();
    let id = CMatrix::identity(d, d);
    let mut l = (id.kronecker(&h) - h.transpose().kronecker(&id)) * (-I);

    let a = annihilation(nf).into_matrix();
    let s3 = sigma3(nf).into_matrix();
    let s4 = sigma4(nf).into_matrix();
    let n3 = s3.adjoint() * &s3;
    let n4 = s4.adjoint() * &s4;
    let channels = [
        (params.kappa, &a),
        (params.gamma3, &s3),
        (params.gamma4, &s4),
        (2.0 * params.gamma_d3, &n3),
        (2.0 * params.gamma_d4, &n4),
    ];
    for (rate, op) in channels {
        if rate > 0.0 {
            l += dissipator(op) * C64::new(angular(rate), 0.0);
        }
    }
    Ok(Liouvillian {
        fock_dim: nf,
        matrix: l,
    })
}

/// A validated density matrix on the atom ⊗ Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    fock_dim: usize,
    matrix: CMatrix,
}

/// Largest elementwise deviation `max |ρ − ρ†|`.
pub fn hermiticity_error(m: &CMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn min_eigenvalue(m: &CMatrix) -> f64 {
    let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
    herm.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

impl DensityMatrix {
    pub fn new(matrix: CMatrix, fock_dim: usize) -> Result<Self> {
        let dim = ATOM_DIM * fock_dim;
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::Shape(format!(
                "density matrix must be {dim}x{dim}, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let herm = hermiticity_error(&matrix);
        if herm > HERMITIAN_TOL {
            return Err(Error::State(format!(
                "density matrix not Hermitian (error {herm:e})"
            )));
        }
        let tr = matrix.trace();
        if (tr - ONE).norm() > TRACE_TOL {
            return Err(Error::State(format!(
                "density matrix trace is {tr}, expected 1"
            )));
        }
        let min_eig = min_eigenvalue(&matrix);
        if min_eig < -POSITIVITY_TOL {
            return Err(Error::State(format!(
                "density matrix has negative eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { fock_dim, matrix })
    }

    /// `|atom, n⟩⟨atom, n|`.
    pub fn pure_basis_state(atom: usize, n: usize, fock_dim: usize) -> Result<Self> {
        if atom >= ATOM_DIM || n >= fock_dim {
            return Err(Error::Shape(format!(
                "basis state ({atom}, {n}) out of range"
            )));
        }
        let dim = ATOM_DIM * fock_dim;
        let mut m = CMatrix::zeros(dim, dim);
        let k = basis_index(atom, n, fock_dim);
        m[(k, k)] = ONE;
        Self::new(m, fock_dim)
    }

    pub fn vacuum(fock_dim: usize) -> Self {
        Self::pure_basis_state(GROUND, 0, fock_dim).expect("vacuum is a valid state")
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn fock_dim(&self) -> usize {
        self.fock_dim
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.matrix)
    }

    pub fn hermiticity_error(&self) -> f64 {
        hermiticity_error(&self.matrix)
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    /// Populations of (ground, e3, e4) summed over photon number.
    pub fn atomic_populations(&self) -> [f64; 3] {
        let nf = self.fock_dim;
        let mut p = [0.0; 3];
        for (atom, slot) in p.iter_mut().enumerate() {
            for n in 0..nf {
                let k = basis_index(atom, n, nf);
                *slot += self.matrix[(k, k)].re;
            }
        }
        p
    }

    /// Largest elementwise difference to another state.
    pub fn max_abs_diff(&self, other: &DensityMatrix) -> f64 {
        (&self.matrix - &other.matrix)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// `Tr(ρ a†a)`.
pub fn expectation_photon_number(rho: &DensityMatrix) -> Result<f64> {
    let nf = rho.fock_dim;
    let m = &rho.matrix;
    if hermiticity_error(m) > HERMITIAN_TOL || (m.trace() - ONE).norm() > TRACE_TOL {
        return Err(Error::State(
            "photon number of an invalid density matrix".into(),
        ));
    }
    let mut total = ZERO;
    for atom in 0..ATOM_DIM {
        for n in 1..nf {
            let k = basis_index(atom, n, nf);
            total += m[(k, k)] * n as f64;
        }
    }
    if total.im.abs() > 1e-10 {
        return Err(Error::State(format!(
            "photon number has imaginary part {:e}",
            total.im
        )));
    }
    Ok(total.re.max(0.0))
}

/// Coherent cavity amplitude `Tr(ρ a)`.
pub fn expectation_field(rho: &DensityMatrix) -> C64 {
    let nf = rho.fock_dim;
    let m = &rho.matrix;
    let mut total = ZERO;
    for atom in 0..ATOM_DIM {
        for n in 1..nf {
            // Tr(ρ a) = Σ √n ρ[(n), (n-1)].
            total +=
                m[(basis_index(atom, n, nf), basis_index(atom, n - 1, nf))] * (n as f64).sqrt();
        }
    }
    total
}

/// Steady state with the printed (imaginary) σ₃ coupling phase.
pub fn steady_state(params: &SystemParams, probe_freq: f64) -> Result<DensityMatrix> {
    steady_state_with(params, probe_freq, CouplingPhase::Imaginary)
}

pub fn steady_state_with(
    params: &SystemParams,
    probe_freq: f64,
    phase: CouplingPhase,
) -> Result<DensityMatrix> {
    let l = build_liouvillian_with(params, probe_freq, phase)?;
    steady_state_of(&l)
}

fn norm1(m: &CMatrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Hager–Higham estimate of `‖A⁻¹‖₁` from an LU factorization, using a few
/// solves with `A` and `Aᴴ` instead of forming the inverse.
fn inverse_norm1_estimate(
    lu: &nalgebra::LU<C64, nalgebra::Dyn, nalgebra::Dyn>,
    l: &CMatrix,
    u: &CMatrix,
) -> f64 {
    let n = l.nrows();
    let solve = |x: &DVector<C64>| lu.solve(x);
    // Aᴴ y = c with P A = L U: solve Uᴴ z = c, Lᴴ w = z, then y = P⁻¹ w.
    let solve_adjoint = |c: &DVector<C64>| -> Option<DVector<C64>> {
        let z = u.adjoint().solve_lower_triangular(c)?;
        let mut w = l.adjoint().solve_upper_triangular(&z)?;
        lu.p().inv_permute_rows(&mut w);
        Some(w)
    };
    let sign = |y: &DVector<C64>| y.map(|v| if v.norm() == 0.0 { ONE } else { v / v.norm() });
    let mut x = DVector::from_element(n, C64::new(1.0 / n as f64, 0.0));
    let mut estimate = 0.0;
    let mut last_j = usize::MAX;
    for iter in 0..5 {
        let Some(y) = solve(&x) else {
            return f64::INFINITY;
        };
        let new_estimate = y.iter().map(|v| v.norm()).sum::<f64>();
        if iter > 0 && new_estimate <= estimate {
            break;
        }
        estimate = new_estimate;
        let Some(z) = solve_adjoint(&sign(&y)) else {
            return f64::INFINITY;
        };
        let (j, zmax) = z
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.norm()))
            .fold((0, 0.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        if j == last_j || (iter > 0 && zmax <= z.dotc(&x).re) {
            break;
        }
        last_j = j;
        x = DVector::zeros(n);
        x[j] = ONE;
    }
    // Higham's alternating test vector guards against the rare failures of
    // the power iteration above.
    let alt = DVector::from_fn(n, |i, _| {
        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
        C64::new(s * (1.0 + i as f64 / (n.max(2) - 1) as f64), 0.0)
    });
    if let Some(y) = solve(&alt) {
        let alt_estimate = 2.0 * y.iter().map(|v| v.norm()).sum::<f64>() / (3.0 * n as f64);
        estimate = estimate.max(alt_estimate);
    }
    estimate
}

/// Solves `L vec(ρ) = 0` with the first row replaced by `Tr ρ = 1`.
pub fn steady_state_of(l: &Liouvillian) -> Result<DensityMatrix> {
    let d = l.dim();
    let n = d * d;
    let mut a = l.matrix.clone();
    for k in 0..n {
        a[(0, k)] = ZERO;
    }
    for i in 0..d {
        a[(0, i * d + i)] = ONE;
    }
    let mut b = DVector::<C64>::zeros(n);
    b[0] = ONE;

    let lu = a.clone().lu();
    let (lower, upper) = (lu.l(), lu.u());
    if upper.diagonal().iter().any(|v| v.norm() == 0.0) {
        return Err(Error::Numerical {
            message: "steady-state system is singular".into(),
            condition: Some(f64::INFINITY),
        });
    }
    let condition = norm1(&a) * inverse_norm1_estimate(&lu, &lower, &upper);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Numerical {
            message: format!("steady-state system is ill-conditioned (condition {condition:e})"),
            condition: Some(condition),
        });
    }
    let x = lu
        .solve(&b)
        .ok_or_else(|| Error::numerical("LU solve failed"))?;
    let rho = CMatrix::from_column_slice(d, d, x.as_slice());
    let rho = (&rho + rho.adjoint()) * C64::new(0.5, 0.0);
    let rho = &rho / rho.trace();

    let residual = (&l.matrix * DVector::from_column_slice(rho.as_slice())).norm();
    if residual > RESIDUAL_TOL * l.frobenius_norm() {
        return Err(Error::Numerical {
            message: format!("steady-state residual {residual:e} too large"),
            condition: Some(condition),
        });
    }
    let min_eig = min_eigenvalue(&rho);
    if min_eig < -TRUNCATION_POSITIVITY_TOL {
        return Err(Error::Model(format!(
            "steady state has eigenvalue {min_eig:e}; increase fock_dim"
        )));
    }
    DensityMatrix::new(rho, l.fock_dim)
}

/// Steady-state intracavity photon number at one probe frequency.
pub fn steady_state_photon_number(params: &SystemParams, probe_freq: f64) -> Result<f64> {
    expectation_photon_number(&steady_state(params, probe_freq)?)
}

/// Photon numbers at `fock_dim` and `fock_dim + 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FockConvergence {
    pub photon_number: f64,
    pub photon_number_enlarged: f64,
    pub relative_change: f64,
}

impl FockConvergence {
    pub const TOLERANCE: f64 = 1e-3;

    pub fn converged(&self) -> bool {
        self.relative_change < Self::TOLERANCE
    }
}

pub fn check_fock_convergence(params: &SystemParams, probe_freq: f64) -> Result<FockConvergence> {
    let n0 = steady_state_photon_number(params, probe_freq)?;
    let bigger = params.with_fock_dim(params.fock_dim + 2);
    let n1 = steady_state_photon_number(&bigger, probe_freq)?;
    let scale = n0.abs().max(n1.abs());
    let relative_change = if scale == 0.0 {
        0.0
    } else {
        (n1 - n0).abs() / scale
    };
    Ok(FockConvergence {
        photon_number: n0,
        photon_number_enlarged: n1,
        relative_change,
    })
}

/// Tolerances for [`time_evolve_from`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorTolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for IntegratorTolerance {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-13,
        }
    }
}

/// Integrates the master equation from the vacuum to `t_final` (ns).
///
/// This is an explicit adaptive Runge–Kutta oracle for [`steady_state`] and
/// shares nothing with it beyond the Liouvillian.
pub fn time_evolve_oracle(
    params: &SystemParams,
    probe_freq: f64,
    t_final: f64,
) -> Result<DensityMatrix> {
    let rho0 = DensityMatrix::vacuum(params.fock_dim);
    time_evolve_from(
        params,
        probe_freq,
        &rho0,
        t_final,
        IntegratorTolerance::default(),
    )
}

pub fn time_evolve_from(
    params: &SystemParams,
    probe_freq: f64,
    rho0: &DensityMatrix,
    t_final: f64,
    tol: IntegratorTolerance,
) -> Result<DensityMatrix> {
    params.validate()?;
    if rho0.fock_dim != params.fock_dim {
        return Err(Error::Shape(
            "initial state has the wrong Fock dimension".into(),
        ));
    }
    let min_t = 20.0 / params.kappa;
    if !(t_final >= min_t) {
        return Err(Error::Domain(format!(
            "t_final {t_final} ns is shorter than 20/kappa = {min_t} ns"
        )));
    }
    let l = build_liouvillian(params, probe_freq)?;
    let sparse = SparseOperator::from_dense(&l.matrix);
    let y0 = DVector::from_column_slice(rho0.matrix.as_slice());
    let y = dormand_prince(&sparse, y0, t_final, tol)?;
    let d = l.dim();
    let rho = CMatrix::from_column_slice(d, d, y.as_slice());
    let rho = (&rho + rho.adjoint()) * C64::new(0.5, 0.0);
    DensityMatrix::new(rho, params.fock_dim)
}

/// Row-compressed copy of a dense matrix for fast repeated products.
struct SparseOperator {
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOperator {
    fn from_dense(m: &CMatrix) -> Self {
        let mut row_start = Vec::with_capacity(m.nrows() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..m.nrows() {
            row_start.push(cols.len());
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != ZERO {
                    cols.push(j);
                    vals.push(v);
                }
            }
        }
        row_start.push(cols.len());
        Self {
            row_start,
            cols,
            vals,
        }
    }

    fn apply(&self, x: &DVector<C64>, out: &mut DVector<C64>) {
        for i in 0..self.row_start.len() - 1 {
            let mut acc = ZERO;
            for k in self.row_start[i]..self.row_start[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            out[i] = acc;
        }
    }
}

/// Dormand–Prince 5(4) with the standard step-size controller.
fn dormand_prince(
    op: &SparseOperator,
    mut y: DVector<C64>,
    t_final: f64,
    tol: IntegratorTolerance,
) -> Result<DVector<C64>> {
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    // Fifth-order weights equal the last row of A; these are the
    // differences to the embedded fourth-order weights.
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];

    let n = y.len();
    let mut k: Vec<DVector<C64>> = (0..7).map(|_| DVector::zeros(n)).collect();
    let mut stage = DVector::<C64>::zeros(n);
    op.apply(&y, &mut k[0]);

    let mut t = 0.0;
    let mut h = 1e-3 * t_final;
    let h_min = 1e-14 * t_final;
    let mut steps = 0usize;
    while t < t_final {
        if h < h_min {
            return Err(Error::numerical(format!("step size underflow at t = {t}")));
        }
        steps += 1;
        if steps > 50_000_000 {
            return Err(Error::numerical("integrator step budget exhausted"));
        }
        let h_step = h.min(t_final - t);
        for s in 1..7 {
            stage.copy_from(&y);
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    stage.axpy(C64::new(h_step * a, 0.0), kj, ONE);
                }
            }
            op.apply(&stage, &mut k[s]);
        }
        // stage now holds the fifth-order solution (row 6 of A is b).
        let mut err_sq = 0.0;
        for i in 0..n {
            let mut e = ZERO;
            for (j, kj) in k.iter().enumerate() {
                if E[j] != 0.0 {
                    e += kj[i] * E[j];
                }
            }
            let e = e * h_step;
            let scale = tol.atol + tol.rtol * y[i].norm().max(stage[i].norm());
            err_sq += (e.norm() / scale).powi(2);
        }
        let err = (err_sq / n as f64).sqrt();
        if err <= 1.0 {
            t += h_step;
            y.copy_from(&stage);
            let last = k[6].clone();
            k[0].copy_from(&last);
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = h_step * factor;
    }
    Ok(y)
}
