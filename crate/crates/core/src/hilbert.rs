//! Finite-dimensional states, Hermitian operators and density matrices.
//!
//! Everything here is dense and small (dimension up to a few hundred). Types are
//! immutable once built, so they can be shared freely between trajectory workers.

use nalgebra::DMatrix;
use num_complex::Complex;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);

const STATE_NORM_TOL: f64 = 1e-10;
const OPERATOR_HERMITICITY_TOL: f64 = 1e-12;
const EXPECTATION_IMAG_TOL: f64 = 1e-9;

/// Tolerances used when validating a [`DensityMatrix`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityTolerance {
    pub hermiticity: f64,
    pub trace: f64,
    pub positivity: f64,
}

impl DensityTolerance {
    pub const STRICT: Self = Self {
        hermiticity: 1e-10,
        trace: 1e-8,
        positivity: 1e-8,
    };
    /// Widened bounds for integrator output.
    pub const INTEGRATED: Self = Self {
        hermiticity: 1e-7,
        trace: 1e-7,
        positivity: 1e-7,
    };
    /// Bounds for Monte-Carlo ensemble means.
    pub const ENSEMBLE: Self = Self {
        hermiticity: 1e-6,
        trace: 1e-6,
        positivity: 1e-6,
    };
}

/// A unit-norm pure state over a finite basis.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    amps: Vec<C64>,
}

impl QuantumState {
    /// Normalizes `amps` and wraps it. Fails on zero or non-finite input or dim < 2.
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        if amps.len() < 2 {
            return Err(Error::Model(format!(
                "state dimension must be at least 2, got {}",
                amps.len()
            )));
        }
        if amps.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::Domain("state has non-finite amplitudes".into()));
        }
        let norm = norm(&amps);
        if norm == 0.0 {
            return Err(Error::Domain("cannot normalize the zero vector".into()));
        }
        let amps = amps.into_iter().map(|a| a / norm).collect();
        Ok(Self { amps })
    }

    pub fn from_real(amps: &[f64]) -> Result<Self> {
        Self::new(amps.iter().map(|&a| C64::new(a, 0.0)).collect())
    }

    /// The computational basis vector `|index⟩`.
    pub fn basis(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::Model(format!(
                "basis index {index} out of range for dimension {dim}"
            )));
        }
        let mut amps = vec![ZERO; dim];
        amps[index] = C64::new(1.0, 0.0);
        Self::new(amps)
    }

    /// Wraps amplitudes that the caller has already normalized.
    pub(crate) fn from_normalized(amps: Vec<C64>) -> Self {
        debug_assert!((norm(&amps) - 1.0).abs() < STATE_NORM_TOL);
        Self { amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm(&self) -> f64 {
        norm(&self.amps)
    }

    /// `⟨self|other⟩`
    pub fn inner(&self, other: &QuantumState) -> C64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn projector(&self) -> DensityMatrix {
        let n = self.dim();
        let m = DMatrix::from_fn(n, n, |i, j| self.amps[i] * self.amps[j].conj());
        DensityMatrix { m }
    }
}

pub(crate) fn norm(v: &[C64]) -> f64 {
    v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
}

/// A dense Hermitian matrix.
///
/// A row-major copy is kept for the trajectory hot loops, and operators that are
/// exactly diagonal are flagged so they can be applied elementwise.
#[derive(Debug, Clone)]
pub struct HermitianOperator {
    m: DMatrix<C64>,
    rows: Vec<C64>,
    diag: Option<Vec<f64>>,
}

impl HermitianOperator {
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Model(format!(
                "operator must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        if n == 0 {
            return Err(Error::Model("operator must be non-empty".into()));
        }
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (m[(i, j)], m[(j, i)].conj());
                if !a.re.is_finite() || !a.im.is_finite() {
                    return Err(Error::Domain(format!("operator entry ({i},{j}) is not finite")));
                }
                if (a - b).norm() > OPERATOR_HERMITICITY_TOL {
                    return Err(Error::Domain(format!(
                        "operator is not Hermitian: entry ({i},{j}) = {a} vs conj of ({j},{i}) = {b}"
                    )));
                }
            }
        }
        // Snap to exact hermiticity.
        let m = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(m[(i, i)].re, 0.0)
            } else {
                (m[(i, j)] + m[(j, i)].conj()) * 0.5
            }
        });
        Ok(Self::from_exact(m))
    }

    fn from_exact(m: DMatrix<C64>) -> Self {
        let n = m.nrows();
        let mut rows = Vec::with_capacity(n * n);
        let mut is_diag = true;
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if i != j && v != ZERO {
                    is_diag = false;
                }
                rows.push(v);
            }
        }
        let diag = is_diag.then(|| (0..n).map(|i| m[(i, i)].re).collect());
        Self { m, rows, diag }
    }

    pub fn from_diagonal(values: &[f64]) -> Result<Self> {
        let n = values.len();
        Self::new(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(values[i], 0.0)
            } else {
                ZERO
            }
        }))
    }

    /// Builds an operator from a row-major real matrix.
    pub fn from_real_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Model("operator rows must all have length equal to the row count".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| C64::new(rows[i][j], 0.0)))
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_exact(DMatrix::from_element(dim, dim, ZERO))
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_exact(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    /// Diagonal entries when the operator is exactly diagonal.
    pub fn diagonal(&self) -> Option<&[f64]> {
        self.diag.as_deref()
    }

    pub fn is_zero(&self) -> bool {
        self.rows.iter().all(|&v| v == ZERO)
    }

    pub fn scale(&self, a: f64) -> Self {
        Self::from_exact(self.m.map(|v| v * a))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::dim("operator sum", self.dim(), other.dim()));
        }
        Ok(Self::from_exact(&self.m + &other.m))
    }

    /// `self²`, Hermitian by construction.
    pub fn square(&self) -> Self {
        let sq = &self.m * &self.m;
        let n = self.dim();
        Self::from_exact(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(sq[(i, i)].re, 0.0)
            } else {
                (sq[(i, j)] + sq[(j, i)].conj()) * 0.5
            }
        }))
    }

    /// Frobenius norm of `[self, other]`.
    pub fn commutator_norm(&self, other: &Self) -> f64 {
        let c = &self.m * &other.m - &other.m * &self.m;
        c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Eigenvalues in ascending order together with matching orthonormal eigenvectors (columns).
    pub fn eigen(&self) -> (Vec<f64>, DMatrix<C64>) {
        if let Some(d) = &self.diag {
            let mut order: Vec<usize> = (0..d.len()).collect();
            order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
            let n = d.len();
            let mut vecs = DMatrix::from_element(n, n, ZERO);
            for (col, &i) in order.iter().enumerate() {
                vecs[(i, col)] = C64::new(1.0, 0.0);
            }
            return (order.iter().map(|&i| d[i]).collect(), vecs);
        }
        hermitian_eigen(&self.m)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.eigen().0
    }

    /// `out = self · v`
    #[inline]
    pub(crate) fn apply(&self, v: &[C64], out: &mut [C64]) {
        let n = v.len();
        if let Some(d) = &self.diag {
            for ((o, x), l) in out.iter_mut().zip(v).zip(d) {
                *o = x * *l;
            }
            return;
        }
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.rows[i * n..(i + 1) * n];
            let mut acc = ZERO;
            for (a, x) in row.iter().zip(v) {
                acc += a * x;
            }
            *o = acc;
        }
    }
}

pub(crate) fn hermitian_eigen(m: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vecs)
}

pub(crate) fn hermitian_eigenvalues(m: &DMatrix<C64>) -> Vec<f64> {
    if m.nrows() == 2 {
        // Closed form; this path runs millions of times in the bootstrap.
        let a = m[(0, 0)].re;
        let d = m[(1, 1)].re;
        let b = m[(0, 1)];
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
        return vec![mid - rad, mid + rad];
    }
    let mut v: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// A density matrix: Hermitian, unit trace and positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        Self::with_tolerance(m, DensityTolerance::STRICT)
    }

    pub fn with_tolerance(m: DMatrix<C64>, tol: DensityTolerance) -> Result<Self> {
        let rho = Self { m };
        rho.check(tol)?;
        Ok(rho)
    }

    pub(crate) fn from_matrix_unchecked(m: DMatrix<C64>) -> Self {
        Self { m }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim) * C64::new(1.0 / dim as f64, 0.0),
        }
    }

    /// Verifies the density-matrix invariants at the given tolerance.
    pub fn check(&self, tol: DensityTolerance) -> Result<()> {
        let n = self.m.nrows();
        if n != self.m.ncols() || n < 2 {
            return Err(Error::Model(format!(
                "density matrix must be square with dim >= 2, got {}x{}",
                n,
                self.m.ncols()
            )));
        }
        let herm = max_antihermitian(&self.m);
        if !(herm <= tol.hermiticity) {
            return Err(Error::Domain(format!(
                "density matrix not Hermitian (deviation {herm:e})"
            )));
        }
        let tr = self.trace();
        if !((tr - 1.0).abs() <= tol.trace) {
            return Err(Error::Domain(format!("density matrix trace is {tr}, expected 1")));
        }
        let min_eig = self.min_eigenvalue();
        if min_eig < -tol.positivity {
            return Err(Error::Domain(format!(
                "density matrix not positive: smallest eigenvalue {min_eig:e}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.m[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.m.diagonal().iter().map(|v| v.re).sum()
    }

    pub fn purity(&self) -> f64 {
        self.m.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&hermitian_part(&self.m))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// `Tr(ρ L)`
    pub fn expectation(&self, op: &HermitianOperator) -> Result<f64> {
        if op.dim() != self.dim() {
            return Err(Error::dim("expectation", self.dim(), op.dim()));
        }
        let n = self.dim();
        let mut acc = ZERO;
        for i in 0..n {
            for j in 0..n {
                acc += self.m[(i, j)] * op.m[(j, i)];
            }
        }
        Ok(acc.re)
    }
}

fn max_antihermitian(m: &DMatrix<C64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn hermitian_part(m: &DMatrix<C64>) -> DMatrix<C64> {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// `⟨ψ|L|ψ⟩`
pub fn expectation(state: &QuantumState, op: &HermitianOperator) -> Result<f64> {
    if state.dim() != op.dim() {
        return Err(Error::dim("expectation", op.dim(), state.dim()));
    }
    let mut buf = vec![ZERO; state.dim()];
    op.apply(state.amplitudes(), &mut buf);
    let v: C64 = state
        .amplitudes()
        .iter()
        .zip(&buf)
        .map(|(a, b)| a.conj() * b)
        .sum();
    if v.im.abs() >= EXPECTATION_IMAG_TOL {
        return Err(Error::Internal(format!(
            "expectation of Hermitian operator has imaginary part {}",
            v.im
        )));
    }
    Ok(v.re)
}

/// `⟨L²⟩ − ⟨L⟩²`, clamped at zero.
pub fn variance(state: &QuantumState, op: &HermitianOperator) -> Result<f64> {
    if state.dim() != op.dim() {
        return Err(Error::dim("variance", op.dim(), state.dim()));
    }
    let mut buf = vec![ZERO; state.dim()];
    op.apply(state.amplitudes(), &mut buf);
    let mean: f64 = state
        .amplitudes()
        .iter()
        .zip(&buf)
        .map(|(a, b)| (a.conj() * b).re)
        .sum();
    let second: f64 = buf.iter().map(|b| b.norm_sqr()).sum();
    let var = second - mean * mean;
    debug_assert!(var >= -1e-10, "negative variance {var}");
    Ok(var.max(0.0))
}

/// Half the trace norm of `a − b`.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("trace distance", a.dim(), b.dim()));
    }
    Ok(half_trace_norm(&(&a.m - &b.m)))
}

/// `½ Σ |eigenvalues|` of a (near-)Hermitian matrix.
pub(crate) fn half_trace_norm(diff: &DMatrix<C64>) -> f64 {
    0.5 * hermitian_eigenvalues(&hermitian_part(diff))
        .iter()
        .map(|e| e.abs())
        .sum::<f64>()
}

/// `Σ w_i |ψ_i⟩⟨ψ_i|`
pub fn mix(states: &[QuantumState], weights: &[f64]) -> Result<DensityMatrix> {
    if states.is_empty() || states.len() != weights.len() {
        return Err(Error::Model(format!(
            "mix needs one weight per state, got {} states and {} weights",
            states.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain(format!("mixture weight {w} is negative or not finite")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("mixture weights sum to {total}, expected 1")));
    }
    let n = states[0].dim();
    let mut m = DMatrix::from_element(n, n, ZERO);
    for (s, &w) in states.iter().zip(weights) {
        if s.dim() != n {
            return Err(Error::dim("mix", n, s.dim()));
        }
        let a = s.amplitudes();
        for j in 0..n {
            for i in 0..n {
                m[(i, j)] += a[i] * a[j].conj() * w;
            }
        }
    }
    DensityMatrix::new(m)
}

/// Off-diagonal decay rates `(coupling/2)(l_i − l_j)²` of pure dephasing in the eigenbasis of `op`.
///
/// Row/column `i` refers to the i-th eigenvalue in ascending order.
pub fn dephasing_rates(op: &HermitianOperator, coupling: f64) -> Result<Vec<Vec<f64>>> {
    if !(coupling >= 0.0) || !coupling.is_finite() {
        return Err(Error::Domain(format!("coupling must be >= 0, got {coupling}")));
    }
    let l = op.eigenvalues();
    Ok(l.iter()
        .map(|a| l.iter().map(|b| 0.5 * coupling * (a - b) * (a - b)).collect())
        .collect())
}
