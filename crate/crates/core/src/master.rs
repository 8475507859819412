//! Deterministic RK4 integration of the dephasing master equation
//!
//! ```text
//! dρ/dt = −i[H, ρ] − Σ_k (λ_k/2) [L_k, [L_k, ρ]]
//! ```
//!
//! This is the reference every stochastic ensemble is compared against.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hilbert::{DensityMatrix, DensityTolerance, HermitianOperator, C64, ZERO};
use crate::model::MonitoringModel;
use crate::sse::sample_steps;

const TRACE_DRIFT_TOL: f64 = 1e-9;
const POSITIVITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct MESolution {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
}

impl MESolution {
    /// The stored state whose time is closest to `t`.
    pub fn nearest(&self, t: f64) -> &DensityMatrix {
        let idx = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
            .expect("solution has at least one sample");
        &self.states[idx]
    }

    pub fn last(&self) -> &DensityMatrix {
        self.states.last().expect("solution has at least one sample")
    }
}

#[derive(Debug, Clone)]
struct DenseChannel {
    coupling: f64,
    op: DMatrix<C64>,
    op_sq: DMatrix<C64>,
}

/// A linear generator `ρ ↦ −i[H, ρ] − R∘ρ + Σ dense double commutators`.
///
/// `R` collects every dissipator that acts elementwise in the computational basis
/// (diagonal channels, lattice jump kernels).
#[derive(Debug, Clone)]
pub(crate) struct Generator {
    dim: usize,
    hamiltonian: Option<DMatrix<C64>>,
    rates: Option<DMatrix<f64>>,
    dense: Vec<DenseChannel>,
}

impl Generator {
    pub(crate) fn new(hamiltonian: &HermitianOperator) -> Self {
        Self {
            dim: hamiltonian.dim(),
            hamiltonian: (!hamiltonian.is_zero()).then(|| hamiltonian.matrix().clone()),
            rates: None,
            dense: Vec::new(),
        }
    }

    pub(crate) fn from_model(model: &MonitoringModel) -> Self {
        let mut g = Self::new(model.hamiltonian());
        for ch in model.channels() {
            if ch.coupling == 0.0 {
                continue;
            }
            match ch.operator.diagonal() {
                Some(d) => g.add_rates(|i, j| 0.5 * ch.coupling * (d[i] - d[j]).powi(2)),
                None => g.dense.push(DenseChannel {
                    coupling: ch.coupling,
                    op: ch.operator.matrix().clone(),
                    op_sq: ch.operator.square().matrix().clone(),
                }),
            }
        }
        g
    }

    /// Adds an elementwise decay `dρ_ij −= rate(i, j) ρ_ij`.
    pub(crate) fn add_rates(&mut self, rate: impl Fn(usize, usize) -> f64) {
        let n = self.dim;
        let r = self.rates.get_or_insert_with(|| DMatrix::zeros(n, n));
        for j in 0..n {
            for i in 0..n {
                r[(i, j)] += rate(i, j);
            }
        }
    }

    pub(crate) fn apply(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let n = self.dim;
        let mut out = match &self.hamiltonian {
            Some(h) => {
                let hr = h * rho;
                // −i(Hρ − ρH) with ρH = (Hρ)† for Hermitian ρ, H
                let c = &hr - rho * h;
                c * C64::new(0.0, -1.0)
            }
            None => DMatrix::from_element(n, n, ZERO),
        };
        if let Some(r) = &self.rates {
            for j in 0..n {
                for i in 0..n {
                    out[(i, j)] -= rho[(i, j)] * r[(i, j)];
                }
            }
        }
        for ch in &self.dense {
            // −(λ/2)(L²ρ + ρL² − 2LρL)
            let lr = &ch.op * rho;
            let lrl = &lr * &ch.op;
            let dc = &ch.op_sq * rho + rho * &ch.op_sq - lrl * C64::new(2.0, 0.0);
            out -= dc * C64::new(0.5 * ch.coupling, 0.0);
        }
        out
    }

    pub(crate) fn integrate(&self, rho0: &DensityMatrix, dt: f64, steps: usize, stride: usize) -> Result<MESolution> {
        if rho0.dim() != self.dim {
            return Err(Error::dim("initial density matrix", self.dim, rho0.dim()));
        }
        if steps == 0 {
            return Err(Error::Precondition("steps must be at least 1".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Precondition(format!("dt must be positive, got {dt}")));
        }
        let samples = sample_steps(steps, stride);
        let mut times = Vec::with_capacity(samples.len());
        let mut states = Vec::with_capacity(samples.len());
        let mut rho = rho0.matrix().clone();
        let mut next_sample = 0;
        let half = C64::new(0.5 * dt, 0.0);
        let full = C64::new(dt, 0.0);
        let sixth = C64::new(dt / 6.0, 0.0);
        let two = C64::new(2.0, 0.0);

        let mut store = |n: usize, rho: &DMatrix<C64>| -> Result<()> {
            let state = DensityMatrix::from_matrix_unchecked(rho.clone());
            let min = state.min_eigenvalue();
            if min < -POSITIVITY_TOL {
                return Err(Error::Integration(format!(
                    "positivity lost at t = {} (eigenvalue {min:e}); reduce dt",
                    n as f64 * dt
                )));
            }
            state.check(DensityTolerance::INTEGRATED)?;
            times.push(n as f64 * dt);
            states.push(state);
            Ok(())
        };

        for n in 0..steps {
            if samples[next_sample] == n {
                store(n, &rho)?;
                next_sample += 1;
            }
            let k1 = self.apply(&rho);
            let k2 = self.apply(&(&rho + &k1 * half));
            let k3 = self.apply(&(&rho + &k2 * half));
            let k4 = self.apply(&(&rho + &k3 * full));
            let before = trace(&rho);
            rho += (k1 + (k2 + k3) * two + k4) * sixth;
            let after = trace(&rho);
            if !after.is_finite() || ((after - before) / before).abs() > TRACE_DRIFT_TOL {
                return Err(Error::Integration(format!(
                    "trace drift {:e} at step {n} exceeds {TRACE_DRIFT_TOL:e}",
                    (after - before) / before
                )));
            }
            rho /= C64::new(after, 0.0);
        }
        store(steps, &rho)?;
        Ok(MESolution { times, states })
    }
}

fn trace(m: &DMatrix<C64>) -> f64 {
    m.diagonal().iter().map(|v| v.re).sum()
}

/// Right-hand side `−i[H,ρ] − Σ_k (λ_k/2)[L_k,[L_k,ρ]]`. Feedback specs are ignored:
/// transform the model with [`crate::feedback::modified_me_params`] first.
pub fn me_derivative(rho: &DensityMatrix, model: &MonitoringModel) -> Result<DMatrix<C64>> {
    if rho.dim() != model.dim() {
        return Err(Error::dim("density matrix", model.dim(), rho.dim()));
    }
    Ok(Generator::from_model(model).apply(rho.matrix()))
}

/// RK4 solution of the master equation, sampled every `stride` steps.
pub fn run_me(
    model: &MonitoringModel,
    rho0: &DensityMatrix,
    dt: f64,
    steps: usize,
    stride: usize,
) -> Result<MESolution> {
    if rho0.dim() != model.dim() {
        return Err(Error::dim("initial density matrix", model.dim(), rho0.dim()));
    }
    Generator::from_model(model).integrate(rho0, dt, steps, stride)
}

/// Least-squares rate of `|ρ_ij(t)| ∝ exp(−rate·t)` over the solution.
pub fn fitted_decay_rate(solution: &MESolution, i: usize, j: usize) -> f64 {
    let ys: Vec<f64> = solution.states.iter().map(|s| s.entry(i, j).norm()).collect();
    -crate::stats::log_linear_slope(&solution.times, &ys)
}
