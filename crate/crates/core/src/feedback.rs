//! Feedback of the measurement record (legitimate) or of the mean field (not) into the
//! Hamiltonian, applied as a unitary post-map after each diffusive SSE step.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hilbert::{self, HermitianOperator, QuantumState, C64, ZERO};
use crate::model::{Channel, FeedbackMode, FeedbackSpec, MonitoringModel};

/// Order of the feedback unitary relative to the measurement update within one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeedbackOrder {
    /// Measurement update first, then the feedback unitary (the physical ordering).
    #[default]
    MeasurementFirst,
    /// Feedback unitary first, using the same increment; kept for ordering studies.
    FeedbackFirst,
}

/// Precomputed data for `exp(−i Σ_k c_k L_k)` over the feedback targets.
#[derive(Debug, Clone)]
pub(crate) enum FeedbackKernel {
    /// All targets diagonal: the unitary is a pointwise phase.
    Diagonal { diagonals: Vec<Vec<f64>> },
    /// One dense target: reuse its eigenbasis.
    Single {
        eigenvalues: Vec<f64>,
        /// Row-major eigenvector matrix `U` (columns are eigenvectors).
        u: Vec<C64>,
    },
    /// Several non-diagonal targets: diagonalize the weighted sum every step.
    General { operators: Vec<HermitianOperator> },
}

impl FeedbackKernel {
    pub(crate) fn new(channels: &[Channel], spec: &FeedbackSpec) -> Self {
        let ops: Vec<&HermitianOperator> = spec.channels.iter().map(|&k| &channels[k].operator).collect();
        if ops.iter().all(|op| op.diagonal().is_some()) {
            return FeedbackKernel::Diagonal {
                diagonals: ops.iter().map(|op| op.diagonal().unwrap().to_vec()).collect(),
            };
        }
        if ops.len() == 1 {
            let (eigenvalues, vecs) = ops[0].eigen();
            let n = eigenvalues.len();
            let u = (0..n * n).map(|idx| vecs[(idx / n, idx % n)]).collect();
            return FeedbackKernel::Single { eigenvalues, u };
        }
        FeedbackKernel::General {
            operators: ops.into_iter().cloned().collect(),
        }
    }

    /// `ψ ← exp(−i Σ_k coeffs[k] L_k) ψ`; `scratch` must have the state's length.
    pub(crate) fn apply(&self, psi: &mut [C64], coeffs: &[f64], scratch: &mut [C64]) {
        match self {
            FeedbackKernel::Diagonal { diagonals } => {
                for (i, a) in psi.iter_mut().enumerate() {
                    let phase: f64 = diagonals.iter().zip(coeffs).map(|(d, c)| c * d[i]).sum();
                    *a *= C64::from_polar(1.0, -phase);
                }
            }
            FeedbackKernel::Single { eigenvalues, u } => {
                rotate_in_eigenbasis(psi, eigenvalues, u, coeffs[0], scratch);
            }
            FeedbackKernel::General { operators } => {
                let n = psi.len();
                let mut sum = DMatrix::from_element(n, n, ZERO);
                for (op, &c) in operators.iter().zip(coeffs) {
                    sum += op.matrix() * C64::new(c, 0.0);
                }
                let (vals, vecs) = hilbert::hermitian_eigen(&sum);
                let u: Vec<C64> = (0..n * n).map(|idx| vecs[(idx / n, idx % n)]).collect();
                rotate_in_eigenbasis(psi, &vals, &u, 1.0, scratch);
            }
        }
    }
}

fn rotate_in_eigenbasis(psi: &mut [C64], eigenvalues: &[f64], u: &[C64], scale: f64, w: &mut [C64]) {
    let n = psi.len();
    // w = U† ψ, phased
    for (j, wj) in w.iter_mut().enumerate() {
        let mut acc = ZERO;
        for i in 0..n {
            acc += u[i * n + j].conj() * psi[i];
        }
        *wj = acc * C64::from_polar(1.0, -scale * eigenvalues[j]);
    }
    for (i, p) in psi.iter_mut().enumerate() {
        let row = &u[i * n..(i + 1) * n];
        *p = row.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
    }
}

fn renormalize(psi: &mut [C64]) {
    let n = hilbert::norm(psi);
    for a in psi.iter_mut() {
        *a /= n;
    }
}

/// Signal increment `⟨L⟩ dt + dW / (2√λ)` of one channel.
#[inline]
pub fn signal_increment(pre_expectation: f64, coupling: f64, dt: f64, dw: f64) -> f64 {
    pre_expectation * dt + dw / (2.0 * coupling.sqrt())
}

fn require_mode(model: &MonitoringModel, mode: FeedbackMode) -> Result<Option<&FeedbackSpec>> {
    match model.feedback() {
        Some(fb) if fb.mode != mode => Err(Error::Precondition(format!(
            "model carries {} feedback, not {}",
            fb.mode.as_str(),
            mode.as_str()
        ))),
        other => Ok(other),
    }
}

/// Applies `exp(−i g Σ_k L_k s_k)` with `s_k` the signal increments of this step.
///
/// A model without a feedback spec is returned unchanged.
pub fn apply_signal_feedback(
    state: &QuantumState,
    model: &MonitoringModel,
    dt: f64,
    dw: &[f64],
    pre_expectations: &[f64],
) -> Result<QuantumState> {
    let Some(fb) = require_mode(model, FeedbackMode::Signal)? else {
        return Ok(state.clone());
    };
    if state.dim() != model.dim() {
        return Err(Error::dim("signal feedback", model.dim(), state.dim()));
    }
    let k = model.channels().len();
    if dw.len() != k || pre_expectations.len() != k {
        return Err(Error::Model(format!(
            "expected {k} increments and expectations, got {} and {}",
            dw.len(),
            pre_expectations.len()
        )));
    }
    let coeffs: Vec<f64> = fb
        .channels
        .iter()
        .map(|&c| {
            fb.gain * signal_increment(pre_expectations[c], model.channels()[c].coupling, dt, dw[c])
        })
        .collect();
    Ok(apply_kernel(state, model, fb, &coeffs))
}

/// Applies `exp(−i g Σ_k L_k ⟨L_k⟩_ψ dt)` using the state's own expectations.
pub fn apply_meanfield_feedback(
    state: &QuantumState,
    model: &MonitoringModel,
    dt: f64,
) -> Result<QuantumState> {
    let Some(fb) = require_mode(model, FeedbackMode::MeanField)? else {
        return Ok(state.clone());
    };
    if state.dim() != model.dim() {
        return Err(Error::dim("mean-field feedback", model.dim(), state.dim()));
    }
    let coeffs = fb
        .channels
        .iter()
        .map(|&c| Ok(fb.gain * hilbert::expectation(state, &model.channels()[c].operator)? * dt))
        .collect::<Result<Vec<f64>>>()?;
    Ok(apply_kernel(state, model, fb, &coeffs))
}

fn apply_kernel(state: &QuantumState, model: &MonitoringModel, fb: &FeedbackSpec, coeffs: &[f64]) -> QuantumState {
    let kernel = FeedbackKernel::new(model.channels(), fb);
    let mut psi = state.amplitudes().to_vec();
    let mut scratch = vec![ZERO; psi.len()];
    kernel.apply(&mut psi, coeffs, &mut scratch);
    renormalize(&mut psi);
    QuantumState::from_normalized(psi)
}

/// The closed master-equation parameters that absorb signal feedback of gain `g`:
/// `H → H + (g/2) Σ_k L_k²` and `λ_k → λ_k + g²/(4λ_k)` on the fed-back channels.
///
/// The targets are the model's feedback channels, or every channel when no feedback
/// spec is attached. The result carries no feedback spec.
pub fn modified_me_params(model: &MonitoringModel, g: f64) -> Result<MonitoringModel> {
    let targets: Vec<usize> = match require_mode(model, FeedbackMode::Signal)? {
        Some(fb) => fb.channels.clone(),
        None => (0..model.channels().len()).collect(),
    };
    if !g.is_finite() {
        return Err(Error::Domain(format!("feedback gain {g} is not finite")));
    }
    let mut hamiltonian = model.hamiltonian().clone();
    let mut channels = model.channels().to_vec();
    if g != 0.0 {
        for &k in &targets {
            let ch = &mut channels[k];
            if ch.coupling == 0.0 {
                return Err(Error::Domain(format!(
                    "channel {k} has coupling 0: its signal diverges and cannot be fed back"
                )));
            }
            hamiltonian = hamiltonian.add(&ch.operator.square().scale(0.5 * g))?;
            ch.coupling += g * g / (4.0 * ch.coupling);
        }
    }
    MonitoringModel::new(hamiltonian, channels, None)
}
