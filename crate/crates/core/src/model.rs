use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::HermitianOperator;

/// Which classical variable drives the feedback Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// The measured signal (expectation plus measurement noise).
    Signal,
    /// The trajectory's own noiseless expectation value.
    MeanField,
}

impl FeedbackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackMode::Signal => "signal",
            FeedbackMode::MeanField => "mean_field",
        }
    }
}

/// Feedback Hamiltonian `g Σ_k L_k X_k` over the target channels, `X_k` per [`FeedbackMode`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSpec {
    pub mode: FeedbackMode,
    pub gain: f64,
    pub channels: Vec<usize>,
}

/// A monitored Hermitian operator with its measurement strength.
#[derive(Debug, Clone)]
pub struct Channel {
    pub operator: HermitianOperator,
    pub coupling: f64,
}

impl Channel {
    pub fn new(operator: HermitianOperator, coupling: f64) -> Self {
        Self { operator, coupling }
    }
}

/// Hamiltonian, monitored channels and optional feedback: one simulation definition.
#[derive(Debug, Clone)]
pub struct MonitoringModel {
    hamiltonian: HermitianOperator,
    channels: Vec<Channel>,
    feedback: Option<FeedbackSpec>,
}

impl MonitoringModel {
    pub fn new(
        hamiltonian: HermitianOperator,
        channels: Vec<Channel>,
        feedback: Option<FeedbackSpec>,
    ) -> Result<Self> {
        let dim = hamiltonian.dim();
        if dim < 2 {
            return Err(Error::Model(format!("dimension must be at least 2, got {dim}")));
        }
        for (k, ch) in channels.iter().enumerate() {
            if ch.operator.dim() != dim {
                return Err(Error::dim(&format!("channel {k}"), dim, ch.operator.dim()));
            }
            if !(ch.coupling >= 0.0) || !ch.coupling.is_finite() {
                return Err(Error::Domain(format!(
                    "channel {k} coupling must be finite and >= 0, got {}",
                    ch.coupling
                )));
            }
        }
        if let Some(fb) = &feedback {
            if !fb.gain.is_finite() {
                return Err(Error::Domain(format!("feedback gain {} is not finite", fb.gain)));
            }
            for &k in &fb.channels {
                let ch = channels.get(k).ok_or_else(|| {
                    Error::Model(format!("feedback refers to missing channel {k}"))
                })?;
                if fb.mode == FeedbackMode::Signal && fb.gain != 0.0 && ch.coupling == 0.0 {
                    return Err(Error::Domain(format!(
                        "signal feedback from channel {k} is undefined: the channel is not monitored (coupling 0)"
                    )));
                }
            }
        }
        Ok(Self {
            hamiltonian,
            channels,
            feedback,
        })
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }

    pub fn hamiltonian(&self) -> &HermitianOperator {
        &self.hamiltonian
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn feedback(&self) -> Option<&FeedbackSpec> {
        self.feedback.as_ref()
    }

    pub fn with_feedback(&self, feedback: Option<FeedbackSpec>) -> Result<Self> {
        Self::new(self.hamiltonian.clone(), self.channels.clone(), feedback)
    }

    pub fn without_feedback(&self) -> Self {
        Self {
            hamiltonian: self.hamiltonian.clone(),
            channels: self.channels.clone(),
            feedback: None,
        }
    }
}

/// The two-level preset used throughout the experiments:
/// `L = diag(1, −1)` monitored with coupling `coupling`, `H` with off-diagonal `offdiag`.
pub fn qubit_preset(coupling: f64, offdiag: f64) -> Result<MonitoringModel> {
    let h = HermitianOperator::from_real_rows(&[vec![0.0, offdiag], vec![offdiag, 0.0]])?;
    let l = HermitianOperator::from_diagonal(&[1.0, -1.0])?;
    MonitoringModel::new(h, vec![Channel::new(l, coupling)], None)
}
