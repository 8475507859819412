//! Quantum trajectory laboratory for continuously monitored systems and
//! spontaneous-collapse models.
//!
//! The crate simulates diffusive stochastic Schrödinger equations, integrates the
//! matching master equations, applies feedback of measurement records, runs
//! GRW-style jump and CSL lattice models, and aggregates Monte-Carlo ensembles
//! deterministically.

pub mod config;
pub mod csl;
pub mod ensemble;
pub mod error;
pub mod feedback;
pub mod grw;
pub mod hilbert;
pub mod master;
pub mod model;
pub mod noise;
pub mod output;
pub mod run;
pub mod sse;
pub mod stats;

pub use error::{Error, Result};
pub use hilbert::{DensityMatrix, HermitianOperator, QuantumState, C64};
pub use model::{Channel, FeedbackMode, FeedbackSpec, MonitoringModel};
