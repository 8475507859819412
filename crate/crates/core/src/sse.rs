//! Euler–Maruyama integration of the normalized diffusive stochastic Schrödinger
//! equation, recording the measurement signal of every monitored channel.
//!
//! One step with increments `dW_k ~ N(0, dt)`:
//!
//! ```text
//! ψ' = ψ + [−iHψ − Σ_k (λ_k/2)(L_k − ⟨L_k⟩)²ψ] dt + Σ_k √λ_k (L_k − ⟨L_k⟩)ψ dW_k
//! s_k = ⟨L_k⟩ dt + dW_k / (2√λ_k)
//! ```
//!
//! followed by renormalization and, if the model carries one, the feedback post-map.

use crate::error::{Error, Result};
use crate::feedback::{signal_increment, FeedbackKernel, FeedbackOrder};
use crate::grw::FlashEvent;
use crate::hilbert::{self, QuantumState, C64, ZERO};
use crate::model::{FeedbackMode, MonitoringModel};
use crate::noise::WienerIncrements;

/// Per-step measurement record.
///
/// `values[k][n]` is the signal increment of channel `k` over step `n` divided by `dt`;
/// `mean_field[k][n]` is `⟨L_k⟩` at the start of that step. Unmonitored channels
/// (coupling 0) record `NaN` signal values.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub dt: f64,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub mean_field: Vec<Vec<f64>>,
}

impl SignalRecord {
    fn with_capacity(channels: usize, steps: usize, dt: f64) -> Self {
        Self {
            dt,
            times: Vec::with_capacity(steps),
            values: (0..channels).map(|_| Vec::with_capacity(steps)).collect(),
            mean_field: (0..channels).map(|_| Vec::with_capacity(steps)).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.times.len()
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryOptions {
    /// Steps between recorded samples; time 0 and the final time are always sampled.
    pub stride: usize,
    pub record_signal: bool,
    pub keep_snapshots: bool,
    pub feedback_order: FeedbackOrder,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            stride: 10,
            record_signal: true,
            keep_snapshots: false,
            feedback_order: FeedbackOrder::MeasurementFirst,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryResult {
    pub times: Vec<f64>,
    /// `expectations[sample][channel]`
    pub expectations: Vec<Vec<f64>>,
    pub snapshots: Option<Vec<QuantumState>>,
    pub signal: Option<SignalRecord>,
    pub flashes: Vec<FlashEvent>,
    pub final_state: QuantumState,
}

/// Step indices at which a run of `steps` steps is sampled.
pub fn sample_steps(steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut out: Vec<usize> = (0..=steps).step_by(stride).collect();
    if *out.last().unwrap() != steps {
        out.push(steps);
    }
    out
}

/// Reusable SSE stepper with preallocated work buffers.
pub(crate) struct SseStepper<'a> {
    model: &'a MonitoringModel,
    sqrt_coupling: Vec<f64>,
    kernel: Option<FeedbackKernel>,
    order: FeedbackOrder,
    skip_hamiltonian: bool,
    hpsi: Vec<C64>,
    lpsi: Vec<C64>,
    dev: Vec<C64>,
    ldev: Vec<C64>,
    next: Vec<C64>,
    scratch: Vec<C64>,
    coeffs: Vec<f64>,
    /// Expectations of the state the measurement update acts on.
    exp_buf: Vec<f64>,
    /// `⟨L_k⟩` at the start of the last step.
    pub expectations: Vec<f64>,
    /// Signal increments of the last step.
    pub signal: Vec<f64>,
}

impl<'a> SseStepper<'a> {
    pub(crate) fn new(model: &'a MonitoringModel, order: FeedbackOrder) -> Self {
        let n = model.dim();
        let k = model.channels().len();
        let kernel = model
            .feedback()
            .filter(|fb| fb.gain != 0.0 && !fb.channels.is_empty())
            .map(|fb| FeedbackKernel::new(model.channels(), fb));
        let nfb = model.feedback().map_or(0, |fb| fb.channels.len());
        Self {
            model,
            sqrt_coupling: model.channels().iter().map(|c| c.coupling.sqrt()).collect(),
            kernel,
            order,
            skip_hamiltonian: model.hamiltonian().is_zero(),
            hpsi: vec![ZERO; n],
            lpsi: vec![ZERO; n * k],
            dev: vec![ZERO; n],
            ldev: vec![ZERO; n],
            next: vec![ZERO; n],
            scratch: vec![ZERO; n],
            coeffs: vec![0.0; nfb],
            exp_buf: vec![0.0; k],
            expectations: vec![0.0; k],
            signal: vec![0.0; k],
        }
    }

    fn compute_expectations(&mut self, psi: &[C64]) {
        let n = psi.len();
        for (k, ch) in self.model.channels().iter().enumerate() {
            let lp = &mut self.lpsi[k * n..(k + 1) * n];
            ch.operator.apply(psi, lp);
            self.exp_buf[k] = psi.iter().zip(lp.iter()).map(|(a, b)| (a.conj() * b).re).sum();
        }
    }

    fn apply_feedback(&mut self, psi: &mut [C64], dt: f64) {
        let Some(kernel) = &self.kernel else { return };
        let fb = self.model.feedback().expect("kernel implies feedback");
        match fb.mode {
            FeedbackMode::Signal => {
                for (c, &k) in self.coeffs.iter_mut().zip(&fb.channels) {
                    *c = fb.gain * self.signal[k];
                }
            }
            FeedbackMode::MeanField => {
                for (c, &k) in self.coeffs.iter_mut().zip(&fb.channels) {
                    let op = &self.model.channels()[k].operator;
                    op.apply(psi, &mut self.scratch);
                    let e: f64 = psi.iter().zip(&self.scratch).map(|(a, b)| (a.conj() * b).re).sum();
                    *c = fb.gain * e * dt;
                }
            }
        }
        kernel.apply(psi, &self.coeffs, &mut self.scratch);
        let norm = hilbert::norm(psi);
        for a in psi.iter_mut() {
            *a /= norm;
        }
    }

    /// Advances `psi` by one step. `step_index` only labels errors.
    pub(crate) fn step(&mut self, psi: &mut [C64], dt: f64, dw: &[f64], step_index: usize) -> Result<()> {
        let n = psi.len();
        let channels = self.model.channels();

        self.compute_expectations(psi);
        self.expectations.copy_from_slice(&self.exp_buf);
        for (k, ch) in channels.iter().enumerate() {
            self.signal[k] = if ch.coupling > 0.0 {
                signal_increment(self.expectations[k], ch.coupling, dt, dw[k])
            } else {
                f64::NAN
            };
        }
        if self.order == FeedbackOrder::FeedbackFirst && self.kernel.is_some() {
            // The record keeps the pre-feedback mean field.
            self.apply_feedback(psi, dt);
            self.compute_expectations(psi);
        }
        self.measurement_update(psi, dt, dw);

        if self.next.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::IntegrationBlowup { step: step_index });
        }
        let norm = hilbert::norm(&self.next);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::IntegrationBlowup { step: step_index });
        }
        for (p, q) in psi.iter_mut().zip(&self.next) {
            *p = q / norm;
        }
        if self.order == FeedbackOrder::MeasurementFirst {
            self.apply_feedback(psi, dt);
        }
        debug_assert_eq!(psi.len(), n);
        Ok(())
    }

    /// Writes the unnormalized Euler–Maruyama update of `psi` into `self.next`,
    /// using `lpsi` and `exp_buf` (both computed for the state in `psi`).
    fn measurement_update(&mut self, psi: &[C64], dt: f64, dw: &[f64]) {
        let n = psi.len();
        if self.skip_hamiltonian {
            self.next.copy_from_slice(psi);
        } else {
            self.model.hamiltonian().apply(psi, &mut self.hpsi);
            for ((o, p), h) in self.next.iter_mut().zip(psi).zip(&self.hpsi) {
                // −i·h·dt
                *o = p + C64::new(h.im * dt, -h.re * dt);
            }
        }
        for (k, ch) in self.model.channels().iter().enumerate() {
            if ch.coupling == 0.0 {
                continue;
            }
            let e = self.exp_buf[k];
            let lp = &self.lpsi[k * n..(k + 1) * n];
            for ((d, l), p) in self.dev.iter_mut().zip(lp).zip(psi) {
                *d = l - p * e;
            }
            ch.operator.apply(&self.dev, &mut self.ldev);
            let drift = -0.5 * ch.coupling * dt;
            let noise = self.sqrt_coupling[k] * dw[k];
            for ((o, d), ld) in self.next.iter_mut().zip(&self.dev).zip(&self.ldev) {
                let dd = ld - d * e;
                *o += dd * drift + d * noise;
            }
        }
    }
}

/// One SSE step. Returns the new state and the per-channel signal increments.
pub fn sse_step(
    state: &QuantumState,
    model: &MonitoringModel,
    dt: f64,
    dw: &[f64],
) -> Result<(QuantumState, Vec<f64>)> {
    check_step_args(state, model, dt)?;
    if dw.len() != model.channels().len() {
        return Err(Error::Model(format!(
            "expected {} increments, got {}",
            model.channels().len(),
            dw.len()
        )));
    }
    if dw.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("noise increments must be finite".into()));
    }
    let mut stepper = SseStepper::new(model, FeedbackOrder::MeasurementFirst);
    let mut psi = state.amplitudes().to_vec();
    stepper.step(&mut psi, dt, dw, 0)?;
    Ok((QuantumState::from_normalized(psi), stepper.signal.clone()))
}

fn check_step_args(state: &QuantumState, model: &MonitoringModel, dt: f64) -> Result<()> {
    if state.dim() != model.dim() {
        return Err(Error::dim("initial state", model.dim(), state.dim()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Precondition(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

pub(crate) fn check_run_args(model: &MonitoringModel, initial: &QuantumState, dt: f64, steps: usize) -> Result<()> {
    check_step_args(initial, model, dt)?;
    if steps == 0 {
        return Err(Error::Precondition("steps must be at least 1".into()));
    }
    if model.channels().is_empty() {
        return Err(Error::Precondition("an SSE run needs at least one monitored channel".into()));
    }
    Ok(())
}

/// Integrates one trajectory. Fully determined by the arguments.
pub fn run_trajectory(
    model: &MonitoringModel,
    initial: &QuantumState,
    dt: f64,
    steps: usize,
    seed: u64,
    trajectory_index: u64,
    options: &TrajectoryOptions,
) -> Result<TrajectoryResult> {
    check_run_args(model, initial, dt, steps)?;
    let k = model.channels().len();
    let samples = sample_steps(steps, options.stride);
    let mut times = Vec::with_capacity(samples.len());
    let mut expectations = Vec::with_capacity(samples.len());
    let mut snapshots = options.keep_snapshots.then(Vec::new);
    let mut signal = options
        .record_signal
        .then(|| SignalRecord::with_capacity(k, steps, dt));

    let mut noise = WienerIncrements::new(seed, trajectory_index, k, dt);
    let mut stepper = SseStepper::new(model, options.feedback_order);
    let mut psi = initial.amplitudes().to_vec();
    let mut dw = vec![0.0; k];
    let mut next_sample = 0;

    let mut record_sample = |n: usize, psi: &[C64]| -> Result<()> {
        let state = QuantumState::from_normalized(psi.to_vec());
        times.push(n as f64 * dt);
        expectations.push(
            model
                .channels()
                .iter()
                .map(|c| hilbert::expectation(&state, &c.operator))
                .collect::<Result<Vec<f64>>>()?,
        );
        if let Some(s) = snapshots.as_mut() {
            s.push(state);
        }
        Ok(())
    };

    for n in 0..steps {
        if samples[next_sample] == n {
            record_sample(n, &psi)?;
            next_sample += 1;
        }
        noise.fill(&mut dw);
        stepper.step(&mut psi, dt, &dw, n)?;
        if let Some(rec) = signal.as_mut() {
            rec.times.push(n as f64 * dt);
            for ch in 0..k {
                rec.values[ch].push(stepper.signal[ch] / dt);
                rec.mean_field[ch].push(stepper.expectations[ch]);
            }
        }
    }
    record_sample(steps, &psi)?;

    Ok(TrajectoryResult {
        times,
        expectations,
        snapshots,
        signal,
        flashes: Vec::new(),
        final_state: QuantumState::from_normalized(psi),
    })
}
