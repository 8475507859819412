//! Monte-Carlo ensembles of trajectories and the experiments built on them.
//!
//! Trajectories are processed in fixed chunks of consecutive indices. Each chunk is
//! reduced sequentially and the chunk partials are merged in a fixed pairwise tree,
//! so every result is bit-for-bit independent of the worker count.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{modified_me_params, FeedbackOrder};
use crate::grw::{run_grw_trajectory, FlashEvent, JumpModel};
use crate::hilbert::{self, half_trace_norm, DensityMatrix, DensityTolerance, HermitianOperator, QuantumState, C64, ZERO};
use crate::master::{run_me, MESolution};
use crate::model::{FeedbackMode, MonitoringModel};
use crate::noise::{self, BOOTSTRAP_STREAM};
use crate::sse::{run_trajectory, sample_steps, TrajectoryOptions};
use crate::stats;

const CHUNK: usize = 64;

/// A pure initial state or a weighted decomposition of a mixed one.
///
/// Mixtures are sampled by stratification: trajectory `i` of `M` starts in the
/// component whose cumulative-weight interval contains `(i + ½)/M`.
#[derive(Debug, Clone)]
pub enum InitialCondition {
    Pure(QuantumState),
    Mixture { states: Vec<QuantumState>, weights: Vec<f64> },
}

impl From<QuantumState> for InitialCondition {
    fn from(s: QuantumState) -> Self {
        InitialCondition::Pure(s)
    }
}

impl InitialCondition {
    pub fn mixture(states: Vec<QuantumState>, weights: Vec<f64>) -> Result<Self> {
        hilbert::mix(&states, &weights)?;
        Ok(InitialCondition::Mixture { states, weights })
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialCondition::Pure(s) => s.dim(),
            InitialCondition::Mixture { states, .. } => states[0].dim(),
        }
    }

    pub fn density_matrix(&self) -> Result<DensityMatrix> {
        match self {
            InitialCondition::Pure(s) => Ok(s.projector()),
            InitialCondition::Mixture { states, weights } => hilbert::mix(states, weights),
        }
    }

    /// Component assigned to trajectory `index` of an ensemble of `m`.
    pub fn component(&self, index: usize, m: usize) -> &QuantumState {
        match self {
            InitialCondition::Pure(s) => s,
            InitialCondition::Mixture { states, weights } => {
                let total: f64 = weights.iter().sum();
                let u = (index as f64 + 0.5) / m as f64 * total;
                let mut acc = 0.0;
                for (s, w) in states.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return s;
                    }
                }
                states.last().expect("mixture has components")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    pub stride: usize,
    /// Worker threads; `None` uses the global pool. Never changes results.
    pub workers: Option<usize>,
    pub feedback_order: FeedbackOrder,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            stride: 10,
            workers: None,
            feedback_order: FeedbackOrder::MeasurementFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub name: String,
    pub mean: Vec<f64>,
    /// Sample standard deviation over `√M`.
    pub se: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleReport {
    pub m: usize,
    pub times: Vec<f64>,
    pub mean_states: Vec<DensityMatrix>,
    pub observables: Vec<ObservableSeries>,
    /// Trace distance to the attached reference solution, per sampled time.
    pub reference_distance: Option<Vec<f64>>,
}

impl EnsembleReport {
    /// Compares against a reference solution sampled at the same times.
    pub fn attach_reference(&mut self, reference: &MESolution) -> Result<f64> {
        let d = self.distance_to(reference)?;
        let max = d.iter().copied().fold(0.0, f64::max);
        self.reference_distance = Some(d);
        Ok(max)
    }

    pub fn distance_to(&self, reference: &MESolution) -> Result<Vec<f64>> {
        let dt_tol = 1e-9 * self.times.last().copied().unwrap_or(1.0).max(1.0);
        self.times
            .iter()
            .zip(&self.mean_states)
            .map(|(&t, rho)| {
                let idx = reference
                    .times
                    .iter()
                    .position(|&r| (r - t).abs() <= dt_tol)
                    .ok_or_else(|| Error::Precondition(format!("reference has no sample at t = {t}")))?;
                hilbert::trace_distance(rho, &reference.states[idx])
            })
            .collect()
    }

    pub fn max_reference_distance(&self) -> Option<f64> {
        self.reference_distance
            .as_ref()
            .map(|d| d.iter().copied().fold(0.0, f64::max))
    }

    pub fn observable(&self, name: &str) -> Option<&ObservableSeries> {
        self.observables.iter().find(|o| o.name == name)
    }
}

/// Running count, mean and sum of squared deviations; merges exactly in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }

    fn se(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            (self.m2 / (self.n - 1.0) / self.n).sqrt()
        }
    }
}

struct Partial<X> {
    rho: Vec<DMatrix<C64>>,
    obs: Vec<Vec<Moments>>,
    extras: Vec<X>,
}

impl<X> Partial<X> {
    fn merge(mut self, o: Partial<X>) -> Partial<X> {
        for (a, b) in self.rho.iter_mut().zip(&o.rho) {
            *a += b;
        }
        for (a, b) in self.obs.iter_mut().zip(&o.obs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = x.merge(*y);
            }
        }
        self.extras.extend(o.extras);
        self
    }
}

fn add_projector(acc: &mut DMatrix<C64>, psi: &[C64]) {
    let n = psi.len();
    for j in 0..n {
        let cj = psi[j].conj();
        for i in 0..n {
            acc[(i, j)] += psi[i] * cj;
        }
    }
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Index-ordered parallel map with the first failure (by index) reported.
fn par_map_ordered<T: Send>(n: usize, workers: Option<usize>, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = with_workers(workers, || (0..n).into_par_iter().map(&f).collect())?;
    results.into_iter().collect()
}

fn tree_merge<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => merge(a, b),
                None => a,
            });
        }
        items = next;
    }
    items.pop()
}

/// Core aggregation: `run(index)` returns the sampled snapshots of one trajectory
/// plus an arbitrary per-trajectory extra.
fn aggregate<X: Send>(
    m: usize,
    dim: usize,
    samples: usize,
    observables: &[HermitianOperator],
    workers: Option<usize>,
    run: impl Fn(usize) -> Result<(Vec<QuantumState>, X)> + Sync + Send,
) -> Result<(Vec<DMatrix<C64>>, Vec<Vec<Moments>>, Vec<X>)> {
    let chunks = m.div_ceil(CHUNK);
    let partials = par_map_ordered(chunks, workers, |c| {
        let mut p = Partial {
            rho: vec![DMatrix::from_element(dim, dim, ZERO); samples],
            obs: vec![vec![Moments::default(); observables.len()]; samples],
            extras: Vec::with_capacity(CHUNK),
        };
        for i in c * CHUNK..((c + 1) * CHUNK).min(m) {
            let (snaps, extra) = run(i).map_err(|e| Error::Trajectory {
                index: i,
                source: Box::new(e),
            })?;
            for (s, psi) in snaps.iter().enumerate() {
                add_projector(&mut p.rho[s], psi.amplitudes());
                for (o, op) in observables.iter().enumerate() {
                    p.obs[s][o].push(hilbert::expectation(psi, op)?);
                }
            }
            p.extras.push(extra);
        }
        Ok(p)
    })?;
    let total = tree_merge(partials, Partial::merge).expect("m >= 2");
    Ok((total.rho, total.obs, total.extras))
}

fn build_report(
    m: usize,
    times: Vec<f64>,
    rho_sums: Vec<DMatrix<C64>>,
    obs: Vec<Vec<Moments>>,
    names: Vec<String>,
) -> Result<EnsembleReport> {
    let scale = C64::new(1.0 / m as f64, 0.0);
    let mean_states = rho_sums
        .into_iter()
        .map(|r| DensityMatrix::with_tolerance(r * scale, DensityTolerance::ENSEMBLE))
        .collect::<Result<Vec<_>>>()?;
    let observables = names
        .into_iter()
        .enumerate()
        .map(|(o, name)| ObservableSeries {
            name,
            mean: obs.iter().map(|row| row[o].mean).collect(),
            se: obs.iter().map(|row| row[o].se()).collect(),
        })
        .collect();
    Ok(EnsembleReport {
        m,
        times,
        mean_states,
        observables,
        reference_distance: None,
    })
}

fn check_ensemble_args(dim: usize, initial: &InitialCondition, m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::Precondition(format!("ensemble size must be at least 2, got {m}")));
    }
    if initial.dim() != dim {
        return Err(Error::dim("initial condition", dim, initial.dim()));
    }
    Ok(())
}

fn channel_observables(model: &MonitoringModel) -> (Vec<HermitianOperator>, Vec<String>) {
    model
        .channels()
        .iter()
        .enumerate()
        .map(|(k, c)| (c.operator.clone(), format!("L{k}")))
        .unzip()
}

fn sse_snapshots(
    model: &MonitoringModel,
    initial: &InitialCondition,
    dt: f64,
    steps: usize,
    m: usize,
    seed: u64,
    opts: &EnsembleOptions,
    index: usize,
) -> Result<(Vec<QuantumState>, QuantumState)> {
    let topts = TrajectoryOptions {
        stride: opts.stride,
        record_signal: false,
        keep_snapshots: true,
        feedback_order: opts.feedback_order,
    };
    let r = run_trajectory(model, initial.component(index, m), dt, steps, seed, index as u64, &topts)?;
    Ok((r.snapshots.expect("snapshots requested"), r.final_state))
}

/// Runs `m` SSE trajectories (indices `0..m`) and aggregates them. Observables are
/// the channel operators, named `L0`, `L1`, ….
pub fn run_ensemble(
    model: &MonitoringModel,
    initial: &InitialCondition,
    dt: f64,
    steps: usize,
    m: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<EnsembleReport> {
    Ok(run_ensemble_with(model, initial, dt, steps, m, seed, opts, |_, _| ())?.0)
}

/// As [`run_ensemble`], also returning `extra(snapshots, final_state)` per trajectory.
#[allow(clippy::too_many_arguments)]
fn run_ensemble_with<X: Send>(
    model: &MonitoringModel,
    initial: &InitialCondition,
    dt: f64,
    steps: usize,
    m: usize,
    seed: u64,
    opts: &EnsembleOptions,
    extra: impl Fn(&[QuantumState], QuantumState) -> X + Sync + Send,
) -> Result<(EnsembleReport, Vec<X>)> {
    check_ensemble_args(model.dim(), initial, m)?;
    crate::sse::check_run_args(model, initial.component(0, m), dt, steps)?;
    let samples = sample_steps(steps, opts.stride);
    let times: Vec<f64> = samples.iter().map(|&n| n as f64 * dt).collect();
    let (ops, names) = channel_observables(model);
    let (rho, obs, extras) = aggregate(m, model.dim(), samples.len(), &ops, opts.workers, |i| {
        let (snaps, fin) = sse_snapshots(model, initial, dt, steps, m, seed, opts, i)?;
        let x = extra(&snaps, fin);
        Ok((snaps, x))
    })?;
    Ok((build_report(m, times, rho, obs, names)?, extras))
}

#[derive(Debug, Clone)]
pub struct GrwEnsembleReport {
    pub ensemble: EnsembleReport,
    /// Flash log of every trajectory, in index order.
    pub flashes: Vec<Vec<FlashEvent>>,
}

impl GrwEnsembleReport {
    pub fn flash_counts(&self) -> Vec<usize> {
        self.flashes.iter().map(Vec::len).collect()
    }

    pub fn first_flashes(&self) -> Vec<FlashEvent> {
        self.flashes.iter().filter_map(|f| f.first().copied()).collect()
    }
}

/// Jump-unravelling ensemble. Observables are the particle positions `x0`, `x1`, …
/// in lattice units (site index).
pub fn run_grw_ensemble(
    model: &JumpModel,
    initial: &InitialCondition,
    dt: f64,
    steps: usize,
    m: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<GrwEnsembleReport> {
    check_ensemble_args(model.dim(), initial, m)?;
    let lattice = model.lattice();
    let mut ops = Vec::new();
    let mut names = Vec::new();
    for p in 0..lattice.particles() {
        let x: Vec<f64> = (0..lattice.dim()).map(|i| lattice.sites_of(i)[p] as f64).collect();
        ops.push(HermitianOperator::from_diagonal(&x)?);
        names.push(format!("x{p}"));
    }
    let samples = sample_steps(steps, opts.stride);
    let times: Vec<f64> = samples.iter().map(|&n| n as f64 * dt).collect();
    let (rho, obs, flashes) = aggregate(m, model.dim(), samples.len(), &ops, opts.workers, |i| {
        let r = run_grw_trajectory(model, initial.component(i, m), dt, steps, seed, i as u64, opts.stride, true)?;
        Ok((r.snapshots.expect("snapshots requested"), r.flashes))
    })?;
    Ok(GrwEnsembleReport {
        ensemble: build_report(m, times, rho, obs, names)?,
        flashes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Tangible,
    NotTangible,
    Inconclusive,
}

impl Verdict {
    pub fn from_z(z: f64) -> Self {
        if z >= 5.0 {
            Verdict::NotTangible
        } else if z <= 2.0 {
            Verdict::Tangible
        } else {
            Verdict::Inconclusive
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Tangible => "tangible",
            Verdict::NotTangible => "not_tangible",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub label: String,
    pub states: Vec<QuantumState>,
    pub weights: Vec<f64>,
}

impl Decomposition {
    pub fn new(label: impl Into<String>, states: Vec<QuantumState>, weights: Vec<f64>) -> Result<Self> {
        hilbert::mix(&states, &weights)?;
        Ok(Self {
            label: label.into(),
            states,
            weights,
        })
    }

    fn initial(&self) -> InitialCondition {
        InitialCondition::Mixture {
            states: self.states.clone(),
            weights: self.weights.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FWTReport {
    pub labels: (String, String),
    pub times: Vec<f64>,
    pub distance: Vec<f64>,
    /// Pooled bootstrap standard error of the distance, `√(SE_A² + SE_B²)`.
    pub se: Vec<f64>,
    pub max_z: f64,
    pub verdict: Verdict,
    pub ensemble_a: EnsembleReport,
    pub ensemble_b: EnsembleReport,
}

impl FWTReport {
    pub fn z_scores(&self) -> Vec<f64> {
        self.distance.iter().zip(&self.se).map(|(&d, &s)| z_score(d, s)).collect()
    }
}

fn z_score(d: f64, se: f64) -> f64 {
    if se > 0.0 {
        d / se
    } else if d > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwtOptions {
    pub ensemble: EnsembleOptions,
    pub bootstrap_resamples: usize,
}

impl Default for FwtOptions {
    fn default() -> Self {
        Self {
            ensemble: EnsembleOptions {
                stride: 100,
                ..EnsembleOptions::default()
            },
            bootstrap_resamples: 1000,
        }
    }
}

/// Free-will test: runs the same feedback model from two decompositions of one `ρ0`
/// with shared per-index seeds and compares the ensemble means.
///
/// The verdict uses `z = max_t D(t)/SE(t)`: `not_tangible` for `z ≥ 5`, `tangible` for
/// `z ≤ 2`, otherwise `inconclusive`.
#[allow(clippy::too_many_arguments)]
pub fn fwt_experiment(
    model: &MonitoringModel,
    a: &Decomposition,
    b: &Decomposition,
    dt: f64,
    steps: usize,
    m: usize,
    seed: u64,
    opts: &FwtOptions,
) -> Result<FWTReport> {
    let rho_a = hilbert::mix(&a.states, &a.weights)?;
    let rho_b = hilbert::mix(&b.states, &b.weights)?;
    let gap = (rho_a.matrix() - rho_b.matrix()).iter().map(|v| v.norm()).fold(0.0, f64::max);
    if gap > 1e-10 {
        return Err(Error::Precondition(format!(
            "decompositions '{}' and '{}' describe different density matrices (max entry gap {gap:e})",
            a.label, b.label
        )));
    }
    if opts.bootstrap_resamples < 2 {
        return Err(Error::Precondition("bootstrap needs at least 2 resamples".into()));
    }
    let keep = |snaps: &[QuantumState], _| {
        let mut v = Vec::with_capacity(snaps.len() * model.dim() * model.dim());
        snaps.iter().for_each(|s| pack_projector(s.amplitudes(), &mut v));
        v
    };
    let (ens_a, snaps_a) = run_ensemble_with(model, &a.initial(), dt, steps, m, seed, &opts.ensemble, keep)?;
    let (ens_b, snaps_b) = run_ensemble_with(model, &b.initial(), dt, steps, m, seed, &opts.ensemble, keep)?;

    let distance: Vec<f64> = ens_a
        .mean_states
        .iter()
        .zip(&ens_b.mean_states)
        .map(|(x, y)| hilbert::trace_distance(x, y))
        .collect::<Result<_>>()?;
    let se_a = bootstrap_se(&snaps_a, &ens_a, seed, opts)?;
    let se_b = bootstrap_se(&snaps_b, &ens_b, seed, opts)?;
    let se: Vec<f64> = se_a.iter().zip(&se_b).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let max_z = distance.iter().zip(&se).map(|(&d, &s)| z_score(d, s)).fold(0.0, f64::max);
    Ok(FWTReport {
        labels: (a.label.clone(), b.label.clone()),
        times: ens_a.times.clone(),
        distance,
        se,
        max_z,
        verdict: Verdict::from_z(max_z),
        ensemble_a: ens_a,
        ensemble_b: ens_b,
    })
}

/// Real packing of `ψψ†`: the diagonal, then `(Re, Im)` of each upper entry.
fn pack_projector(psi: &[C64], out: &mut Vec<f64>) {
    out.extend(psi.iter().map(|a| a.norm_sqr()));
    for i in 0..psi.len() {
        for j in i + 1..psi.len() {
            let v = psi[i] * psi[j].conj();
            out.push(v.re);
            out.push(v.im);
        }
    }
}

fn unpack_hermitian(packed: &[f64], dim: usize) -> DMatrix<C64> {
    let mut m = DMatrix::from_element(dim, dim, ZERO);
    for i in 0..dim {
        m[(i, i)] = C64::new(packed[i], 0.0);
    }
    let mut q = dim;
    for i in 0..dim {
        for j in i + 1..dim {
            let v = C64::new(packed[q], packed[q + 1]);
            m[(i, j)] = v;
            m[(j, i)] = v.conj();
            q += 2;
        }
    }
    m
}

/// RMS over resamples of the half trace norm of `ρ̂* − ρ̂` at each sampled time.
/// Resample `r` draws its indices from the bootstrap stream of `(seed, r)`, so the
/// two arms of a paired experiment see identical index draws.
///
/// `packed[i]` holds the packed projectors of trajectory `i`, sample after sample.
fn bootstrap_se(packed: &[Vec<f64>], ens: &EnsembleReport, seed: u64, opts: &FwtOptions) -> Result<Vec<f64>> {
    let m = packed.len();
    let samples = ens.times.len();
    let dim = ens.mean_states[0].dim();
    let k = dim * dim;
    let per_resample = par_map_ordered(opts.bootstrap_resamples, opts.ensemble.workers, |r| {
        let mut rng = noise::stream(seed, r as u64, BOOTSTRAP_STREAM);
        let mut counts = vec![0u32; m];
        for _ in 0..m {
            counts[rng.random_range(0..m)] += 1;
        }
        let mut acc = vec![0.0; samples * k];
        for (traj, &c) in packed.iter().zip(&counts) {
            if c == 0 {
                continue;
            }
            let w = c as f64;
            for (a, x) in acc.iter_mut().zip(traj) {
                *a += w * x;
            }
        }
        let inv = 1.0 / m as f64;
        Ok((0..samples)
            .map(|s| {
                let mean: Vec<f64> = acc[s * k..(s + 1) * k].iter().map(|x| x * inv).collect();
                let diff = unpack_hermitian(&mean, dim) - ens.mean_states[s].matrix();
                half_trace_norm(&diff).powi(2)
            })
            .collect::<Vec<f64>>())
    })?;
    Ok((0..samples)
        .map(|s| (per_resample.iter().map(|v| v[s]).sum::<f64>() / per_resample.len() as f64).sqrt())
        .collect())
}

/// Runs the test at `dt` and again at `dt/2` over the same interval and sample times.
#[allow(clippy::too_many_arguments)]
pub fn fwt_with_pilot(
    model: &MonitoringModel,
    a: &Decomposition,
    b: &Decomposition,
    dt: f64,
    steps: usize,
    m: usize,
    seed: u64,
    opts: &FwtOptions,
) -> Result<(FWTReport, FWTReport)> {
    let coarse = fwt_experiment(model, a, b, dt, steps, m, seed, opts)?;
    let mut fine_opts = *opts;
    fine_opts.ensemble.stride = opts.ensemble.stride * 2;
    let fine = fwt_experiment(model, a, b, dt / 2.0, steps * 2, m, seed, &fine_opts)?;
    Ok((coarse, fine))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFrequency {
    /// Eigenvalue of each monitored operator on this joint eigenspace.
    pub eigenvalues: Vec<f64>,
    /// Born weight of the initial state.
    pub expected: f64,
    pub count: usize,
    pub frequency: f64,
    /// `3·√(p(1−p)/M)` with `p` the Born weight.
    pub ci_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BornReport {
    pub m: usize,
    pub outcomes: Vec<OutcomeFrequency>,
    pub unresolved: usize,
    pub unresolved_fraction: f64,
}

/// Joint eigenprojectors of commuting operators, labelled by their eigenvalues.
fn joint_eigenspaces(ops: &[&HermitianOperator]) -> Vec<(Vec<f64>, DMatrix<C64>)> {
    let dim = ops[0].dim();
    // A generic real combination separates every joint eigenspace.
    let mut combo = DMatrix::from_element(dim, dim, ZERO);
    for (k, op) in ops.iter().enumerate() {
        let w = 1.0 + (k as f64 + 1.0).sqrt() * std::f64::consts::FRAC_1_PI;
        combo += op.matrix() * C64::new(w, 0.0);
    }
    let (vals, vecs) = hilbert::hermitian_eigen(&combo);
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..vals.len() {
        match groups.last_mut() {
            Some(g) if (vals[i] - vals[*g.last().unwrap()]).abs() < 1e-8 * scale => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let mut p = DMatrix::from_element(dim, dim, ZERO);
            for &i in &g {
                let v = vecs.column(i);
                p += &v * v.adjoint();
            }
            let v0 = vecs.column(g[0]).clone_owned();
            let labels = ops
                .iter()
                .map(|op| (v0.adjoint() * op.matrix() * &v0)[(0, 0)].re)
                .collect();
            (labels, p)
        })
        .collect()
}

fn projector_weight(p: &DMatrix<C64>, psi: &[C64]) -> f64 {
    let v = nalgebra::DVector::from_column_slice(psi);
    (v.adjoint() * p * &v)[(0, 0)].re
}

/// Classifies final states of a commuting model by their dominant joint eigenspace
/// (weight above 0.99), and compares frequencies with the initial Born weights.
pub fn born_statistics(
    model: &MonitoringModel,
    initial: &QuantumState,
    dt: f64,
    steps: usize,
    m: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<BornReport> {
    let ops: Vec<&HermitianOperator> = model.channels().iter().map(|c| &c.operator).collect();
    for (k, l) in ops.iter().enumerate() {
        if model.hamiltonian().commutator_norm(l) > 1e-10 {
            return Err(Error::Precondition(format!("Hamiltonian does not commute with channel {k}")));
        }
        for (j, other) in ops.iter().enumerate().skip(k + 1) {
            if l.commutator_norm(other) > 1e-10 {
                return Err(Error::Precondition(format!("channels {k} and {j} do not commute")));
            }
        }
    }
    let spaces = joint_eigenspaces(&ops);
    let init = InitialCondition::Pure(initial.clone());
    let (_, winners) = run_ensemble_with(model, &init, dt, steps, m, seed, opts, |_, fin| {
        spaces
            .iter()
            .position(|(_, p)| projector_weight(p, fin.amplitudes()) > 0.99)
    })?;
    let mut counts = vec![0usize; spaces.len()];
    let mut unresolved = 0;
    for w in winners {
        match w {
            Some(j) => counts[j] += 1,
            None => unresolved += 1,
        }
    }
    let outcomes = spaces
        .iter()
        .zip(counts)
        .map(|((labels, p), count)| {
            let expected = projector_weight(p, initial.amplitudes()).clamp(0.0, 1.0);
            OutcomeFrequency {
                eigenvalues: labels.clone(),
                expected,
                count,
                frequency: count as f64 / m as f64,
                ci_half_width: 3.0 * (expected * (1.0 - expected) / m as f64).sqrt(),
            }
        })
        .collect();
    Ok(BornReport {
        m,
        outcomes,
        unresolved,
        unresolved_fraction: unresolved as f64 / m as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub steps: usize,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// `bias(dt_i)/bias(dt_{i+1})`
    pub ratios: Vec<f64>,
}

/// The closed master equation an ensemble of `model` should follow, if any.
pub fn reference_model(model: &MonitoringModel) -> Result<MonitoringModel> {
    match model.feedback() {
        None => Ok(model.clone()),
        Some(fb) if fb.mode == FeedbackMode::Signal => modified_me_params(model, fb.gain),
        Some(_) => Err(Error::Precondition(
            "mean-field feedback has no closed master equation to compare against".into(),
        )),
    }
}

/// Samples every `interval` of time; `interval/dt` must be a whole number.
fn stride_for(dt: f64, interval: f64) -> Result<usize> {
    let s = (interval / dt).round();
    if s < 1.0 || (s * dt - interval).abs() > 1e-9 * interval {
        return Err(Error::Precondition(format!(
            "sample interval {interval} is not a multiple of dt = {dt}"
        )));
    }
    Ok(s as usize)
}

/// Weak-order study: for each `dt` runs `T/dt` steps with `m` trajectories and takes
/// the largest trace distance to an RK4 solution at `dt_min/10` over common sample
/// times spaced `sample_interval` apart.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    model: &MonitoringModel,
    initial: &InitialCondition,
    dt_list: &[f64],
    t_final: f64,
    sample_interval: f64,
    m: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<ConvergenceReport> {
    if dt_list.len() < 2 {
        return Err(Error::Precondition("convergence study needs at least two step sizes".into()));
    }
    if dt_list.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::Precondition("dt_list must be strictly descending".into()));
    }
    let reference = reference_model(model)?;
    let dt_me = dt_list.last().unwrap() / 10.0;
    let me_steps = (t_final / dt_me).round() as usize;
    let me = run_me(&reference, &initial.density_matrix()?, dt_me, me_steps, stride_for(dt_me, sample_interval)?)?;
    let mut rows = Vec::new();
    for &dt in dt_list {
        let steps = (t_final / dt).round() as usize;
        if ((steps as f64) * dt - t_final).abs() > 1e-9 * t_final {
            return Err(Error::Precondition(format!("t_final {t_final} is not a multiple of dt = {dt}")));
        }
        let opts = EnsembleOptions {
            stride: stride_for(dt, sample_interval)?,
            workers,
            feedback_order: FeedbackOrder::MeasurementFirst,
        };
        let report = run_ensemble(model, initial, dt, steps, m, seed, &opts)?;
        let bias = report.distance_to(&me)?.into_iter().fold(0.0, f64::max);
        rows.push(ConvergenceRow { dt, steps, bias });
    }
    let ratios = rows.windows(2).map(|w| w[0].bias / w[1].bias).collect();
    Ok(ConvergenceReport { rows, ratios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub window_steps: usize,
    pub tau: f64,
    /// Variance of the window average of `S − M`.
    pub variance: f64,
    /// `1/(4λτ)`
    pub predicted: f64,
    /// Variance of the window average of the mean field itself.
    pub mean_field_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagCorrelation {
    pub lag: usize,
    pub r: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDecompositionReport {
    pub channel: usize,
    pub windows: Vec<WindowStat>,
    pub autocorrelation: Vec<LagCorrelation>,
}

/// Splits the signal of `channel` into mean field `M = ⟨L⟩` and remainder `S − M`,
/// then reports the variance of non-overlapping window averages against `1/(4λτ)`
/// and the autocorrelation of the remainder at lags `1..=max_lag`.
#[allow(clippy::too_many_arguments)]
pub fn signal_decomposition(
    model: &MonitoringModel,
    initial: &QuantumState,
    dt: f64,
    steps: usize,
    m: usize,
    seed: u64,
    channel: usize,
    window_steps: &[usize],
    max_lag: usize,
    workers: Option<usize>,
) -> Result<SignalDecompositionReport> {
    let coupling = model
        .channels()
        .get(channel)
        .ok_or_else(|| Error::Model(format!("no channel {channel}")))?
        .coupling;
    if coupling <= 0.0 {
        return Err(Error::Precondition(format!("channel {channel} is not monitored")));
    }
    if m < 2 {
        return Err(Error::Precondition(format!("ensemble size must be at least 2, got {m}")));
    }
    let topts = TrajectoryOptions {
        stride: steps,
        record_signal: true,
        keep_snapshots: false,
        feedback_order: FeedbackOrder::MeasurementFirst,
    };
    let records = par_map_ordered(m, workers, |i| {
        let r = run_trajectory(model, initial, dt, steps, seed, i as u64, &topts)
            .map_err(|e| Error::Trajectory { index: i, source: Box::new(e) })?;
        let sig = r.signal.expect("signal requested");
        let rem: Vec<f64> = sig.values[channel]
            .iter()
            .zip(&sig.mean_field[channel])
            .map(|(s, mf)| s - mf)
            .collect();
        Ok((rem, sig.mean_field[channel].clone()))
    })?;
    let mut windows = Vec::new();
    for &w in window_steps {
        if w == 0 || w > steps {
            return Err(Error::Precondition(format!("window of {w} steps does not fit {steps} steps")));
        }
        let rem = window_averages(records.iter().map(|r| r.0.as_slice()), w);
        let mf = window_averages(records.iter().map(|r| r.1.as_slice()), w);
        let tau = w as f64 * dt;
        windows.push(WindowStat {
            window_steps: w,
            tau,
            variance: stats::sample_variance(&rem),
            predicted: 1.0 / (4.0 * coupling * tau),
            mean_field_variance: stats::sample_variance(&mf),
        });
    }
    let segments: Vec<Vec<f64>> = records.into_iter().map(|r| r.0).collect();
    let autocorrelation = (1..=max_lag)
        .map(|lag| {
            let (r, se) = stats::pooled_autocorrelation(&segments, lag);
            LagCorrelation { lag, r, se }
        })
        .collect();
    Ok(SignalDecompositionReport {
        channel,
        windows,
        autocorrelation,
    })
}

fn window_averages<'a>(series: impl Iterator<Item = &'a [f64]>, w: usize) -> Vec<f64> {
    series
        .flat_map(|s| s.chunks_exact(w).map(move |c| c.iter().sum::<f64>() / w as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{qubit_preset, Channel};

    fn plus() -> QuantumState {
        QuantumState::from_real(&[1.0, 1.0]).unwrap()
    }

    #[test]
    fn rejects_single_trajectory() {
        let model = qubit_preset(1.0, 0.5).unwrap();
        let r = run_ensemble(&model, &plus().into(), 1e-3, 10, 1, 0, &EnsembleOptions::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn frozen_dynamics_give_constant_mean_and_zero_se() {
        let model = qubit_preset(0.0, 0.0).unwrap();
        let r = run_ensemble(&model, &plus().into(), 1e-3, 100, 50, 3, &EnsembleOptions::default()).unwrap();
        let rho0 = plus().projector();
        for rho in &r.mean_states {
            assert!((rho.matrix() - rho0.matrix()).iter().all(|v| v.norm() < 1e-15));
        }
        assert!(r.observables[0].se.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stratified_components_follow_weights() {
        let ic = InitialCondition::mixture(
            vec![QuantumState::basis(2, 0).unwrap(), QuantumState::basis(2, 1).unwrap()],
            vec![0.3, 0.7],
        )
        .unwrap();
        let zeros = (0..1000).filter(|&i| ic.component(i, 1000).amplitudes()[0].norm() > 0.5).count();
        assert_eq!(zeros, 300);
    }

    #[test]
    fn moments_merge_matches_direct() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..37].iter().for_each(|&x| a.push(x));
        xs[37..].iter().for_each(|&x| b.push(x));
        let merged = a.merge(b);
        let (mean, se) = stats::mean_se(&xs);
        assert!((merged.mean - mean).abs() < 1e-14);
        assert!((merged.se() - se).abs() < 1e-14);
    }

    #[test]
    fn results_do_not_depend_on_workers() {
        let model = qubit_preset(1.0, 0.5).unwrap();
        let run = |w| {
            let opts = EnsembleOptions { workers: Some(w), ..EnsembleOptions::default() };
            run_ensemble(&model, &plus().into(), 1e-3, 200, 300, 9, &opts).unwrap()
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.observables, b.observables);
        for (x, y) in a.mean_states.iter().zip(&b.mean_states) {
            assert_eq!(x.matrix(), y.matrix());
        }
    }

    #[test]
    fn trajectory_failures_carry_the_index() {
        let big = HermitianOperator::from_diagonal(&[1e200, -1e200]).unwrap();
        let model = MonitoringModel::new(HermitianOperator::zeros(2), vec![Channel::new(big, 1.0)], None).unwrap();
        let err = run_ensemble(&model, &plus().into(), 1e-1, 5, 4, 0, &EnsembleOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Trajectory { index: 0, .. }), "{err:?}");
    }

    #[test]
    fn eigenstate_born_frequency_is_one() {
        let model = qubit_preset(1.0, 0.0).unwrap();
        let psi = QuantumState::basis(2, 1).unwrap();
        let r = born_statistics(&model, &psi, 1e-2, 100, 20, 1, &EnsembleOptions::default()).unwrap();
        let out = r.outcomes.iter().find(|o| o.eigenvalues[0] < 0.0).unwrap();
        assert_eq!(out.count, 20);
        assert_eq!(r.unresolved, 0);
    }

    #[test]
    fn born_requires_commuting_hamiltonian() {
        let model = qubit_preset(1.0, 0.5).unwrap();
        let r = born_statistics(&model, &plus(), 1e-2, 10, 4, 1, &EnsembleOptions::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn joint_eigenspaces_of_two_commuting_operators() {
        let a = HermitianOperator::from_diagonal(&[1.0, 1.0, -1.0, -1.0]).unwrap();
        let b = HermitianOperator::from_diagonal(&[1.0, -1.0, 1.0, 1.0]).unwrap();
        let spaces = joint_eigenspaces(&[&a, &b]);
        assert_eq!(spaces.len(), 3);
        let ranks: Vec<f64> = spaces.iter().map(|(_, p)| p.trace().re).collect();
        assert!((ranks.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        assert!(ranks.iter().any(|r| (r - 2.0).abs() < 1e-12));
    }

    #[test]
    fn fwt_rejects_mismatched_decompositions() {
        let model = qubit_preset(1.0, 0.5).unwrap();
        let a = Decomposition::new("a", vec![QuantumState::basis(2, 0).unwrap()], vec![1.0]).unwrap();
        let b = Decomposition::new("b", vec![plus()], vec![1.0]).unwrap();
        let r = fwt_experiment(&model, &a, &b, 1e-3, 10, 4, 0, &FwtOptions::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn packing_round_trips() {
        let psi = QuantumState::new(vec![C64::new(0.3, 0.1), C64::new(-0.5, 0.7), C64::new(0.2, -0.4)]).unwrap();
        let mut v = Vec::new();
        pack_projector(psi.amplitudes(), &mut v);
        assert_eq!(v.len(), 9);
        let back = unpack_hermitian(&v, 3);
        assert!((back - psi.projector().matrix()).iter().all(|x| x.norm() < 1e-15));
    }

    #[test]
    fn verdict_bands() {
        assert_eq!(Verdict::from_z(5.0), Verdict::NotTangible);
        assert_eq!(Verdict::from_z(2.0), Verdict::Tangible);
        assert_eq!(Verdict::from_z(3.1), Verdict::Inconclusive);
    }

    #[test]
    fn convergence_needs_descending_steps() {
        let model = qubit_preset(1.0, 0.5).unwrap();
        let r = convergence_study(&model, &plus().into(), &[1e-3, 2e-3], 1.0, 0.1, 4, 0, None);
        assert!(matches!(r, Err(Error::Precondition(_))));
        let r = convergence_study(&model, &plus().into(), &[1e-3], 1.0, 0.1, 4, 0, None);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn unmonitored_convergence_bias_is_at_noise_floor() {
        // λ = 0: trajectories are deterministic, so the bias is pure Euler error, which
        // for a unitary step renormalized each step is tiny over a short interval.
        let model = qubit_preset(0.0, 0.0).unwrap();
        let r = convergence_study(&model, &plus().into(), &[2e-3, 1e-3], 0.2, 0.1, 4, 0, None).unwrap();
        assert!(r.rows.iter().all(|row| row.bias < 1e-12), "{r:?}");
    }
}
