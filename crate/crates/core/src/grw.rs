//! GRW-style jump unravelling on the lattice, with an explicit flash record.
//!
//! Each particle suffers localization jumps at rate `jump_rate`. A jump of particle
//! `p` centred at site `z` multiplies the state by `G_z`, the Gaussian profile
//! `∝ exp(−d(z, s_p)²/(2w²))` with `w` the localization width. The profiles are
//! normalized so that `Σ_z G_z² = 1`, which makes the centre distribution
//! `P(z) = ‖G_z ψ‖²` exact and every position-diagonal state a fixed point of the
//! ensemble dynamics. A flash records when, on which particle and where a jump hit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csl::{lattice_distance, LatticeConfig};
use crate::error::{Error, Result};
use crate::hilbert::{self, DensityMatrix, HermitianOperator, QuantumState, C64, ZERO};
use crate::master::{Generator, MESolution};
use crate::model::{Channel, MonitoringModel};
use crate::noise::{self, JUMP_STREAM};
use crate::sse::{sample_steps, TrajectoryResult};

const MAX_JUMP_PROBABILITY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlashEvent {
    pub time: f64,
    pub particle: usize,
    pub center: usize,
}

#[derive(Debug, Clone)]
pub struct JumpModel {
    hamiltonian: HermitianOperator,
    jump_rate: f64,
    localization_width: f64,
    lattice: LatticeConfig,
    /// Amplitude profile by lattice distance.
    profile: Vec<f64>,
    /// `site_of[p][i]`: site of particle `p` in basis configuration `i`.
    site_of: Vec<Vec<usize>>,
}

impl JumpModel {
    pub fn new(
        hamiltonian: HermitianOperator,
        jump_rate: f64,
        localization_width: f64,
        lattice: LatticeConfig,
    ) -> Result<Self> {
        lattice.validate()?;
        if hamiltonian.dim() != lattice.dim() {
            return Err(Error::dim("jump model Hamiltonian", lattice.dim(), hamiltonian.dim()));
        }
        if !(jump_rate >= 0.0) || !jump_rate.is_finite() {
            return Err(Error::Domain(format!("jump_rate must be finite and >= 0, got {jump_rate}")));
        }
        if !(localization_width > 0.0) || !localization_width.is_finite() {
            return Err(Error::Domain(format!(
                "localization_width must be finite and > 0, got {localization_width}"
            )));
        }
        let profile = jump_profile(lattice.n_sites, localization_width);
        let dim = lattice.dim();
        let configs: Vec<Vec<usize>> = (0..dim).map(|i| lattice.sites_of(i)).collect();
        let site_of = (0..lattice.particles())
            .map(|p| configs.iter().map(|c| c[p]).collect())
            .collect();
        Ok(Self {
            hamiltonian,
            jump_rate,
            localization_width,
            lattice,
            profile,
            site_of,
        })
    }

    /// Jump model on the lattice's hopping Hamiltonian.
    pub fn on_lattice(lattice: LatticeConfig, jump_rate: f64, localization_width: f64) -> Result<Self> {
        let h = crate::csl::hopping_hamiltonian(&lattice)?;
        Self::new(h, jump_rate, localization_width, lattice)
    }

    pub fn hamiltonian(&self) -> &HermitianOperator {
        &self.hamiltonian
    }

    pub fn jump_rate(&self) -> f64 {
        self.jump_rate
    }

    pub fn localization_width(&self) -> f64 {
        self.localization_width
    }

    pub fn lattice(&self) -> &LatticeConfig {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    /// `G_z(s)` for a particle at site `s`.
    pub fn profile(&self, center: usize, site: usize) -> f64 {
        self.profile[lattice_distance(self.lattice.n_sites, center, site)]
    }

    /// The multiplication operator `G_z` of particle `p`, as a diagonal.
    pub fn jump_operator(&self, particle: usize, center: usize) -> Vec<f64> {
        self.site_of[particle].iter().map(|&s| self.profile(center, s)).collect()
    }

    /// Diffusive model with the same master equation: every `G_z` of every particle
    /// monitored with coupling `jump_rate`, using `Σ_z G_z² = 1`.
    pub fn diffusive_counterpart(&self) -> Result<MonitoringModel> {
        let mut channels = Vec::new();
        for p in 0..self.lattice.particles() {
            for z in 0..self.lattice.n_sites {
                channels.push(Channel::new(
                    HermitianOperator::from_diagonal(&self.jump_operator(p, z))?,
                    self.jump_rate,
                ));
            }
        }
        MonitoringModel::new(self.hamiltonian.clone(), channels, None)
    }

    fn generator(&self) -> Generator {
        let mut g = Generator::new(&self.hamiltonian);
        if self.jump_rate > 0.0 {
            let n = self.lattice.n_sites;
            // overlap[d(a, b)] = Σ_z G_z(a) G_z(b)
            let overlap: Vec<f64> = (0..=n / 2)
                .map(|d| (0..n).map(|z| self.profile(z, 0) * self.profile(z, d)).sum())
                .collect();
            g.add_rates(|i, j| {
                self.site_of
                    .iter()
                    .map(|sites| self.jump_rate * (1.0 - overlap[lattice_distance(n, sites[i], sites[j])]))
                    .sum()
            });
        }
        g
    }
}

/// Amplitudes `G(d)` with `Σ_z G(d(z, s))² = 1` on a ring of `n` sites.
pub fn jump_profile(n_sites: usize, width: f64) -> Vec<f64> {
    let sq = |d: usize| (-(d as f64).powi(2) / (width * width)).exp();
    let total: f64 = (0..n_sites).map(|z| sq(lattice_distance(n_sites, z, 0))).sum();
    (0..=n_sites / 2).map(|d| (sq(d) / total).sqrt()).collect()
}

struct GrwStepper<'a> {
    model: &'a JumpModel,
    jump_probability: f64,
    hpsi: Vec<C64>,
    weights: Vec<f64>,
}

impl<'a> GrwStepper<'a> {
    fn new(model: &'a JumpModel, dt: f64) -> Result<Self> {
        let jump_probability = model.jump_rate * model.lattice.particles() as f64 * dt;
        if jump_probability >= MAX_JUMP_PROBABILITY {
            return Err(Error::Precondition(format!(
                "jump probability per step {jump_probability} must stay below {MAX_JUMP_PROBABILITY}; reduce dt"
            )));
        }
        Ok(Self {
            model,
            jump_probability,
            hpsi: vec![ZERO; model.dim()],
            weights: vec![0.0; model.lattice.n_sites],
        })
    }

    fn step(&mut self, psi: &mut [C64], dt: f64, t: f64, rng: &mut ChaCha8Rng) -> Result<Option<FlashEvent>> {
        let m = self.model;
        let u: f64 = rng.random();
        let flash = if u < self.jump_probability {
            let particle = rng.random_range(0..m.lattice.particles());
            let sites = &m.site_of[particle];
            for (z, w) in self.weights.iter_mut().enumerate() {
                *w = psi
                    .iter()
                    .zip(sites)
                    .map(|(a, &s)| a.norm_sqr() * m.profile(z, s).powi(2))
                    .sum();
            }
            let total: f64 = self.weights.iter().sum();
            let mut target = rng.random::<f64>() * total;
            let mut center = self.weights.len() - 1;
            for (z, w) in self.weights.iter().enumerate() {
                if target < *w {
                    center = z;
                    break;
                }
                target -= w;
            }
            for (a, &s) in psi.iter_mut().zip(sites) {
                *a *= m.profile(center, s);
            }
            Some(FlashEvent { time: t, particle, center })
        } else {
            if !m.hamiltonian.is_zero() {
                m.hamiltonian.apply(psi, &mut self.hpsi);
                for (p, h) in psi.iter_mut().zip(&self.hpsi) {
                    *p += C64::new(h.im * dt, -h.re * dt);
                }
            }
            None
        };
        let norm = hilbert::norm(psi);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Internal("state norm vanished in jump step".into()));
        }
        for a in psi.iter_mut() {
            *a /= norm;
        }
        Ok(flash)
    }
}

/// One jump-or-unitary step starting at time `t`.
pub fn grw_step(
    state: &QuantumState,
    model: &JumpModel,
    dt: f64,
    t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(QuantumState, Option<FlashEvent>)> {
    if state.dim() != model.dim() {
        return Err(Error::dim("jump step state", model.dim(), state.dim()));
    }
    if !(dt > 0.0) {
        return Err(Error::Precondition(format!("dt must be positive, got {dt}")));
    }
    let mut stepper = GrwStepper::new(model, dt)?;
    let mut psi = state.amplitudes().to_vec();
    let flash = stepper.step(&mut psi, dt, t, rng)?;
    Ok((QuantumState::from_normalized(psi), flash))
}

/// `−i[H,ρ] + rate Σ_p (Σ_z G_z ρ G_z − ρ)`
pub fn grw_me_derivative(rho: &DensityMatrix, model: &JumpModel) -> Result<nalgebra::DMatrix<C64>> {
    if rho.dim() != model.dim() {
        return Err(Error::dim("density matrix", model.dim(), rho.dim()));
    }
    Ok(model.generator().apply(rho.matrix()))
}

pub fn run_grw_me(model: &JumpModel, rho0: &DensityMatrix, dt: f64, steps: usize, stride: usize) -> Result<MESolution> {
    model.generator().integrate(rho0, dt, steps, stride)
}

/// One jump trajectory with its flash log. Jump decisions use the trajectory's
/// dedicated jump stream.
pub fn run_grw_trajectory(
    model: &JumpModel,
    initial: &QuantumState,
    dt: f64,
    steps: usize,
    seed: u64,
    trajectory_index: u64,
    stride: usize,
    keep_snapshots: bool,
) -> Result<TrajectoryResult> {
    let mut snaps = keep_snapshots.then(Vec::new);
    let mut times = Vec::new();
    let (flashes, final_state) = integrate_grw(model, initial, dt, steps, seed, trajectory_index, stride, |n, psi| {
        times.push(n as f64 * dt);
        if let Some(s) = snaps.as_mut() {
            s.push(QuantumState::from_normalized(psi.to_vec()));
        }
    })?;
    let expectations = vec![Vec::new(); times.len()];
    Ok(TrajectoryResult {
        times,
        expectations,
        snapshots: snaps,
        signal: None,
        flashes,
        final_state,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate_grw(
    model: &JumpModel,
    initial: &QuantumState,
    dt: f64,
    steps: usize,
    seed: u64,
    trajectory_index: u64,
    stride: usize,
    mut on_sample: impl FnMut(usize, &[C64]),
) -> Result<(Vec<FlashEvent>, QuantumState)> {
    if initial.dim() != model.dim() {
        return Err(Error::dim("initial state", model.dim(), initial.dim()));
    }
    if steps == 0 {
        return Err(Error::Precondition("steps must be at least 1".into()));
    }
    let mut stepper = GrwStepper::new(model, dt)?;
    let mut rng = noise::stream(seed, trajectory_index, JUMP_STREAM);
    let samples = sample_steps(steps, stride);
    let mut next_sample = 0;
    let mut psi = initial.amplitudes().to_vec();
    let mut flashes = Vec::new();
    for n in 0..steps {
        if samples[next_sample] == n {
            on_sample(n, &psi);
            next_sample += 1;
        }
        if let Some(f) = stepper.step(&mut psi, dt, n as f64 * dt, &mut rng)? {
            flashes.push(f);
        }
    }
    on_sample(steps, &psi);
    Ok((flashes, QuantumState::from_normalized(psi)))
}
