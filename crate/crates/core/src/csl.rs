//! Smeared mass-density operators on a periodic 1-D lattice.
//!
//! For cell `c` the operator is `F_c = Σ_p m_p Σ_s G_σ(d(c, s)) P_{p,s}`, with `P_{p,s}`
//! the projector of particle `p` onto site `s` and `d` the periodic lattice distance.
//! The kernel is normalized on the lattice, `Σ_c G_σ(d(c, s)) = 1`, so that
//! `Σ_c F_c = (Σ_p m_p)·1`. Monitoring every `F_c` with coupling `λ = γ/m0²` gives the
//! CSL dynamics; the per-cell signals are the smeared-density record.
//!
//! Particles are distinguishable. The basis index of a configuration
//! `(s_0, …, s_{P−1})` is `Σ_p s_p · n^(P−1−p)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{HermitianOperator, QuantumState, C64};
use crate::model::{Channel, MonitoringModel};

pub const MAX_SITES: usize = 16;
pub const MAX_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub n_sites: usize,
    /// Particle masses in units of the reference mass.
    pub masses: Vec<f64>,
    /// Gaussian smearing width in lattice units.
    pub smearing_sigma: f64,
    /// Per-cell monitoring coupling (γ/m0² in dimensionless units).
    pub coupling: f64,
    /// Nearest-neighbour hopping amplitude of the lattice Hamiltonian.
    #[serde(default)]
    pub hopping: f64,
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 2 || self.n_sites > MAX_SITES {
            return Err(Error::Model(format!(
                "n_sites must be in 2..={MAX_SITES}, got {}",
                self.n_sites
            )));
        }
        if self.masses.is_empty() {
            return Err(Error::Model("at least one particle is required".into()));
        }
        if let Some(m) = self.masses.iter().find(|m| !(**m > 0.0) || !m.is_finite()) {
            return Err(Error::Domain(format!("particle mass must be positive, got {m}")));
        }
        let dim = (self.n_sites as f64).powi(self.masses.len() as i32);
        if dim > MAX_DIM as f64 {
            return Err(Error::Model(format!(
                "Hilbert dimension {}^{} exceeds {MAX_DIM}",
                self.n_sites,
                self.masses.len()
            )));
        }
        if !(self.smearing_sigma > 0.0) || self.smearing_sigma >= self.n_sites as f64 / 2.0 {
            return Err(Error::Domain(format!(
                "smearing_sigma must be in (0, n_sites/2), got {}",
                self.smearing_sigma
            )));
        }
        if !(self.coupling >= 0.0) || !self.coupling.is_finite() {
            return Err(Error::Domain(format!("coupling must be >= 0, got {}", self.coupling)));
        }
        if !self.hopping.is_finite() {
            return Err(Error::Domain("hopping must be finite".into()));
        }
        Ok(())
    }

    pub fn particles(&self) -> usize {
        self.masses.len()
    }

    pub fn dim(&self) -> usize {
        self.n_sites.pow(self.masses.len() as u32)
    }

    pub fn basis_index(&self, sites: &[usize]) -> Result<usize> {
        if sites.len() != self.particles() || sites.iter().any(|&s| s >= self.n_sites) {
            return Err(Error::Model(format!("invalid site configuration {sites:?}")));
        }
        Ok(sites.iter().fold(0, |acc, &s| acc * self.n_sites + s))
    }

    pub fn sites_of(&self, index: usize) -> Vec<usize> {
        let mut sites = vec![0; self.particles()];
        let mut rest = index;
        for s in sites.iter_mut().rev() {
            *s = rest % self.n_sites;
            rest /= self.n_sites;
        }
        sites
    }

    /// The product state with particle `p` at `sites[p]`.
    pub fn position_state(&self, sites: &[usize]) -> Result<QuantumState> {
        QuantumState::basis(self.dim(), self.basis_index(sites)?)
    }

    /// Equal-weight superposition of the given configurations.
    pub fn superposition(&self, configurations: &[&[usize]]) -> Result<QuantumState> {
        let mut amps = vec![C64::new(0.0, 0.0); self.dim()];
        for c in configurations {
            amps[self.basis_index(c)?] += C64::new(1.0, 0.0);
        }
        QuantumState::new(amps)
    }
}

/// Minimum-image distance between sites on a ring of `n` sites.
pub fn lattice_distance(n: usize, a: usize, b: usize) -> usize {
    let d = a.abs_diff(b) % n;
    d.min(n - d)
}

/// Lattice-normalized Gaussian `G_σ(d)` for `d = 0..=n/2`.
pub fn smearing_kernel(n_sites: usize, sigma: f64) -> Vec<f64> {
    let raw = |d: usize| (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp();
    let total: f64 = (0..n_sites).map(|c| raw(lattice_distance(n_sites, c, 0))).sum();
    (0..=n_sites / 2).map(|d| raw(d) / total).collect()
}

/// One smeared mass-density operator per lattice cell, all diagonal.
#[derive(Debug, Clone)]
pub struct MassDensityFamily {
    pub ops: Vec<HermitianOperator>,
    /// `eigenvalues[c][i]`: value of `F_c` on basis configuration `i`.
    pub eigenvalues: Vec<Vec<f64>>,
}

pub fn build_mass_density_ops(config: &LatticeConfig) -> Result<MassDensityFamily> {
    config.validate()?;
    let n = config.n_sites;
    let kernel = smearing_kernel(n, config.smearing_sigma);
    let dim = config.dim();
    let configurations: Vec<Vec<usize>> = (0..dim).map(|i| config.sites_of(i)).collect();
    let eigenvalues: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            configurations
                .iter()
                .map(|sites| {
                    sites
                        .iter()
                        .zip(&config.masses)
                        .map(|(&s, m)| m * kernel[lattice_distance(n, c, s)])
                        .sum()
                })
                .collect()
        })
        .collect();
    let ops = eigenvalues
        .iter()
        .map(|d| HermitianOperator::from_diagonal(d))
        .collect::<Result<Vec<_>>>()?;
    Ok(MassDensityFamily { ops, eigenvalues })
}

/// Off-diagonal decay rate `Σ_c (λ/2)(f_c(i) − f_c(j))²` between basis configurations.
pub fn csl_decoherence_rate(config: &LatticeConfig, i: usize, j: usize) -> Result<f64> {
    let family = build_mass_density_ops(config)?;
    if i >= config.dim() || j >= config.dim() {
        return Err(Error::Model(format!("basis labels ({i}, {j}) out of range")));
    }
    Ok(family
        .eigenvalues
        .iter()
        .map(|f| 0.5 * config.coupling * (f[i] - f[j]).powi(2))
        .sum())
}

/// `−J Σ_p Σ_s (|s+1⟩⟨s| + h.c.)` acting on each particle.
pub fn hopping_hamiltonian(config: &LatticeConfig) -> Result<HermitianOperator> {
    config.validate()?;
    let dim = config.dim();
    let n = config.n_sites;
    let mut m = nalgebra::DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
    if config.hopping != 0.0 {
        for i in 0..dim {
            let sites = config.sites_of(i);
            for p in 0..config.particles() {
                let mut moved = sites.clone();
                moved[p] = (sites[p] + 1) % n;
                let j = config.basis_index(&moved)?;
                m[(j, i)] -= C64::new(config.hopping, 0.0);
                m[(i, j)] -= C64::new(config.hopping, 0.0);
            }
        }
    }
    HermitianOperator::new(m)
}

/// Hopping Hamiltonian plus one monitored channel per cell.
pub fn csl_model(config: &LatticeConfig) -> Result<MonitoringModel> {
    let family = build_mass_density_ops(config)?;
    let channels = family
        .ops
        .into_iter()
        .map(|op| Channel::new(op, config.coupling))
        .collect();
    MonitoringModel::new(hopping_hamiltonian(config)?, channels, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(mass: f64, sigma: f64) -> LatticeConfig {
        LatticeConfig {
            n_sites: 12,
            masses: vec![mass],
            smearing_sigma: sigma,
            coupling: 1.0,
            hopping: 0.0,
        }
    }

    #[test]
    fn narrow_kernel_gives_site_projectors() {
        let fam = build_mass_density_ops(&one(1.0, 0.05)).unwrap();
        for (c, f) in fam.eigenvalues.iter().enumerate() {
            for (i, v) in f.iter().enumerate() {
                let want = if i == c { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn operators_scale_linearly_with_mass() {
        let a = build_mass_density_ops(&one(1.0, 0.8)).unwrap();
        let b = build_mass_density_ops(&one(2.5, 0.8)).unwrap();
        for (fa, fb) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            for (x, y) in fa.iter().zip(fb) {
                assert!((2.5 * x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_pinned_particles() {
        let cfg = LatticeConfig {
            n_sites: 6,
            masses: vec![1.0, 2.0],
            smearing_sigma: 0.7,
            coupling: 1.0,
            hopping: 0.0,
        };
        let fam = build_mass_density_ops(&cfg).unwrap();
        let psi = cfg.position_state(&[0, 0]).unwrap();
        let g0 = smearing_kernel(6, 0.7)[0];
        let val = crate::hilbert::expectation(&psi, &fam.ops[0]).unwrap();
        assert!((val - 3.0 * g0).abs() < 1e-14);
    }

    #[test]
    fn densities_sum_to_total_mass() {
        let cfg = LatticeConfig {
            n_sites: 5,
            masses: vec![1.0, 3.0],
            smearing_sigma: 1.1,
            coupling: 1.0,
            hopping: 0.0,
        };
        let fam = build_mass_density_ops(&cfg).unwrap();
        for i in 0..cfg.dim() {
            let total: f64 = fam.eigenvalues.iter().map(|f| f[i]).sum();
            assert!((total - 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rate_examples() {
        let cfg = one(1.0, 0.5);
        assert_eq!(csl_decoherence_rate(&cfg, 3, 3).unwrap(), 0.0);

        // Far separation: by direct kernel summation, rate = λ m² Σ_d G(d)² over the ring.
        let kernel = smearing_kernel(12, 0.5);
        let k_sum: f64 = (0..12).map(|c| kernel[lattice_distance(12, c, 0)].powi(2)).sum();
        let r1 = csl_decoherence_rate(&cfg, 0, 6).unwrap();
        assert!((r1 - k_sum).abs() / k_sum < 1e-6);
        let r2 = csl_decoherence_rate(&one(2.0, 0.5), 0, 6).unwrap();
        assert!((r2 / r1 - 4.0).abs() < 1e-12);
        // Independent of distance once d ≫ σ.
        let r_5 = csl_decoherence_rate(&cfg, 0, 5).unwrap();
        assert!((r_5 - r1).abs() / r1 < 1e-6);
    }

    #[test]
    fn rate_vanishes_continuously_with_separation() {
        let cfg = one(1.0, 2.0);
        let rates: Vec<f64> = (0..=6).map(|d| csl_decoherence_rate(&cfg, 0, d).unwrap()).collect();
        assert_eq!(rates[0], 0.0);
        assert!(rates.windows(2).all(|w| w[0] < w[1]));
        assert!(rates[1] < 0.1 * rates[6]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = one(1.0, 0.5);
        cfg.n_sites = 17;
        assert!(cfg.validate().is_err());
        let cfg = LatticeConfig {
            n_sites: 16,
            masses: vec![1.0, 1.0],
            smearing_sigma: 0.5,
            coupling: 1.0,
            hopping: 0.0,
        };
        assert!(cfg.validate().is_ok());
        let mut three = cfg.clone();
        three.masses.push(1.0);
        assert!(three.validate().is_err());
        let mut wide = one(1.0, 6.0);
        assert!(wide.validate().is_err());
        wide.smearing_sigma = 5.9;
        assert!(wide.validate().is_ok());
    }

    #[test]
    fn basis_round_trip_and_hopping() {
        let cfg = LatticeConfig {
            n_sites: 4,
            masses: vec![1.0, 1.0],
            smearing_sigma: 0.5,
            coupling: 1.0,
            hopping: 0.25,
        };
        for i in 0..cfg.dim() {
            assert_eq!(cfg.basis_index(&cfg.sites_of(i)).unwrap(), i);
        }
        let h = hopping_hamiltonian(&cfg).unwrap();
        let a = cfg.basis_index(&[0, 2]).unwrap();
        let b = cfg.basis_index(&[1, 2]).unwrap();
        assert_eq!(h.matrix()[(a, b)].re, -0.25);
        let c = cfg.basis_index(&[1, 3]).unwrap();
        assert_eq!(h.matrix()[(a, c)].re, 0.0);
    }
}
