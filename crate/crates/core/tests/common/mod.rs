//! Independent reference computations used by the integration tests.
#![allow(dead_code)]

use collapse_core::hilbert::DensityMatrix;

pub type Mat3 = [[f64; 3]; 3];

/// Bloch-vector generator of `dρ = −i[(Ω/2)σx, ρ] − (λ/2)[σz,[σz,ρ]]`.
pub fn bloch_generator(omega: f64, lambda: f64) -> Mat3 {
    [
        [-2.0 * lambda, 0.0, 0.0],
        [0.0, -2.0 * lambda, -omega],
        [0.0, omega, 0.0],
    ]
}

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// `exp(a·t)` by scaling and squaring of a Taylor series.
pub fn expm(a: &Mat3, t: f64) -> Mat3 {
    let norm: f64 = a.iter().flatten().map(|x| (x * t).abs()).sum();
    let squarings = (norm.max(1e-300).log2().ceil().max(0.0) as u32) + 4;
    let scale = t / f64::from(1u32 << squarings);
    let x: Mat3 = a.map(|row| row.map(|v| v * scale));
    let mut result = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut term = result;
    for k in 1..=24 {
        term = mul(&term, &x).map(|row| row.map(|v| v / k as f64));
        for i in 0..3 {
            for j in 0..3 {
                result[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..squarings {
        result = mul(&result, &result);
    }
    result
}

pub fn apply(m: &Mat3, r: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| (0..3).map(|k| m[i][k] * r[k]).sum())
}

/// Bloch vector of a qubit density matrix.
pub fn bloch(rho: &DensityMatrix) -> [f64; 3] {
    let c = rho.entry(0, 1);
    [2.0 * c.re, -2.0 * c.im, rho.entry(0, 0).re - rho.entry(1, 1).re]
}

/// Qubit trace distance from Bloch vectors: `|r_a − r_b| / 2`.
pub fn bloch_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    0.5 * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Exact dephased-Rabi solution at each requested time.
pub fn bloch_solution(omega: f64, lambda: f64, r0: [f64; 3], times: &[f64]) -> Vec<[f64; 3]> {
    let a = bloch_generator(omega, lambda);
    times.iter().map(|&t| apply(&expm(&a, t), r0)).collect()
}

/// Max over samples of the trace distance between ensemble means and the oracle.
pub fn max_bloch_gap(states: &[DensityMatrix], oracle: &[[f64; 3]]) -> f64 {
    states
        .iter()
        .zip(oracle)
        .map(|(s, r)| bloch_distance(bloch(s), *r))
        .fold(0.0, f64::max)
}

/// Ordinary least-squares slope.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

/// Periodic lattice distance.
pub fn ring_distance(n: usize, a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}
