mod common;

use collapse_core::csl::LatticeConfig;
use collapse_core::ensemble::{
    born_statistics, fwt_experiment, run_ensemble, run_grw_ensemble, Decomposition, EnsembleOptions, FwtOptions,
    InitialCondition,
};
use collapse_core::feedback::FeedbackOrder;
use collapse_core::grw::JumpModel;
use collapse_core::master::run_me;
use collapse_core::model::qubit_preset;
use collapse_core::sse::{run_trajectory, TrajectoryOptions};
use collapse_core::{Channel, FeedbackMode, FeedbackSpec, HermitianOperator, MonitoringModel, QuantumState, C64};

use common::*;

fn ket(re: &[f64]) -> QuantumState {
    QuantumState::from_real(re).unwrap()
}

fn with_feedback(model: &MonitoringModel, mode: FeedbackMode, gain: f64) -> MonitoringModel {
    model
        .with_feedback(Some(FeedbackSpec {
            mode,
            gain,
            channels: vec![0],
        }))
        .unwrap()
}

#[test]
fn signal_remainder_has_zero_mean() {
    let model = qubit_preset(1.0, 0.5).unwrap();
    let opts = TrajectoryOptions::default();
    let (dt, steps) = (1e-3, 500);
    let mut per_traj = Vec::new();
    for i in 0..400 {
        let r = run_trajectory(&model, &ket(&[1.0, 0.0]), dt, steps, 3, i, &opts).unwrap();
        let s = r.signal.unwrap();
        let sum: f64 = s.values[0].iter().zip(&s.mean_field[0]).map(|(v, m)| v - m).sum();
        per_traj.push(sum / steps as f64);
    }
    let n = per_traj.len() as f64;
    let mean = per_traj.iter().sum::<f64>() / n;
    let sd = (per_traj.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    // Each window average of the white remainder has variance 1/(4λT).
    let expected_sd = (1.0 / (4.0 * steps as f64 * dt)).sqrt();
    assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "mean {mean}, se {}", sd / n.sqrt());
    assert!((sd / expected_sd - 1.0).abs() < 0.15, "sd {sd} vs {expected_sd}");
}

#[test]
fn feedback_orderings_agree_to_first_order() {
    let model = with_feedback(&qubit_preset(1.0, 0.5).unwrap(), FeedbackMode::Signal, 2.0);
    let init = InitialCondition::Pure(ket(&[1.0, 0.0]));
    let gap = |dt: f64| {
        let steps = (1.0 / dt).round() as usize;
        let opts = |order| EnsembleOptions {
            stride: steps,
            workers: None,
            feedback_order: order,
        };
        let a = run_ensemble(&model, &init, dt, steps, 2000, 5, &opts(FeedbackOrder::MeasurementFirst)).unwrap();
        let b = run_ensemble(&model, &init, dt, steps, 2000, 5, &opts(FeedbackOrder::FeedbackFirst)).unwrap();
        bloch_distance(bloch(a.mean_states.last().unwrap()), bloch(b.mean_states.last().unwrap()))
    };
    let coarse = gap(8e-3);
    let fine = gap(1e-3);
    assert!(fine < coarse / 3.0, "coarse {coarse}, fine {fine}");
}

#[test]
fn ensemble_matches_me_for_non_involutive_operator() {
    // L² ≠ I.
    let h = HermitianOperator::from_real_rows(&[vec![0.0, 0.4, 0.0], vec![0.4, 0.3, 0.2], vec![0.0, 0.2, -0.5]]).unwrap();
    let l = HermitianOperator::from_diagonal(&[2.0, 0.5, -1.0]).unwrap();
    let model = MonitoringModel::new(h, vec![Channel::new(l.clone(), 0.7)], None).unwrap();
    let psi = QuantumState::new(vec![C64::new(0.6, 0.0), C64::new(0.0, 0.6), C64::new(0.2f64.sqrt(), 0.0)]).unwrap();
    let (dt, steps, stride) = (1e-3, 1500, 100);
    let report = run_ensemble(
        &model,
        &InitialCondition::Pure(psi.clone()),
        dt,
        steps,
        4000,
        6,
        &EnsembleOptions {
            stride,
            ..EnsembleOptions::default()
        },
    )
    .unwrap();
    let me = run_me(&model, &psi.projector(), dt / 10.0, steps * 10, stride * 10).unwrap();
    let obs = report.observable("L0").unwrap();
    for (k, rho) in me.states.iter().enumerate() {
        let want = rho.expectation(&l).unwrap();
        assert!(
            (obs.mean[k] - want).abs() <= 3.0 * obs.se[k] + 1e-12,
            "t = {}: {} vs {want} (se {})",
            report.times[k],
            obs.mean[k],
            obs.se[k]
        );
    }
}

#[test]
fn bootstrap_se_scales_as_inverse_root_m() {
    let model = with_feedback(&qubit_preset(1.0, 0.5).unwrap(), FeedbackMode::Signal, 3.0);
    let z = Decomposition::new("z", vec![ket(&[1.0, 0.0]), ket(&[0.0, 1.0])], vec![0.5, 0.5]).unwrap();
    let x = Decomposition::new("x", vec![ket(&[1.0, 1.0]), ket(&[1.0, -1.0])], vec![0.5, 0.5]).unwrap();
    let opts = FwtOptions {
        bootstrap_resamples: 300,
        ..FwtOptions::default()
    };
    let mean_se = |m| {
        let r = fwt_experiment(&model, &z, &x, 5e-3, 200, m, 8, &opts).unwrap();
        let se: Vec<f64> = r.se.iter().skip(1).copied().collect();
        se.iter().sum::<f64>() / se.len() as f64
    };
    let ratio = mean_se(1000) / mean_se(2000);
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.15, "ratio {ratio}");
}

#[test]
fn grw_first_flash_splits_evenly_between_branches() {
    let lattice = LatticeConfig {
        n_sites: 8,
        masses: vec![1.0],
        smearing_sigma: 0.5,
        coupling: 1.0,
        hopping: 0.0,
    };
    let psi = lattice.superposition(&[&[0], &[4]]).unwrap();
    let model = JumpModel::on_lattice(lattice, 2.0, 0.7).unwrap();
    let m = 4000;
    let report = run_grw_ensemble(
        &model,
        &InitialCondition::Pure(psi),
        1e-3,
        3000,
        m,
        12,
        &EnsembleOptions {
            stride: 3000,
            ..EnsembleOptions::default()
        },
    )
    .unwrap();
    let first = report.first_flashes();
    let near_zero = first.iter().filter(|f| ring_distance(8, f.center, 0) < ring_distance(8, f.center, 4)).count();
    let near_four = first.iter().filter(|f| ring_distance(8, f.center, 4) < ring_distance(8, f.center, 0)).count();
    let n = (near_zero + near_four) as f64;
    let frac = near_zero as f64 / n;
    assert!(n > 0.9 * m as f64);
    assert!((frac - 0.5).abs() <= 3.0 * (0.25 / n).sqrt(), "fraction {frac} of {n}");
}

#[test]
fn born_weights_factorize_over_independent_channels() {
    let z = [1.0, -1.0];
    let za = HermitianOperator::from_diagonal(&[z[0], z[0], z[1], z[1]]).unwrap();
    let zb = HermitianOperator::from_diagonal(&[z[0], z[1], z[0], z[1]]).unwrap();
    let model = MonitoringModel::new(
        HermitianOperator::zeros(4),
        vec![Channel::new(za, 1.0), Channel::new(zb, 1.5)],
        None,
    )
    .unwrap();
    let (pa, pb) = (0.2f64, 0.6f64);
    let a = [pa.sqrt(), (1.0 - pa).sqrt()];
    let b = [pb.sqrt(), (1.0 - pb).sqrt()];
    let psi = ket(&[a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]]);
    let m = 6000;
    let report = born_statistics(
        &model,
        &psi,
        1e-3,
        8000,
        m,
        13,
        &EnsembleOptions {
            stride: 8000,
            ..EnsembleOptions::default()
        },
    )
    .unwrap();
    assert_eq!(report.outcomes.len(), 4);
    assert!(report.unresolved_fraction < 0.01);
    for o in &report.outcomes {
        let wa = if o.eigenvalues[0] > 0.0 { pa } else { 1.0 - pa };
        let wb = if o.eigenvalues[1] > 0.0 { pb } else { 1.0 - pb };
        assert!((o.expected - wa * wb).abs() < 1e-10);
        assert!((o.frequency - wa * wb).abs() <= o.ci_half_width, "{o:?}");
    }
}
