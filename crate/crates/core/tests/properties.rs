use collapse_core::config::parse_config;
use collapse_core::csl::{csl_decoherence_rate, LatticeConfig};
use collapse_core::ensemble::{run_ensemble, EnsembleOptions, InitialCondition};
use collapse_core::grw::{jump_profile, run_grw_trajectory, JumpModel};
use collapse_core::hilbert::DensityTolerance;
use collapse_core::master::run_me;
use collapse_core::sse::{run_trajectory, TrajectoryOptions};
use collapse_core::{Channel, FeedbackMode, FeedbackSpec, HermitianOperator, MonitoringModel, QuantumState, C64};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn hermitian(dim: usize) -> impl Strategy<Value = HermitianOperator> {
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), dim * dim).prop_map(move |v| {
        let a = DMatrix::from_fn(dim, dim, |i, j| C64::new(v[i * dim + j].0, v[i * dim + j].1));
        HermitianOperator::new((&a + a.adjoint()) * C64::new(0.5, 0.0)).unwrap()
    })
}

fn state(dim: usize) -> impl Strategy<Value = QuantumState> {
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), dim)
        .prop_filter("nonzero", |v| v.iter().any(|(a, b)| a.abs() + b.abs() > 1e-3))
        .prop_map(|v| QuantumState::new(v.into_iter().map(|(a, b)| C64::new(a, b)).collect()).unwrap())
}

fn feedback() -> impl Strategy<Value = Option<FeedbackSpec>> {
    prop_oneof![
        Just(None),
        (-3.0f64..3.0).prop_map(|g| Some(FeedbackSpec { mode: FeedbackMode::Signal, gain: g, channels: vec![0] })),
        (-3.0f64..3.0).prop_map(|g| Some(FeedbackSpec { mode: FeedbackMode::MeanField, gain: g, channels: vec![0] })),
    ]
}

/// A model with one or two monitored channels, its dimension and a start state.
fn setup() -> impl Strategy<Value = (MonitoringModel, QuantumState)> {
    (2usize..=3).prop_flat_map(|dim| {
        (
            hermitian(dim),
            proptest::collection::vec((hermitian(dim), 0.1f64..2.0), 1..=2),
            feedback(),
            state(dim),
        )
            .prop_map(|(h, chans, fb, psi)| {
                let channels = chans.into_iter().map(|(l, c)| Channel::new(l, c)).collect();
                (MonitoringModel::new(h, channels, fb).unwrap(), psi)
            })
    })
}

fn lattice(n: usize, masses: Vec<f64>, sigma: f64) -> LatticeConfig {
    LatticeConfig {
        n_sites: n,
        masses,
        smearing_sigma: sigma,
        coupling: 1.0,
        hopping: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trajectories_stay_normalized((model, psi) in setup(), seed in any::<u64>()) {
        let opts = TrajectoryOptions { stride: 20, keep_snapshots: true, ..TrajectoryOptions::default() };
        let r = run_trajectory(&model, &psi, 1e-3, 200, seed, 0, &opts).unwrap();
        for s in r.snapshots.unwrap() {
            prop_assert!((s.norm() - 1.0).abs() < 1e-12);
        }
        for (k, ch) in model.channels().iter().enumerate() {
            let ev = ch.operator.eigenvalues();
            let (lo, hi) = (ev[0], ev[ev.len() - 1]);
            for e in &r.expectations {
                prop_assert!(e[k] >= lo - 1e-9 && e[k] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn trajectories_are_deterministic((model, psi) in setup(), seed in any::<u64>(), index in 0u64..1000) {
        let opts = TrajectoryOptions::default();
        let a = run_trajectory(&model, &psi, 1e-3, 50, seed, index, &opts).unwrap();
        let b = run_trajectory(&model, &psi, 1e-3, 50, seed, index, &opts).unwrap();
        prop_assert_eq!(a.final_state.amplitudes(), b.final_state.amplitudes());
        prop_assert_eq!(a.signal, b.signal);
    }

    #[test]
    fn master_equation_keeps_a_density_matrix((model, psi) in setup()) {
        let sol = run_me(&model.without_feedback(), &psi.projector(), 1e-3, 300, 30).unwrap();
        for rho in &sol.states {
            prop_assert!(rho.check(DensityTolerance::INTEGRATED).is_ok());
            prop_assert!((rho.trace() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn worker_count_never_changes_results((model, psi) in setup(), m in 2usize..150, workers in 1usize..5, seed in any::<u64>()) {
        let init = InitialCondition::Pure(psi);
        let run = |w| run_ensemble(&model, &init, 2e-3, 20, m, seed, &EnsembleOptions { stride: 5, workers: Some(w), ..EnsembleOptions::default() }).unwrap();
        let (a, b) = (run(1), run(workers));
        prop_assert_eq!(&a.observables, &b.observables);
        for (x, y) in a.mean_states.iter().zip(&b.mean_states) {
            prop_assert_eq!(x.matrix(), y.matrix());
        }
    }

    #[test]
    fn stratified_assignment_tracks_weights(weights in proptest::collection::vec(0.05f64..1.0, 2..5), m in 2usize..500) {
        let states: Vec<QuantumState> = (0..weights.len()).map(|k| QuantumState::basis(weights.len().max(2), k).unwrap()).collect();
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let init = InitialCondition::mixture(states.clone(), weights.clone()).unwrap();
        for (s, w) in states.iter().zip(&weights) {
            let count = (0..m).filter(|&i| init.component(i, m).amplitudes() == s.amplitudes()).count();
            prop_assert!((count as f64 - w * m as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn csl_rate_is_symmetric_and_mass_squared(n in 2usize..=12, i in 0usize..12, j in 0usize..12, mass in 0.1f64..5.0, sigma in 0.05f64..1.0) {
        let (i, j, sigma) = (i % n, j % n, sigma * n as f64 / 2.0);
        let unit = lattice(n, vec![1.0], sigma);
        let heavy = lattice(n, vec![mass], sigma);
        let r = csl_decoherence_rate(&unit, i, j).unwrap();
        prop_assert_eq!(csl_decoherence_rate(&unit, i, i).unwrap(), 0.0);
        prop_assert!((r - csl_decoherence_rate(&unit, j, i).unwrap()).abs() <= 1e-15);
        prop_assert!((csl_decoherence_rate(&heavy, i, j).unwrap() - mass * mass * r).abs() <= 1e-12 * (1.0 + mass * mass * r));
    }

    #[test]
    fn grw_profile_is_normalized(n in 2usize..=16, width in 0.1f64..10.0) {
        let g = jump_profile(n, width);
        let total: f64 = (0..n).map(|z| g[z.min(n - z)].powi(2)).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grw_trajectories_stay_normalized(n in 3usize..=8, rate in 0.1f64..20.0, width in 0.3f64..3.0, seed in any::<u64>()) {
        let model = JumpModel::on_lattice(LatticeConfig { hopping: 0.4, ..lattice(n, vec![1.0], 0.5) }, rate, width).unwrap();
        let psi = QuantumState::new(vec![C64::new(1.0, 0.5); n]).unwrap();
        let r = run_grw_trajectory(&model, &psi, 1e-3, 300, seed, 0, 50, true).unwrap();
        for s in r.snapshots.unwrap() {
            prop_assert!((s.norm() - 1.0).abs() < 1e-12);
        }
        let mut last = 0.0;
        for f in &r.flashes {
            prop_assert!(f.time >= last && f.center < n);
            last = f.time;
        }
    }

    #[test]
    fn config_echo_round_trips(dt in 1e-4f64..1e-2, steps in 1usize..5000, stride in 1usize..100, seed in any::<u64>(), coupling in 0.0f64..5.0, h in -2.0f64..2.0) {
        let text = format!(
            r#"{{ "experiment": "ensemble",
                 "model": {{ "hamiltonian": [[0, {h}], [{h}, 0]], "channels": [{{ "operator": [[1, 0], [0, -1]], "coupling": {coupling} }}] }},
                 "initial": {{ "state": [1, 0] }},
                 "numerics": {{ "dt": {dt}, "steps": {steps}, "stride": {stride} }},
                 "ensemble": {{ "trajectories": 10, "seed": {seed} }} }}"#
        );
        let first = parse_config(&text).unwrap();
        let second = parse_config(&first.to_json().to_string()).unwrap();
        prop_assert_eq!(first.to_json(), second.to_json());
        prop_assert_eq!(second.numerics.dt, dt);
        prop_assert_eq!(second.seed(), Some(seed));
    }
}
