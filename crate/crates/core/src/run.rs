//! Runs a validated configuration end to end and assembles its output.

use serde_json::{json, Value};

use crate::config::{ExperimentKind, InitialSpec, RunConfig};
use crate::csl::csl_decoherence_rate;
use crate::ensemble::{
    convergence_study, fwt_experiment, fwt_with_pilot, reference_model, run_ensemble, run_grw_ensemble,
    EnsembleOptions, EnsembleReport, FWTReport, FwtOptions,
};
use crate::error::{Error, Result};
use crate::feedback::FeedbackOrder;
use crate::grw::run_grw_me;
use crate::master::{fitted_decay_rate, run_me, MESolution};
use crate::output::{RunOutput, TimeSeriesRow};
use crate::stats;

pub const SOFTWARE_NAME: &str = "collapse-lab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Runs `config`; `workers` only changes speed.
pub fn run_experiment(config: &RunConfig, workers: Option<usize>) -> Result<RunOutput> {
    let mut out = match config.experiment {
        ExperimentKind::Me => run_me_experiment(config)?,
        ExperimentKind::Ensemble | ExperimentKind::Csl => run_ensemble_experiment(config, workers)?,
        ExperimentKind::Fwt => run_fwt_experiment(config, workers)?,
        ExperimentKind::Grw => run_grw_experiment(config, workers)?,
        ExperimentKind::Convergence => run_convergence_experiment(config, workers)?,
    };
    out.summary = json!({
        "software": { "name": SOFTWARE_NAME, "version": VERSION },
        "experiment": config.experiment.as_str(),
        "seed": config.seed(),
        "config": config.to_json(),
        "results": out.summary,
    });
    Ok(out)
}

fn options(config: &RunConfig, workers: Option<usize>) -> EnsembleOptions {
    EnsembleOptions {
        stride: config.numerics.stride,
        workers,
        feedback_order: FeedbackOrder::MeasurementFirst,
    }
}

fn ensemble_size(config: &RunConfig) -> Result<(usize, u64)> {
    let e = config
        .ensemble
        .as_ref()
        .ok_or_else(|| Error::Model("missing ensemble section".into()))?;
    Ok((e.trajectories, e.seed))
}

fn series_rows(report: &EnsembleReport, prefix: &str, rows: &mut Vec<TimeSeriesRow>) {
    for o in &report.observables {
        for ((t, mean), se) in report.times.iter().zip(&o.mean).zip(&o.se) {
            rows.push(TimeSeriesRow {
                time: *t,
                observable: format!("{prefix}{}", o.name),
                mean: *mean,
                se: *se,
            });
        }
    }
}

fn solution_states(sol: &MESolution) -> Vec<(f64, crate::hilbert::DensityMatrix)> {
    sol.times.iter().copied().zip(sol.states.iter().cloned()).collect()
}

fn report_states(r: &EnsembleReport) -> Vec<(f64, crate::hilbert::DensityMatrix)> {
    r.times.iter().copied().zip(r.mean_states.iter().cloned()).collect()
}

fn run_me_experiment(config: &RunConfig) -> Result<RunOutput> {
    let model = reference_model(&config.monitoring_model()?)?;
    let rho0 = config.initial_condition()?.density_matrix()?;
    let sol = run_me(&model, &rho0, config.numerics.dt, config.steps(), config.numerics.stride)?;
    let mut rows = Vec::new();
    for (k, ch) in model.channels().iter().enumerate() {
        for (t, rho) in sol.times.iter().zip(&sol.states) {
            rows.push(TimeSeriesRow {
                time: *t,
                observable: format!("L{k}"),
                mean: rho.expectation(&ch.operator)?,
                se: 0.0,
            });
        }
    }
    let last = sol.last();
    Ok(RunOutput {
        timeseries: rows,
        states: solution_states(&sol),
        flashes: None,
        summary: json!({
            "samples": sol.times.len(),
            "final_time": sol.times.last(),
            "final_purity": last.purity(),
            "final_min_eigenvalue": last.min_eigenvalue(),
        }),
    })
}

fn run_ensemble_experiment(config: &RunConfig, workers: Option<usize>) -> Result<RunOutput> {
    let model = config.monitoring_model()?;
    let initial = config.initial_condition()?;
    let (m, seed) = ensemble_size(config)?;
    let (dt, steps, stride) = (config.numerics.dt, config.steps(), config.numerics.stride);
    let mut report = run_ensemble(&model, &initial, dt, steps, m, seed, &options(config, workers))?;

    let mut summary = json!({ "trajectories": m });
    let reference = match model.feedback() {
        None => Some("master_equation"),
        Some(fb) if fb.mode == crate::model::FeedbackMode::Signal => Some("modified_master_equation"),
        Some(_) => None,
    };
    let mut me = None;
    if let Some(kind) = reference {
        let sol = run_me(&reference_model(&model)?, &initial.density_matrix()?, dt, steps, stride)?;
        let max = report.attach_reference(&sol)?;
        summary["reference"] = json!(kind);
        summary["max_trace_distance_to_reference"] = json!(max);
        summary["trace_distance_to_reference"] = json!(report.reference_distance);
        me = Some(sol);
    }
    if config.experiment == ExperimentKind::Csl {
        summary["csl"] = csl_summary(config, &report, me.as_ref())?;
    }
    let mut rows = Vec::new();
    series_rows(&report, "", &mut rows);
    Ok(RunOutput {
        timeseries: rows,
        states: report_states(&report),
        flashes: None,
        summary,
    })
}

/// Analytic and fitted decay rates of the coherence between two lattice configurations.
fn csl_summary(config: &RunConfig, report: &EnsembleReport, me: Option<&MESolution>) -> Result<Value> {
    let (Some(lattice), InitialSpec::Sites(configs)) = (&config.lattice, &config.initial) else {
        return Ok(Value::Null);
    };
    if configs.len() != 2 {
        return Ok(Value::Null);
    }
    let i = lattice.basis_index(&configs[0])?;
    let j = lattice.basis_index(&configs[1])?;
    let analytic = csl_decoherence_rate(lattice, i, j)?;
    let coherence: Vec<f64> = report.mean_states.iter().map(|r| r.entry(i, j).norm()).collect();
    let monte_carlo = -stats::log_linear_slope(&report.times, &coherence);
    Ok(json!({
        "configurations": [i, j],
        "analytic_rate": analytic,
        "master_equation_rate": me.map(|s| fitted_decay_rate(s, i, j)),
        "monte_carlo_rate": monte_carlo,
    }))
}

fn fwt_json(r: &FWTReport) -> Value {
    json!({
        "labels": [r.labels.0, r.labels.1],
        "verdict": r.verdict.as_str(),
        "max_z": r.max_z,
        "times": r.times,
        "distance": r.distance,
        "se": r.se,
    })
}

fn run_fwt_experiment(config: &RunConfig, workers: Option<usize>) -> Result<RunOutput> {
    let model = config.monitoring_model()?;
    let (a, b) = config.decompositions()?;
    let (m, seed) = ensemble_size(config)?;
    let spec = config
        .fwt
        .as_ref()
        .ok_or_else(|| Error::Model("missing fwt section".into()))?;
    let opts = FwtOptions {
        ensemble: options(config, workers),
        bootstrap_resamples: spec.bootstrap_resamples,
    };
    let (dt, steps) = (config.numerics.dt, config.steps());
    let (main, pilot) = if spec.pilot {
        let (coarse, fine) = fwt_with_pilot(&model, &a, &b, dt, steps, m, seed, &opts)?;
        (coarse, Some(fine))
    } else {
        (fwt_experiment(&model, &a, &b, dt, steps, m, seed, &opts)?, None)
    };

    let mut rows = Vec::new();
    series_rows(&main.ensemble_a, &format!("{}:", main.labels.0), &mut rows);
    series_rows(&main.ensemble_b, &format!("{}:", main.labels.1), &mut rows);
    for ((t, d), se) in main.times.iter().zip(&main.distance).zip(&main.se) {
        rows.push(TimeSeriesRow {
            time: *t,
            observable: "trace_distance".into(),
            mean: *d,
            se: *se,
        });
    }
    let mut summary = fwt_json(&main);
    summary["trajectories"] = json!(m);
    summary["bootstrap_resamples"] = json!(spec.bootstrap_resamples);
    if let Some(p) = &pilot {
        summary["pilot"] = fwt_json(p);
        summary["pilot_agrees"] = json!(p.verdict == main.verdict);
    }
    let mut states = report_states(&main.ensemble_a);
    states.extend(report_states(&main.ensemble_b));
    Ok(RunOutput {
        timeseries: rows,
        states,
        flashes: None,
        summary,
    })
}

fn run_grw_experiment(config: &RunConfig, workers: Option<usize>) -> Result<RunOutput> {
    let model = config.jump_model()?;
    let initial = config.initial_condition()?;
    let (m, seed) = ensemble_size(config)?;
    let (dt, steps, stride) = (config.numerics.dt, config.steps(), config.numerics.stride);
    let mut report = run_grw_ensemble(&model, &initial, dt, steps, m, seed, &options(config, workers))?;
    let sol = run_grw_me(&model, &initial.density_matrix()?, dt, steps, stride)?;
    let max = report.ensemble.attach_reference(&sol)?;

    let counts: Vec<f64> = report.flash_counts().into_iter().map(|c| c as f64).collect();
    let (mean, se) = stats::mean_se(&counts);
    let t_final = steps as f64 * dt;
    let expected = model.jump_rate() * model.lattice().particles() as f64 * t_final;
    let mut summary = json!({
        "trajectories": m,
        "flash_count_mean": mean,
        "flash_count_mean_se": se,
        "flash_count_variance": stats::sample_variance(&counts),
        "poisson_mean": expected,
        "max_trace_distance_to_reference": max,
        "trace_distance_to_reference": report.ensemble.reference_distance,
    });
    if model.hamiltonian().is_zero() {
        let first = report.first_flashes();
        if !first.is_empty() {
            let probs = first_flash_distribution(&model, &initial.density_matrix()?);
            let mut observed = vec![0u64; probs.len()];
            for f in &first {
                observed[f.center] += 1;
            }
            let (stat, dof, p) = stats::chi_square_test(&observed, &probs);
            summary["first_flash_chi_square"] = json!({
                "flashes": first.len(),
                "statistic": stat,
                "dof": dof,
                "p_value": p,
            });
        }
    }
    let mut rows = Vec::new();
    series_rows(&report.ensemble, "", &mut rows);
    let flashes = report
        .flashes
        .iter()
        .enumerate()
        .flat_map(|(i, fs)| fs.iter().map(move |f| (i, *f)))
        .collect();
    Ok(RunOutput {
        timeseries: rows,
        states: report_states(&report.ensemble),
        flashes: Some(flashes),
        summary,
    })
}

/// Centre distribution of the first flash when `H = 0`: particle chosen uniformly,
/// centre with weight `Tr(G_z² ρ0)`.
pub fn first_flash_distribution(model: &crate::grw::JumpModel, rho0: &crate::hilbert::DensityMatrix) -> Vec<f64> {
    let lattice = model.lattice();
    let particles = lattice.particles();
    let mut probs = vec![0.0; lattice.n_sites];
    for p in 0..particles {
        for (z, prob) in probs.iter_mut().enumerate() {
            let g = model.jump_operator(p, z);
            *prob += g.iter().enumerate().map(|(i, gi)| gi * gi * rho0.entry(i, i).re).sum::<f64>() / particles as f64;
        }
    }
    probs
}

fn run_convergence_experiment(config: &RunConfig, workers: Option<usize>) -> Result<RunOutput> {
    let model = config.monitoring_model()?;
    let initial = config.initial_condition()?;
    let (m, seed) = ensemble_size(config)?;
    let spec = config
        .convergence
        .as_ref()
        .ok_or_else(|| Error::Model("missing convergence section".into()))?;
    let report = convergence_study(
        &model,
        &initial,
        &spec.dt_list,
        spec.t_final,
        spec.sample_interval,
        m,
        seed,
        workers,
    )?;
    Ok(RunOutput {
        timeseries: Vec::new(),
        states: Vec::new(),
        flashes: None,
        summary: json!({
            "trajectories": m,
            "rows": report.rows,
            "ratios": report.ratios,
        }),
    })
}
