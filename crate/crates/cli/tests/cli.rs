use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_collapse-lab");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const QUBIT_MODEL: &str = r#"
    "model": {
        "hamiltonian": [[0, 0.5], [0.5, 0]],
        "channels": [{ "operator": [[1, 0], [0, -1]], "coupling": 1.0 }]
    }"#;

fn ensemble_config(extra: &str) -> String {
    format!(
        r#"{{
        "experiment": "ensemble",
        {QUBIT_MODEL},
        "initial": {{ "state": [1, 0] }},
        "numerics": {{ "dt": 0.01, "steps": 50, "stride": 5 }},
        "ensemble": {{ "trajectories": 40, "seed": 11 }}{extra}
    }}"#
    )
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn me_run_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "me.json",
        &format!(
            r#"{{ "experiment": "me", {QUBIT_MODEL}, "initial": {{ "basis": 0 }}, "numerics": {{ "steps": 200 }} }}"#
        ),
    );
    let out = dir.path().join("out");
    let o = run(&["run-me", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("timeseries.csv")).unwrap();
    assert!(csv.starts_with("time,observable,mean,se\n"));
    assert_eq!(csv.lines().count(), 1 + 21);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["experiment"], "me");
    assert_eq!(summary["config"]["numerics"]["dt"], 1e-3);
    assert!(summary["software"]["version"].is_string());
}

#[test]
fn negative_coupling_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &ensemble_config("").replace("1.0 }]", "-1.0 }]"));
    let o = run(&["run-ensemble", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("channels[0].coupling"), "{}", stderr(&o));
}

#[test]
fn syntax_error_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", "{\n \"experiment\": \"me\",\n}");
    let o = run(&["run-me", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn subcommand_must_match_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.json", &ensemble_config(""));
    let o = run(&["run-me", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_validation_code() {
    assert_eq!(run(&["run-me"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn integration_failure_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "stiff.json",
        r#"{ "experiment": "me",
             "model": { "channels": [{ "operator": [[1, 0], [0, -1]], "coupling": 50 }] },
             "initial": { "state": [1, 1] },
             "numerics": { "dt": 0.2, "steps": 10, "stride": 1 } }"#,
    );
    let o = run(&["run-me", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let o = run(&["run-me", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/config.json"));
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_are_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.json", &ensemble_config(""));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["run-ensemble", "--config", &cfg, "--out", a.to_str().unwrap(), "--workers", "1"]).status.success());
    assert!(run(&["run-ensemble", "--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "4"]).status.success());
    assert_eq!(read_all(&a), read_all(&b));
}

#[test]
fn echoed_config_reproduces_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.json", &ensemble_config(""));
    let first = dir.path().join("first");
    let o = run(&["run-ensemble", "--config", &cfg, "--out", first.to_str().unwrap(), "--seed", "99"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(first.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 99);
    let echo = write_config(dir.path(), "echo.json", &summary["config"].to_string());
    let second = dir.path().join("second");
    assert!(run(&["run-ensemble", "--config", &echo, "--out", second.to_str().unwrap()]).status.success());
    assert_eq!(read_all(&first), read_all(&second));
}

#[test]
fn fwt_summary_has_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "fwt.json",
        &format!(
            r#"{{
            "experiment": "fwt",
            "model": {{
                "hamiltonian": [[0, 0.5], [0.5, 0]],
                "channels": [{{ "operator": [[1, 0], [0, -1]], "coupling": 1.0 }}],
                "feedback": {{ "mode": "mean_field", "gain": 3.0 }}
            }},
            "initial": {{ "basis": 0 }},
            "numerics": {{ "dt": 0.01, "steps": 40, "stride": 10 }},
            "ensemble": {{ "trajectories": 64, "seed": 1 }},
            "fwt": {{
                "decomposition_a": {{ "label": "z", "components": [
                    {{ "weight": 0.5, "state": [1, 0] }}, {{ "weight": 0.5, "state": [0, 1] }} ] }},
                "decomposition_b": {{ "label": "x", "components": [
                    {{ "weight": 0.5, "state": [1, 1] }}, {{ "weight": 0.5, "state": [1, -1] }} ] }},
                "bootstrap_resamples": 50
            }}
        }}"#
        ),
    );
    let out = dir.path().join("out");
    let o = run(&["run-fwt", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    let v = s["results"]["verdict"].as_str().unwrap();
    assert!(["tangible", "not_tangible", "inconclusive"].contains(&v));
    assert!(s["results"]["pilot_agrees"].is_boolean());
    let csv = fs::read_to_string(out.join("timeseries.csv")).unwrap();
    assert!(csv.contains(",trace_distance,"));
    assert!(csv.contains(",z:L0,") && csv.contains(",x:L0,"));
}

#[test]
fn grw_run_writes_flash_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "grw.json",
        r#"{ "experiment": "grw",
             "lattice": { "n_sites": 8, "masses": [1], "smearing_sigma": 0.5, "coupling": 1 },
             "grw": { "jump_rate": 2.0, "localization_width": 0.8 },
             "initial": { "sites": [[1], [5]] },
             "numerics": { "dt": 0.01, "steps": 100, "stride": 20 },
             "ensemble": { "trajectories": 50, "seed": 5 } }"#,
    );
    let out = dir.path().join("out");
    let o = run(&["run-grw", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let flashes = fs::read_to_string(out.join("flashes.csv")).unwrap();
    let mut lines = flashes.lines();
    assert_eq!(lines.next(), Some("trajectory,time,particle,center"));
    assert!(lines.count() > 20);
    let s: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!(s["results"]["first_flash_chi_square"]["p_value"].is_number());
}

#[test]
fn csl_run_reports_rates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "csl.json",
        r#"{ "experiment": "csl",
             "lattice": { "n_sites": 8, "masses": [1], "smearing_sigma": 0.5, "coupling": 1 },
             "initial": { "sites": [[0], [4]] },
             "numerics": { "dt": 0.01, "steps": 50, "stride": 10 },
             "ensemble": { "trajectories": 20, "seed": 5 } }"#,
    );
    let out = dir.path().join("out");
    let o = run(&["run-csl", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    let csl = &s["results"]["csl"];
    let analytic = csl["analytic_rate"].as_f64().unwrap();
    let me = csl["master_equation_rate"].as_f64().unwrap();
    assert!((analytic - me).abs() < 1e-3 * analytic, "{csl}");
}

#[test]
fn convergence_writes_header_only_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "conv.json",
        &format!(
            r#"{{ "experiment": "convergence", {QUBIT_MODEL},
                 "initial": {{ "state": [1, 0] }},
                 "ensemble": {{ "trajectories": 20, "seed": 2 }},
                 "convergence": {{ "dt_list": [0.02, 0.01], "t_final": 0.2, "sample_interval": 0.1 }} }}"#
        ),
    );
    let out = dir.path().join("out");
    let o = run(&["run-convergence", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("timeseries.csv")).unwrap(), "time,observable,mean,se\n");
    let s: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["results"]["rows"].as_array().unwrap().len(), 2);
}
