//! JSON run configuration.
//!
//! Parsing walks the JSON tree by hand so that every problem is reported at once,
//! each with its field path. A parsed [`RunConfig`] serializes back to an equivalent
//! document with all defaults filled in; that echo is what result files embed.
//!
//! ```json
//! {
//!   "experiment": "ensemble",
//!   "model": {
//!     "dimension": 2,
//!     "hamiltonian": [[0, 0.5], [0.5, 0]],
//!     "channels": [{ "operator": [[1, 0], [0, -1]], "coupling": 1.0 }],
//!     "feedback": { "mode": "signal", "gain": 2.0 }
//!   },
//!   "initial": { "state": [1, 0] },
//!   "numerics": { "dt": 0.001, "steps": 2000, "stride": 10 },
//!   "ensemble": { "trajectories": 10000, "seed": 7 }
//! }
//! ```

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::csl::{csl_model, LatticeConfig};
use crate::ensemble::{Decomposition, InitialCondition};
use crate::error::{ConfigIssue, Error, Result};
use crate::grw::JumpModel;
use crate::hilbert::{self, HermitianOperator, QuantumState, C64};
use crate::model::{Channel, FeedbackMode, FeedbackSpec, MonitoringModel};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_STRIDE: usize = 10;
pub const DEFAULT_BOOTSTRAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Me,
    Ensemble,
    Fwt,
    Grw,
    Csl,
    Convergence,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Me,
        ExperimentKind::Ensemble,
        ExperimentKind::Fwt,
        ExperimentKind::Grw,
        ExperimentKind::Csl,
        ExperimentKind::Convergence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Me => "me",
            ExperimentKind::Ensemble => "ensemble",
            ExperimentKind::Fwt => "fwt",
            ExperimentKind::Grw => "grw",
            ExperimentKind::Csl => "csl",
            ExperimentKind::Convergence => "convergence",
        }
    }

    fn needs_ensemble(self) -> bool {
        self != ExperimentKind::Me
    }

    fn needs_lattice(self) -> bool {
        matches!(self, ExperimentKind::Grw | ExperimentKind::Csl)
    }
}

/// A matrix given as real rows, or as separate real and imaginary parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Real(Vec<Vec<f64>>),
    Complex { re: Vec<Vec<f64>>, im: Vec<Vec<f64>> },
}

impl MatrixSpec {
    fn rows(&self) -> usize {
        match self {
            MatrixSpec::Real(r) | MatrixSpec::Complex { re: r, .. } => r.len(),
        }
    }

    pub fn to_operator(&self) -> Result<HermitianOperator> {
        let n = self.rows();
        let m = match self {
            MatrixSpec::Real(r) => nalgebra::DMatrix::from_fn(n, n, |i, j| C64::new(r[i][j], 0.0)),
            MatrixSpec::Complex { re, im } => nalgebra::DMatrix::from_fn(n, n, |i, j| C64::new(re[i][j], im[i][j])),
        };
        HermitianOperator::new(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Real(Vec<f64>),
    Complex { re: Vec<f64>, im: Vec<f64> },
}

impl VectorSpec {
    fn len(&self) -> usize {
        match self {
            VectorSpec::Real(v) | VectorSpec::Complex { re: v, .. } => v.len(),
        }
    }

    pub fn to_state(&self) -> Result<QuantumState> {
        match self {
            VectorSpec::Real(v) => QuantumState::from_real(v),
            VectorSpec::Complex { re, im } => {
                QuantumState::new(re.iter().zip(im).map(|(&a, &b)| C64::new(a, b)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub operator: MatrixSpec,
    pub coupling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    pub mode: FeedbackMode,
    pub gain: f64,
    /// Fed-back channels; all channels when absent.
    pub channels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dimension: Option<usize>,
    pub hamiltonian: Option<MatrixSpec>,
    pub channels: Option<Vec<ChannelSpec>>,
    pub feedback: Option<FeedbackConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub state: VectorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSpec {
    State(VectorSpec),
    Basis(usize),
    /// Equal superposition of lattice configurations (one site per particle).
    Sites(Vec<Vec<usize>>),
    Mixture(Vec<ComponentSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericsSpec {
    pub dt: f64,
    pub steps: Option<usize>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub trajectories: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrwSpec {
    pub jump_rate: f64,
    pub localization_width: f64,
}

impl Default for GrwSpec {
    fn default() -> Self {
        Self {
            jump_rate: 1.0,
            localization_width: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSpec {
    pub label: String,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwtSpec {
    pub decomposition_a: DecompositionSpec,
    pub decomposition_b: DecompositionSpec,
    pub bootstrap_resamples: usize,
    /// Repeat at `dt/2` and require the same verdict.
    pub pilot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSpec {
    pub dt_list: Vec<f64>,
    pub t_final: f64,
    pub sample_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub directory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grw: Option<GrwSpec>,
    pub initial: InitialSpec,
    pub numerics: NumericsSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fwt: Option<FwtSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
}

impl RunConfig {
    /// The echoed form: defaults filled, suitable for re-parsing.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn seed(&self) -> Option<u64> {
        self.ensemble.as_ref().map(|e| e.seed)
    }

    pub fn set_seed(&mut self, seed: u64) {
        if let Some(e) = self.ensemble.as_mut() {
            e.seed = seed;
        }
    }

    pub fn steps(&self) -> usize {
        self.numerics.steps.unwrap_or(1)
    }

    /// The monitored model: explicit operators, or the lattice's mass-density channels.
    pub fn monitoring_model(&self) -> Result<MonitoringModel> {
        let spec = self.model.as_ref();
        let base = match (&self.lattice, spec.and_then(|m| m.channels.as_ref())) {
            (Some(lattice), None) => csl_model(lattice)?,
            (_, Some(channels)) => {
                let spec = spec.expect("channels imply a model section");
                let dim = spec.dimension.unwrap_or(channels.first().map_or(0, |c| c.operator.rows()));
                let h = match &spec.hamiltonian {
                    Some(h) => h.to_operator()?,
                    None => HermitianOperator::zeros(dim),
                };
                let chans = channels
                    .iter()
                    .map(|c| Ok(Channel::new(c.operator.to_operator()?, c.coupling)))
                    .collect::<Result<Vec<_>>>()?;
                MonitoringModel::new(h, chans, None)?
            }
            (None, None) => return Err(Error::Model("no model or lattice section".into())),
        };
        let feedback = spec.and_then(|m| m.feedback.as_ref()).map(|f| FeedbackSpec {
            mode: f.mode,
            gain: f.gain,
            channels: f.channels.clone().unwrap_or_else(|| (0..base.channels().len()).collect()),
        });
        base.with_feedback(feedback)
    }

    pub fn jump_model(&self) -> Result<JumpModel> {
        let lattice = self
            .lattice
            .clone()
            .ok_or_else(|| Error::Model("jump model needs a lattice section".into()))?;
        let grw = self.grw.clone().unwrap_or_default();
        JumpModel::on_lattice(lattice, grw.jump_rate, grw.localization_width)
    }

    pub fn initial_condition(&self) -> Result<InitialCondition> {
        Ok(match &self.initial {
            InitialSpec::State(v) => InitialCondition::Pure(v.to_state()?),
            InitialSpec::Basis(i) => InitialCondition::Pure(QuantumState::basis(self.dimension()?, *i)?),
            InitialSpec::Sites(configs) => {
                let lattice = self
                    .lattice
                    .as_ref()
                    .ok_or_else(|| Error::Model("initial.sites needs a lattice section".into()))?;
                let refs: Vec<&[usize]> = configs.iter().map(Vec::as_slice).collect();
                InitialCondition::Pure(lattice.superposition(&refs)?)
            }
            InitialSpec::Mixture(components) => {
                let (states, weights) = components_to_states(components)?;
                InitialCondition::mixture(states, weights)?
            }
        })
    }

    pub fn decompositions(&self) -> Result<(Decomposition, Decomposition)> {
        let fwt = self
            .fwt
            .as_ref()
            .ok_or_else(|| Error::Model("missing fwt section".into()))?;
        let build = |d: &DecompositionSpec| {
            let (states, weights) = components_to_states(&d.components)?;
            Decomposition::new(d.label.clone(), states, weights)
        };
        Ok((build(&fwt.decomposition_a)?, build(&fwt.decomposition_b)?))
    }

    /// Hilbert-space dimension implied by the model or lattice section.
    pub fn dimension(&self) -> Result<usize> {
        if let Some(l) = &self.lattice {
            return Ok(l.dim());
        }
        let m = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Model("no model or lattice section".into()))?;
        m.dimension
            .or_else(|| m.hamiltonian.as_ref().map(MatrixSpec::rows))
            .or_else(|| m.channels.as_ref().and_then(|c| c.first()).map(|c| c.operator.rows()))
            .ok_or_else(|| Error::Model("cannot infer the model dimension".into()))
    }
}

fn components_to_states(components: &[ComponentSpec]) -> Result<(Vec<QuantumState>, Vec<f64>)> {
    let states = components
        .iter()
        .map(|c| c.state.to_state())
        .collect::<Result<Vec<_>>>()?;
    Ok((states, components.iter().map(|c| c.weight).collect()))
}

/// Parses and validates a JSON configuration. Syntax errors carry line and column;
/// schema and range violations are collected and returned together.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::ConfigSyntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut w = Walk::default();
    let cfg = w.run_config(&value);
    match cfg {
        Some(cfg) if w.issues.is_empty() => {
            w.semantic(&cfg);
            if w.issues.is_empty() {
                Ok(cfg)
            } else {
                Err(Error::Config(w.issues))
            }
        }
        _ => Err(Error::Config(w.issues)),
    }
}

#[derive(Default)]
struct Walk {
    issues: Vec<ConfigIssue>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

type Conv<T> = fn(&mut Walk, &Value, &str) -> Option<T>;

impl Walk {
    fn err(&mut self, path: &str, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            path: path.to_string(),
            message: message.into(),
        });
    }

    fn object<'a>(&mut self, v: &'a Value, path: &str, allowed: &[&str]) -> Option<&'a Map<String, Value>> {
        let Some(m) = v.as_object() else {
            self.err(path, "expected an object");
            return None;
        };
        for key in m.keys() {
            if !allowed.contains(&key.as_str()) {
                self.err(&join(path, key), "unknown field");
            }
        }
        Some(m)
    }

    fn req<T>(&mut self, m: &Map<String, Value>, key: &str, path: &str, conv: Conv<T>) -> Option<T> {
        let p = join(path, key);
        match m.get(key) {
            Some(v) => conv(self, v, &p),
            None => {
                self.err(&p, "missing required field");
                None
            }
        }
    }

    /// `Ok(None)` when absent, `Err(())` when present but invalid.
    fn opt<T>(&mut self, m: &Map<String, Value>, key: &str, path: &str, conv: Conv<T>) -> std::result::Result<Option<T>, ()> {
        match m.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => conv(self, v, &join(path, key)).map(Some).ok_or(()),
        }
    }

    fn num(&mut self, v: &Value, path: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.err(path, "expected a finite number");
                None
            }
        }
    }

    fn uint(&mut self, v: &Value, path: &str) -> Option<usize> {
        match v.as_u64() {
            Some(x) => Some(x as usize),
            None => {
                self.err(path, "expected a non-negative integer");
                None
            }
        }
    }

    fn u64(&mut self, v: &Value, path: &str) -> Option<u64> {
        match v.as_u64() {
            Some(x) => Some(x),
            None => {
                self.err(path, "expected a non-negative integer");
                None
            }
        }
    }

    fn string(&mut self, v: &Value, path: &str) -> Option<String> {
        match v.as_str() {
            Some(s) => Some(s.to_string()),
            None => {
                self.err(path, "expected a string");
                None
            }
        }
    }

    fn boolean(&mut self, v: &Value, path: &str) -> Option<bool> {
        match v.as_bool() {
            Some(b) => Some(b),
            None => {
                self.err(path, "expected true or false");
                None
            }
        }
    }

    fn array<'a>(&mut self, v: &'a Value, path: &str) -> Option<&'a Vec<Value>> {
        match v.as_array() {
            Some(a) => Some(a),
            None => {
                self.err(path, "expected an array");
                None
            }
        }
    }

    fn list<T>(&mut self, v: &Value, path: &str, conv: Conv<T>) -> Option<Vec<T>> {
        let arr = self.array(v, path)?;
        let items: Vec<Option<T>> = arr
            .iter()
            .enumerate()
            .map(|(i, x)| conv(self, x, &format!("{path}[{i}]")))
            .collect();
        items.into_iter().collect()
    }

    fn numbers(&mut self, v: &Value, path: &str) -> Option<Vec<f64>> {
        self.list(v, path, Walk::num)
    }

    fn uints(&mut self, v: &Value, path: &str) -> Option<Vec<usize>> {
        self.list(v, path, Walk::uint)
    }

    fn rows(&mut self, v: &Value, path: &str) -> Option<Vec<Vec<f64>>> {
        let rows = self.list(v, path, Walk::numbers)?;
        let n = rows.len();
        if n == 0 {
            self.err(path, "matrix has no rows");
            return None;
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            self.err(&format!("{path}[{i}]"), format!("expected {n} entries for a square matrix, got {}", r.len()));
            return None;
        }
        Some(rows)
    }

    fn matrix(&mut self, v: &Value, path: &str) -> Option<MatrixSpec> {
        if v.is_array() {
            return self.rows(v, path).map(MatrixSpec::Real);
        }
        let m = self.object(v, path, &["re", "im"])?;
        let re = self.req(m, "re", path, Walk::rows);
        let im = self.req(m, "im", path, Walk::rows);
        let (re, im) = (re?, im?);
        if re.len() != im.len() {
            self.err(path, "re and im parts have different shapes");
            return None;
        }
        Some(MatrixSpec::Complex { re, im })
    }

    fn vector(&mut self, v: &Value, path: &str) -> Option<VectorSpec> {
        if v.is_array() {
            return self.numbers(v, path).map(VectorSpec::Real);
        }
        let m = self.object(v, path, &["re", "im"])?;
        let re = self.req(m, "re", path, Walk::numbers);
        let im = self.req(m, "im", path, Walk::numbers);
        let (re, im) = (re?, im?);
        if re.len() != im.len() {
            self.err(path, "re and im parts have different lengths");
            return None;
        }
        Some(VectorSpec::Complex { re, im })
    }

    fn channel(&mut self, v: &Value, path: &str) -> Option<ChannelSpec> {
        let m = self.object(v, path, &["operator", "coupling"])?;
        let operator = self.req(m, "operator", path, Walk::matrix);
        let coupling = self.req(m, "coupling", path, Walk::num);
        if let Some(c) = coupling {
            if c < 0.0 {
                self.err(&join(path, "coupling"), format!("coupling must be >= 0, got {c}"));
            }
        }
        Some(ChannelSpec {
            operator: operator?,
            coupling: coupling?,
        })
    }

    fn feedback(&mut self, v: &Value, path: &str) -> Option<FeedbackConfig> {
        let m = self.object(v, path, &["mode", "gain", "channels"])?;
        let mode = self.req(m, "mode", path, Walk::string).and_then(|s| match s.as_str() {
            "signal" => Some(FeedbackMode::Signal),
            "mean_field" => Some(FeedbackMode::MeanField),
            other => {
                self.err(&join(path, "mode"), format!("expected \"signal\" or \"mean_field\", got \"{other}\""));
                None
            }
        });
        let gain = self.req(m, "gain", path, Walk::num);
        let channels = self.opt(m, "channels", path, Walk::uints);
        Some(FeedbackConfig {
            mode: mode?,
            gain: gain?,
            channels: channels.ok()?,
        })
    }

    fn model(&mut self, v: &Value, path: &str) -> Option<ModelSpec> {
        let m = self.object(v, path, &["dimension", "hamiltonian", "channels", "feedback"])?;
        let dimension = self.opt(m, "dimension", path, Walk::uint);
        let hamiltonian = self.opt(m, "hamiltonian", path, Walk::matrix);
        let channels = self.opt(m, "channels", path, |w, v, p| w.list(v, p, Walk::channel));
        let feedback = self.opt(m, "feedback", path, Walk::feedback);
        Some(ModelSpec {
            dimension: dimension.ok()?,
            hamiltonian: hamiltonian.ok()?,
            channels: channels.ok()?,
            feedback: feedback.ok()?,
        })
    }

    fn lattice(&mut self, v: &Value, path: &str) -> Option<LatticeConfig> {
        let m = self.object(v, path, &["n_sites", "masses", "smearing_sigma", "coupling", "hopping"])?;
        let n_sites = self.req(m, "n_sites", path, Walk::uint);
        let masses = self.req(m, "masses", path, Walk::numbers);
        let smearing_sigma = self.req(m, "smearing_sigma", path, Walk::num);
        let coupling = self.req(m, "coupling", path, Walk::num);
        let hopping = self.opt(m, "hopping", path, Walk::num);
        Some(LatticeConfig {
            n_sites: n_sites?,
            masses: masses?,
            smearing_sigma: smearing_sigma?,
            coupling: coupling?,
            hopping: hopping.ok()?.unwrap_or(0.0),
        })
    }

    fn grw(&mut self, v: &Value, path: &str) -> Option<GrwSpec> {
        let m = self.object(v, path, &["jump_rate", "localization_width"])?;
        let d = GrwSpec::default();
        let rate = self.opt(m, "jump_rate", path, Walk::num);
        let width = self.opt(m, "localization_width", path, Walk::num);
        Some(GrwSpec {
            jump_rate: rate.ok()?.unwrap_or(d.jump_rate),
            localization_width: width.ok()?.unwrap_or(d.localization_width),
        })
    }

    fn component(&mut self, v: &Value, path: &str) -> Option<ComponentSpec> {
        let m = self.object(v, path, &["weight", "state"])?;
        let weight = self.req(m, "weight", path, Walk::num);
        let state = self.req(m, "state", path, Walk::vector);
        Some(ComponentSpec {
            weight: weight?,
            state: state?,
        })
    }

    fn components(&mut self, v: &Value, path: &str) -> Option<Vec<ComponentSpec>> {
        self.list(v, path, Walk::component)
    }

    fn initial(&mut self, v: &Value, path: &str) -> Option<InitialSpec> {
        let keys = ["state", "basis", "sites", "mixture"];
        let m = self.object(v, path, &keys)?;
        let present: Vec<&str> = keys.iter().copied().filter(|k| m.contains_key(*k)).collect();
        if present.len() != 1 {
            self.err(path, "expected exactly one of state, basis, sites, mixture");
            return None;
        }
        let key = present[0];
        let p = join(path, key);
        let v = &m[key];
        match key {
            "state" => self.vector(v, &p).map(InitialSpec::State),
            "basis" => self.uint(v, &p).map(InitialSpec::Basis),
            "sites" => self.list(v, &p, Walk::uints).map(InitialSpec::Sites),
            _ => self.components(v, &p).map(InitialSpec::Mixture),
        }
    }

    fn numerics(&mut self, v: &Value, path: &str) -> Option<NumericsSpec> {
        let m = self.object(v, path, &["dt", "steps", "stride"])?;
        let dt = self.opt(m, "dt", path, Walk::num);
        let steps = self.opt(m, "steps", path, Walk::uint);
        let stride = self.opt(m, "stride", path, Walk::uint);
        Some(NumericsSpec {
            dt: dt.ok()?.unwrap_or(DEFAULT_DT),
            steps: steps.ok()?,
            stride: stride.ok()?.unwrap_or(DEFAULT_STRIDE),
        })
    }

    fn ensemble(&mut self, v: &Value, path: &str) -> Option<EnsembleSpec> {
        let m = self.object(v, path, &["trajectories", "seed"])?;
        let trajectories = self.req(m, "trajectories", path, Walk::uint);
        let seed = self.opt(m, "seed", path, Walk::u64);
        Some(EnsembleSpec {
            trajectories: trajectories?,
            seed: seed.ok()?.unwrap_or(0),
        })
    }

    fn decomposition(&mut self, v: &Value, path: &str) -> Option<DecompositionSpec> {
        let m = self.object(v, path, &["label", "components"])?;
        let label = self.req(m, "label", path, Walk::string);
        let components = self.req(m, "components", path, Walk::components);
        Some(DecompositionSpec {
            label: label?,
            components: components?,
        })
    }

    fn fwt(&mut self, v: &Value, path: &str) -> Option<FwtSpec> {
        let m = self.object(v, path, &["decomposition_a", "decomposition_b", "bootstrap_resamples", "pilot"])?;
        let a = self.req(m, "decomposition_a", path, Walk::decomposition);
        let b = self.req(m, "decomposition_b", path, Walk::decomposition);
        let boot = self.opt(m, "bootstrap_resamples", path, Walk::uint);
        let pilot = self.opt(m, "pilot", path, Walk::boolean);
        Some(FwtSpec {
            decomposition_a: a?,
            decomposition_b: b?,
            bootstrap_resamples: boot.ok()?.unwrap_or(DEFAULT_BOOTSTRAP),
            pilot: pilot.ok()?.unwrap_or(true),
        })
    }

    fn convergence(&mut self, v: &Value, path: &str) -> Option<ConvergenceSpec> {
        let m = self.object(v, path, &["dt_list", "t_final", "sample_interval"])?;
        let dt_list = self.req(m, "dt_list", path, Walk::numbers);
        let t_final = self.req(m, "t_final", path, Walk::num);
        let interval = self.opt(m, "sample_interval", path, Walk::num);
        let t_final = t_final?;
        Some(ConvergenceSpec {
            dt_list: dt_list?,
            t_final,
            sample_interval: interval.ok()?.unwrap_or(t_final / 20.0),
        })
    }

    fn output(&mut self, v: &Value, path: &str) -> Option<OutputSpec> {
        let m = self.object(v, path, &["directory"])?;
        let directory = self.opt(m, "directory", path, Walk::string);
        Some(OutputSpec {
            directory: directory.ok()?,
        })
    }

    fn run_config(&mut self, v: &Value) -> Option<RunConfig> {
        let m = self.object(
            v,
            "",
            &[
                "experiment", "model", "lattice", "grw", "initial", "numerics", "ensemble", "fwt", "convergence",
                "output",
            ],
        )?;
        let experiment = self.req(m, "experiment", "", Walk::string).and_then(|s| {
            let kind = ExperimentKind::ALL.into_iter().find(|k| k.as_str() == s);
            if kind.is_none() {
                let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.as_str()).collect();
                self.err("experiment", format!("unknown experiment \"{s}\"; expected one of {}", names.join(", ")));
            }
            kind
        });
        let model = self.opt(m, "model", "", Walk::model);
        let lattice = self.opt(m, "lattice", "", Walk::lattice);
        let grw = self.opt(m, "grw", "", Walk::grw);
        let initial = self.req(m, "initial", "", Walk::initial);
        let numerics = match m.get("numerics") {
            Some(v) => self.numerics(v, "numerics"),
            None => Some(NumericsSpec {
                dt: DEFAULT_DT,
                steps: None,
                stride: DEFAULT_STRIDE,
            }),
        };
        let ensemble = self.opt(m, "ensemble", "", Walk::ensemble);
        let fwt = self.opt(m, "fwt", "", Walk::fwt);
        let convergence = self.opt(m, "convergence", "", Walk::convergence);
        let output = self.opt(m, "output", "", Walk::output);
        Some(RunConfig {
            experiment: experiment?,
            model: model.ok()?,
            lattice: lattice.ok()?,
            grw: grw.ok()?,
            initial: initial?,
            numerics: numerics?,
            ensemble: ensemble.ok()?,
            fwt: fwt.ok()?,
            convergence: convergence.ok()?,
            output: output.ok()?,
        })
    }

    /// Cross-field rules, checked once every field has the right type.
    fn semantic(&mut self, c: &RunConfig) {
        let kind = c.experiment;
        let explicit = c
            .model
            .as_ref()
            .is_some_and(|m| m.hamiltonian.is_some() || m.channels.is_some() || m.dimension.is_some());
        if c.lattice.is_some() && explicit {
            self.err(
                "lattice",
                "mutually exclusive with explicit operator matrices in model (dimension, hamiltonian, channels)",
            );
        }
        if kind.needs_lattice() && c.lattice.is_none() {
            self.err("lattice", format!("required for experiment \"{}\"", kind.as_str()));
        }
        if !kind.needs_lattice() && c.lattice.is_none() && !explicit {
            self.err("model", format!("required for experiment \"{}\"", kind.as_str()));
        }
        if kind == ExperimentKind::Grw && c.model.is_some() {
            self.err("model", "not used by the grw experiment; configure the lattice and grw sections");
        }
        if let Some(l) = &c.lattice {
            if let Err(e) = l.validate() {
                self.err("lattice", e.to_string());
            }
        }
        if let Some(m) = &c.model {
            self.model_rules(m, c.lattice.as_ref());
        }
        if kind == ExperimentKind::Grw {
            if let Some(g) = &c.grw {
                if g.jump_rate < 0.0 {
                    self.err("grw.jump_rate", format!("must be >= 0, got {}", g.jump_rate));
                }
                if g.localization_width <= 0.0 {
                    self.err("grw.localization_width", format!("must be > 0, got {}", g.localization_width));
                }
            }
        } else if c.grw.is_some() {
            self.err("grw", "only used by the grw experiment");
        }

        let n = &c.numerics;
        if n.dt <= 0.0 {
            self.err("numerics.dt", format!("must be > 0, got {}", n.dt));
        }
        if n.stride == 0 {
            self.err("numerics.stride", "must be >= 1");
        }
        match (kind, n.steps) {
            (ExperimentKind::Convergence, _) => {}
            (_, None) => self.err("numerics.steps", "missing required field"),
            (_, Some(0)) => self.err("numerics.steps", "must be >= 1"),
            _ => {}
        }
        if kind == ExperimentKind::Grw && self.issues.is_empty() {
            let g = c.grw.clone().unwrap_or_default();
            let p = c.lattice.as_ref().map_or(1, |l| l.particles()) as f64;
            if g.jump_rate * p * n.dt >= 0.1 {
                self.err("numerics.dt", format!("jump probability per step {} must stay below 0.1", g.jump_rate * p * n.dt));
            }
        }

        match (&c.ensemble, kind.needs_ensemble()) {
            (None, true) => self.err("ensemble", format!("required for experiment \"{}\"", kind.as_str())),
            (Some(e), _) if e.trajectories < 2 => {
                self.err("ensemble.trajectories", format!("must be >= 2, got {}", e.trajectories))
            }
            _ => {}
        }
        match (&c.fwt, kind) {
            (None, ExperimentKind::Fwt) => self.err("fwt", "required for experiment \"fwt\""),
            (Some(_), k) if k != ExperimentKind::Fwt => self.err("fwt", "only used by the fwt experiment"),
            _ => {}
        }
        match (&c.convergence, kind) {
            (None, ExperimentKind::Convergence) => self.err("convergence", "required for experiment \"convergence\""),
            (Some(cv), ExperimentKind::Convergence) => {
                if cv.dt_list.len() < 2 {
                    self.err("convergence.dt_list", "needs at least two step sizes");
                }
                if cv.dt_list.iter().any(|&d| d <= 0.0) || cv.dt_list.windows(2).any(|w| w[0] <= w[1]) {
                    self.err("convergence.dt_list", "step sizes must be positive and strictly descending");
                }
                if cv.t_final <= 0.0 {
                    self.err("convergence.t_final", "must be > 0");
                }
                if cv.sample_interval <= 0.0 || cv.sample_interval > cv.t_final {
                    self.err("convergence.sample_interval", "must lie in (0, t_final]");
                }
            }
            (Some(_), _) => self.err("convergence", "only used by the convergence experiment"),
            _ => {}
        }
        if !self.issues.is_empty() {
            return;
        }
        // Everything below builds the runtime objects and reports what they reject.
        let dim = match c.dimension() {
            Ok(d) => d,
            Err(e) => return self.err("model", e.to_string()),
        };
        self.initial_rules(c, dim);
        if kind == ExperimentKind::Grw {
            if let Err(e) = c.jump_model() {
                self.err("grw", e.to_string());
            }
        } else {
            match c.monitoring_model() {
                Err(e) => self.err("model", e.to_string()),
                Ok(model) if model.channels().is_empty() && kind != ExperimentKind::Me => {
                    self.err("model.channels", "at least one channel is required")
                }
                Ok(_) => {}
            }
        }
        if let Some(fwt) = &c.fwt {
            self.fwt_rules(c, fwt, dim);
        }
    }

    fn model_rules(&mut self, m: &ModelSpec, lattice: Option<&LatticeConfig>) {
        let dim = m
            .dimension
            .or_else(|| m.hamiltonian.as_ref().map(MatrixSpec::rows))
            .or_else(|| m.channels.as_ref().and_then(|c| c.first()).map(|c| c.operator.rows()))
            .or_else(|| lattice.map(LatticeConfig::dim));
        if let Some(d) = m.dimension {
            if d < 2 {
                self.err("model.dimension", format!("must be >= 2, got {d}"));
            }
        }
        if let (Some(h), Some(d)) = (&m.hamiltonian, dim) {
            if h.rows() != d {
                self.err("model.hamiltonian", format!("expected a {d}x{d} matrix, got {0}x{0}", h.rows()));
            } else if let Err(e) = h.to_operator() {
                self.err("model.hamiltonian", e.to_string());
            }
        }
        let channel_count = match (&m.channels, lattice) {
            (Some(ch), _) => ch.len(),
            (None, Some(l)) => l.n_sites,
            (None, None) => 0,
        };
        for (k, ch) in m.channels.iter().flatten().enumerate() {
            let p = format!("model.channels[{k}]");
            if let Some(d) = dim {
                if ch.operator.rows() != d {
                    self.err(&format!("{p}.operator"), format!("expected a {d}x{d} matrix, got {0}x{0}", ch.operator.rows()));
                    continue;
                }
            }
            if let Err(e) = ch.operator.to_operator() {
                self.err(&format!("{p}.operator"), e.to_string());
            }
        }
        if let Some(fb) = &m.feedback {
            for (i, &k) in fb.channels.iter().flatten().enumerate() {
                if k >= channel_count {
                    self.err(&format!("model.feedback.channels[{i}]"), format!("no channel {k}"));
                }
            }
            if fb.mode == FeedbackMode::Signal && fb.gain != 0.0 {
                for (k, ch) in m.channels.iter().flatten().enumerate() {
                    let fed = fb.channels.as_ref().is_none_or(|c| c.contains(&k));
                    if fed && ch.coupling == 0.0 {
                        self.err(
                            &format!("model.channels[{k}].coupling"),
                            "signal feedback needs a monitored channel (coupling > 0)",
                        );
                    }
                }
            }
        }
    }

    fn initial_rules(&mut self, c: &RunConfig, dim: usize) {
        match &c.initial {
            InitialSpec::State(v) if v.len() != dim => {
                self.err("initial.state", format!("expected {dim} amplitudes, got {}", v.len()))
            }
            InitialSpec::Basis(i) if *i >= dim => self.err("initial.basis", format!("index {i} out of range for dimension {dim}")),
            InitialSpec::Sites(configs) => match &c.lattice {
                None => self.err("initial.sites", "requires a lattice section"),
                Some(l) => {
                    for (i, s) in configs.iter().enumerate() {
                        if s.len() != l.particles() || s.iter().any(|&x| x >= l.n_sites) {
                            self.err(
                                &format!("initial.sites[{i}]"),
                                format!("expected {} site indices below {}", l.particles(), l.n_sites),
                            );
                        }
                    }
                }
            },
            InitialSpec::Mixture(comps) => {
                for (i, comp) in comps.iter().enumerate() {
                    if comp.state.len() != dim {
                        self.err(
                            &format!("initial.mixture[{i}].state"),
                            format!("expected {dim} amplitudes, got {}", comp.state.len()),
                        );
                    }
                }
            }
            _ => {}
        }
        if self.issues.is_empty() {
            if let Err(e) = c.initial_condition() {
                self.err("initial", e.to_string());
            }
        }
    }

    fn fwt_rules(&mut self, c: &RunConfig, fwt: &FwtSpec, dim: usize) {
        if fwt.bootstrap_resamples < 2 {
            self.err("fwt.bootstrap_resamples", "must be >= 2");
        }
        let mut ok = true;
        for (name, d) in [("decomposition_a", &fwt.decomposition_a), ("decomposition_b", &fwt.decomposition_b)] {
            for (i, comp) in d.components.iter().enumerate() {
                if comp.state.len() != dim {
                    ok = false;
                    self.err(
                        &format!("fwt.{name}.components[{i}].state"),
                        format!("expected {dim} amplitudes, got {}", comp.state.len()),
                    );
                }
            }
        }
        if !ok {
            return;
        }
        match c.decompositions() {
            Err(e) => self.err("fwt", e.to_string()),
            Ok((a, b)) => {
                let ra = hilbert::mix(&a.states, &a.weights);
                let rb = hilbert::mix(&b.states, &b.weights);
                if let (Ok(ra), Ok(rb)) = (ra, rb) {
                    let gap = (ra.matrix() - rb.matrix()).iter().map(|v| v.norm()).fold(0.0, f64::max);
                    if gap > 1e-10 {
                        self.err("fwt", format!("decompositions describe different density matrices (max entry gap {gap:e})"));
                    }
                }
            }
        }
    }
}
