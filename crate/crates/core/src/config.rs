//! JSON experiment configuration and named presets.
//!
//! ```json
//! {
//!   "plant": "benchmark",
//!   "channel": {"kind": "bernoulli", "gamma": 0.8},
//!   "delta": 10.0, "mu": 0.8, "horizon": 500, "trials": 500,
//!   "estimators": ["rseio", "kfio", "kf", "rse"],
//!   "seed": 1
//! }
//! ```
//!
//! A custom plant replaces `"benchmark"` with an object whose time-varying
//! entries are `{"constant": M}` or `{"table": [M_0, M_1, …]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::DropoutModel;
use crate::error::{Error, Result};
use crate::estimator::EstimatorKind;
use crate::linalg::{from_rows, Mat, Vector};
use crate::plant::{PlantModel, PlantParts, Schedule};
use crate::sim::SimConfig;

/// Row-major nested rows.
pub type MatrixRows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec<T> {
    Constant(T),
    Table(Vec<T>),
}

impl<T: Clone> ScheduleSpec<T> {
    fn build<U>(&self, f: impl Fn(&T) -> Result<U>) -> Result<Schedule<U>> {
        Ok(match self {
            ScheduleSpec::Constant(v) => Schedule::Constant(f(v)?),
            ScheduleSpec::Table(vs) if vs.is_empty() => return Err(Error::Config("empty schedule table".into())),
            ScheduleSpec::Table(vs) => Schedule::Table(vs.iter().map(f).collect::<Result<_>>()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomPlant {
    pub a: ScheduleSpec<MatrixRows>,
    pub b: ScheduleSpec<MatrixRows>,
    pub c: ScheduleSpec<MatrixRows>,
    /// Jacobians of `A`, `B`, `C` with respect to each error component.
    /// Missing entries are zero; with none given, a single zero component
    /// is assumed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub da: Option<ScheduleSpec<Vec<MatrixRows>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db: Option<ScheduleSpec<Vec<MatrixRows>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dc: Option<ScheduleSpec<Vec<MatrixRows>>>,
    pub q: ScheduleSpec<MatrixRows>,
    pub r: ScheduleSpec<MatrixRows>,
    pub p0: MatrixRows,
    pub x0_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlantSpec {
    Named(String),
    Custom(Box<CustomPlant>),
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec::Named("benchmark".into())
    }
}

fn first_dims(s: &ScheduleSpec<MatrixRows>) -> (usize, usize) {
    let m = match s {
        ScheduleSpec::Constant(m) => m,
        ScheduleSpec::Table(v) => match v.first() {
            Some(m) => m,
            None => return (0, 0),
        },
    };
    (m.len(), m.first().map_or(0, |r| r.len()))
}

fn jacobian_count(s: &Option<ScheduleSpec<Vec<MatrixRows>>>) -> Option<usize> {
    match s.as_ref()? {
        ScheduleSpec::Constant(v) => Some(v.len()),
        ScheduleSpec::Table(v) => v.first().map(|x| x.len()),
    }
}

impl PlantSpec {
    pub fn build(&self, mu: f64) -> Result<PlantModel> {
        match self {
            PlantSpec::Named(name) if name == "benchmark" => PlantModel::benchmark(1.0).with_mu(mu),
            PlantSpec::Named(name) => Err(Error::Config(format!("unknown plant `{name}` (expected \"benchmark\" or an object)"))),
            PlantSpec::Custom(c) => c.build(mu),
        }
    }
}

impl CustomPlant {
    pub fn build(&self, mu: f64) -> Result<PlantModel> {
        let (n, _) = first_dims(&self.a);
        let (_, m) = first_dims(&self.b);
        let (p, _) = first_dims(&self.c);
        let n_e = [&self.da, &self.db, &self.dc]
            .into_iter()
            .find_map(jacobian_count)
            .unwrap_or(1);
        let mats = |rows: &MatrixRows| from_rows(rows);
        let list = |v: &Vec<MatrixRows>| v.iter().map(|r| from_rows(r)).collect::<Result<Vec<_>>>();
        let jac = |spec: &Option<ScheduleSpec<Vec<MatrixRows>>>, rows: usize, cols: usize| -> Result<Schedule<Vec<Mat>>> {
            match spec {
                Some(s) => s.build(list),
                None => Ok(Schedule::Constant(vec![Mat::zeros(rows, cols); n_e])),
            }
        };
        let parts = PlantParts {
            a: self.a.build(mats)?,
            b: self.b.build(mats)?,
            c: self.c.build(mats)?,
            da: jac(&self.da, n, n)?,
            db: jac(&self.db, n, m)?,
            dc: jac(&self.dc, p, n)?,
            q: self.q.build(mats)?,
            r: self.r.build(mats)?,
            p0: from_rows(&self.p0)?,
            x0_mean: Vector::from_vec(self.x0_mean.clone()),
            mu: Schedule::Constant(mu),
        };
        PlantModel::new(parts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Window length `N` for the expected log-Lipschitz estimate.
    pub window: usize,
    /// Channel windows sampled for that estimate.
    pub sequences: usize,
    /// Random PDM pairs per window.
    pub pairs: usize,
    /// All dropout patterns up to this length are classified.
    pub pattern_length: usize,
    /// PDM pairs for the contraction check of a single pattern.
    pub contraction_pairs: usize,
    /// Pattern `γ_1..γ_N` inspected by `classify`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Vec<u8>>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            window: 12,
            sequences: 400,
            pairs: 20,
            pattern_length: 6,
            contraction_pairs: 1000,
            pattern: None,
        }
    }
}

pub const MAX_PROBE_LENGTH: usize = 12;
pub const MAX_PATTERN_LENGTH: usize = 12;

fn default_channel() -> DropoutModel {
    DropoutModel::Bernoulli { gamma: 0.8 }
}
fn default_delta() -> f64 {
    1.0
}
fn default_mu() -> f64 {
    0.8
}
fn default_horizon() -> usize {
    500
}
fn default_trials() -> usize {
    500
}
fn default_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}
fn default_probe_length() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub plant: PlantSpec,
    #[serde(default = "default_channel")]
    pub channel: DropoutModel,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    /// Initial PCMs of the stationarity study.
    #[serde(default)]
    pub p0_list: Vec<MatrixRows>,
    /// Trials per initial PCM; defaults to `trials`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationarity_trials: Option<usize>,
    /// Inclusive `t` range of the time-averaged MSE; defaults to
    /// `[min(80, horizon), horizon]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average_window: Option<(usize, usize)>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Sequence length enumerated by `probe-channel`.
    #[serde(default = "default_probe_length")]
    pub probe_length: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    /// Parses a JSON document. Blank input and `{}` are usage errors;
    /// malformed or schema-violating input is a configuration error.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        if value.as_object().is_some_and(|o| o.is_empty()) {
            return Err(Error::Usage("configuration is empty".into()));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read configuration {}: {e}", path.display())))?;
        if text.trim().is_empty() {
            return Err(Error::Usage(format!("configuration {} is empty", path.display())));
        }
        Self::from_json(&text)
    }

    pub fn plant_model(&self) -> Result<PlantModel> {
        self.plant.build(self.mu)
    }

    /// SHA-256 of the canonical JSON form, excluding the seed.
    pub fn hash(&self) -> String {
        let mut unseeded = self.clone();
        unseeded.seed = 0;
        let text = serde_json::to_string(&unseeded).expect("configuration serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_sim_config(&self) -> Result<SimConfig> {
        let plant = self.plant_model()?;
        let p0_list = self.p0_list.iter().map(|r| from_rows(r)).collect::<Result<Vec<_>>>()?;
        let cfg = SimConfig {
            plant,
            channel: self.channel,
            delta: self.delta,
            mu: self.mu,
            horizon: self.horizon,
            trials: self.trials,
            estimators: self.estimators.clone(),
            p0_list,
            stationarity_trials: self.stationarity_trials.unwrap_or(self.trials),
            average_window: self.average_window.unwrap_or((self.horizon.min(80), self.horizon)),
            seed: self.seed,
            config_hash: self.hash(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Preset names. Each also answers to `paper-<name>`.
pub const PRESETS: [&str; 7] = ["fig1a", "fig1b", "fig1c", "fig1d", "fig1e", "fig1f", "fig2"];

/// Built-in experiment settings on the benchmark plant.
///
/// `fig1a/c/e` average over the whole horizon, `fig1b/d/f` over
/// `t ∈ [80, 500]`. `fig2` adds the stationarity study with
/// `P₀ ∈ {0.1I, I, 10I, 100I}`.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let key = name.strip_prefix("paper-").unwrap_or(name);
    let (delta, mu, window) = match key {
        "fig1a" => (1.0, 0.8, (0, 500)),
        "fig1b" => (1.0, 0.8, (80, 500)),
        "fig1c" => (1.0, 0.95, (0, 500)),
        "fig1d" => (1.0, 0.95, (80, 500)),
        "fig1e" => (10.0, 0.8, (0, 500)),
        "fig1f" => (10.0, 0.8, (80, 500)),
        "fig2" => (10.0, 0.8, (80, 500)),
        _ => return None,
    };
    let mut cfg = ExperimentConfig {
        delta,
        mu,
        average_window: Some(window),
        seed: 1,
        ..ExperimentConfig::default()
    };
    if key == "fig2" {
        cfg.p0_list = [0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&s| vec![vec![s, 0.0], vec![0.0, s]])
            .collect();
        cfg.stationarity_trials = Some(1000);
        cfg.estimators = vec![EstimatorKind::Rseio];
    }
    Some(cfg)
}
