//! Experiment configuration: defaults, then a JSON file, then `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{BudgetPolicy, RUNS_TO_BEAT_CAP};
use crate::candidate::{OpConfig, OperationKind};
use crate::engine::{HyperParams, InnerSteps, Problem, TrainSchedule};
use crate::error::{Error, Result};
use crate::harness::{Method, Study};
use crate::hyperopt::{BohbSettings, HPSpace};
use crate::signal::{CosineConfig, Degradation, DegradationOperator, DEFAULT_SIGMA_B};
use crate::space::{Layout, SpaceSpec};

pub const OUTPUT_DIR_ENV: &str = "DAS1D_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "results";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub degradation: Degradation,
    pub sigma_n: f64,
    pub n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            degradation: Degradation::Blur,
            sigma_n: CosineConfig::default().sigma_n,
            n: CosineConfig::default().n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Sequential,
    Cell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub topology: Topology,
    pub depth: usize,
    pub cells: usize,
    pub states: usize,
    pub global_residual: bool,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            topology: Topology::Sequential,
            depth: 10,
            cells: 2,
            states: 5,
            global_residual: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Opset {
    Good,
    All,
}

/// A preset name or a full inline record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum HpChoice {
    Preset(String),
    Inline(HyperParams),
}

impl TryFrom<Value> for HpChoice {
    type Error = String;

    fn try_from(v: Value) -> std::result::Result<Self, String> {
        match v {
            Value::String(name) => {
                HyperParams::preset(&name).map_err(|e| e.to_string())?;
                Ok(HpChoice::Preset(name.to_ascii_lowercase()))
            }
            Value::Object(_) => serde_json::from_value(v)
                .map(HpChoice::Inline)
                .map_err(|e| format!("hp: {e}")),
            other => Err(format!("hp must be a preset name or an object, got {other}")),
        }
    }
}

impl From<HpChoice> for Value {
    fn from(h: HpChoice) -> Value {
        match h {
            HpChoice::Preset(name) => Value::String(name),
            HpChoice::Inline(hp) => serde_json::to_value(hp).expect("plain record"),
        }
    }
}

impl HpChoice {
    pub fn resolve(&self) -> Result<HyperParams> {
        match self {
            HpChoice::Preset(name) => HyperParams::preset(name),
            HpChoice::Inline(hp) => Ok(*hp),
        }
    }

    pub fn label(&self) -> String {
        match self {
            HpChoice::Preset(name) => name.to_ascii_uppercase(),
            HpChoice::Inline(_) => "custom".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunsToBeatConfig {
    /// When set, `baseline` counts random evaluations until this PSNR is beaten.
    pub threshold: Option<f64>,
    pub repetitions: usize,
    pub cap: usize,
}

impl Default for RunsToBeatConfig {
    fn default() -> Self {
        RunsToBeatConfig {
            threshold: None,
            repetitions: 10,
            cap: RUNS_TO_BEAT_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Study id; derived from method, data and opset when absent.
    pub study: Option<String>,
    pub data: DataConfig,
    pub space: SpaceConfig,
    pub opset: Opset,
    pub method: Method,
    pub hp: HpChoice,
    pub schedule: TrainSchedule,
    pub ops: OpConfig,
    pub inner_steps: InnerSteps,
    pub n_trials: usize,
    pub base_seed: u64,
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub fixed_op: OperationKind,
    pub budget: BudgetPolicy,
    pub runs_to_beat: RunsToBeatConfig,
    pub bohb: BohbSettings,
    pub hp_space: HPSpace,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            study: None,
            data: DataConfig::default(),
            space: SpaceConfig::default(),
            opset: Opset::All,
            method: Method::Das,
            hp: HpChoice::Preset("h1".into()),
            schedule: TrainSchedule::default(),
            ops: OpConfig::default(),
            inner_steps: InnerSteps::Zero,
            n_trials: 25,
            base_seed: 0,
            parallelism: std::thread::available_parallelism().map_or(1, usize::from),
            output_dir: std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
            fixed_op: OperationKind::Net,
            budget: BudgetPolicy::default(),
            runs_to_beat: RunsToBeatConfig::default(),
            bohb: BohbSettings::default(),
            hp_space: HPSpace::default(),
        }
    }
}

/// Parse a `key=value` override; the value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((key.to_string(), value))
}

/// Set the dotted `key` inside `root`. Every segment must already exist, so typos are
/// reported with the key instead of being silently added.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        // an inline field of a preset expands the preset first
        if let (Value::String(name), true) = (&*node, i > 0 && segments[i - 1] == "hp") {
            *node = serde_json::to_value(HyperParams::preset(name)?)?;
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "unknown key {key:?}: {:?} is not a section",
                segments[..i].join(".")
            ))
        })?;
        if !obj.contains_key(*seg) && !optional_key(&segments[..=i]) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        if i + 1 == segments.len() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*seg).expect("checked above");
    }
    unreachable!("split yields at least one segment")
}

// keys that serialize as absent or whose shape depends on a tag
fn optional_key(path: &[&str]) -> bool {
    matches!(path, ["budget", "count" | "seconds" | "mode"])
}

impl ExperimentConfig {
    /// Defaults, then `file` if given, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut value = serde_json::to_value(ExperimentConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let from_file: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            // check the file on its own so unknown keys name themselves
            serde_json::from_value::<ExperimentConfig>(from_file.clone())
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, from_file);
        }
        for (key, v) in overrides {
            set_path(&mut value, key, v.clone())?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, ok: bool, valid: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} out of range; valid: {valid}")))
            }
        };
        range("n_trials", self.n_trials >= 1, ">= 1")?;
        range("parallelism", self.parallelism >= 1, ">= 1")?;
        range(
            "data.sigma_n",
            self.data.sigma_n.is_finite() && self.data.sigma_n >= 0.0,
            "[0, inf)",
        )?;
        range("data.n", self.data.n >= 8, ">= 8")?;
        range("runs_to_beat.repetitions", self.runs_to_beat.repetitions >= 1, ">= 1")?;
        range("runs_to_beat.cap", self.runs_to_beat.cap >= 1, ">= 1")?;
        self.hp.resolve()?.validate()?;
        self.schedule.validate().map_err(as_config)?;
        self.budget.validate().map_err(as_config)?;
        self.spec().validate().map_err(as_config)?;
        self.hp_space.validate().map_err(as_config)?;
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        match self.space.topology {
            Topology::Sequential => Layout::Sequential {
                depth: self.space.depth,
            },
            Topology::Cell => Layout::Cell {
                cells: self.space.cells,
                states: self.space.states,
            },
        }
    }

    pub fn spec(&self) -> SpaceSpec {
        let layout = self.layout();
        SpaceSpec {
            layout,
            opset: match self.opset {
                Opset::Good => SpaceSpec::good_ops(),
                Opset::All => SpaceSpec::all_ops(&layout),
            },
            global_residual: self.space.global_residual,
        }
    }

    pub fn problem(&self) -> Result<Problem> {
        let op = DegradationOperator::new(self.data.degradation, self.data.n, DEFAULT_SIGMA_B)?;
        let signal = CosineConfig {
            n: self.data.n,
            sigma_n: self.data.sigma_n,
            ..CosineConfig::default()
        };
        Problem::new(op, signal, self.ops.clone())
    }

    pub fn study_id(&self) -> String {
        self.study.clone().unwrap_or_else(|| {
            let data = match self.data.degradation {
                Degradation::Blur => "blur",
                Degradation::Downsample => "downsample",
            };
            let opset = match self.opset {
                Opset::Good => "good",
                Opset::All => "all",
            };
            format!("{}-{data}-{opset}", self.method)
        })
    }

    pub fn study(&self) -> Result<Study> {
        Ok(Study {
            id: self.study_id(),
            method: self.method,
            spec: self.spec(),
            problem: self.problem()?,
            hp: self.hp.resolve()?,
            hp_label: self.hp.label(),
            sched: self.schedule,
            n_trials: self.n_trials,
            base_seed: self.base_seed,
            budget: self.budget,
            fixed_op: self.fixed_op,
            inner: self.inner_steps,
        })
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(msg) => Error::Config(msg),
        e => e,
    }
}

// objects merge key by key; anything else replaces
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && k != "budget" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}
