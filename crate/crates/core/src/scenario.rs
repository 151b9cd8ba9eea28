//! Scenario files: one JSON document describing workload, modes, costs,
//! scheduler, fabric, training and the baseline pairs to run.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fabric::{FabricConfig, TopologyKind};
use crate::perfmodel::{kv_capacity, CostModel, ParallelMode};
use crate::scheduler::{KvPolicy, PruneConfig, SchedulerConfig};
use crate::simengine::{Dispatch, GenCluster, GenOptions, PipelineConfig, SimSetup, TrainSetup};
use crate::workload::{ArimaOrder, WorkloadConfig};

/// Generation-side scheduling policy of a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchedulerKind {
    /// Static deployment with as many instances as possible.
    VerlTo,
    /// Static deployment with the widest tensor parallelism.
    VerlLo,
    /// Adaptive planning plus reactive balancing.
    Orchestrrl,
}

impl SchedulerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "verl-to" => Ok(SchedulerKind::VerlTo),
            "verl-lo" => Ok(SchedulerKind::VerlLo),
            "orchestrrl" => Ok(SchedulerKind::Orchestrrl),
            other => Err(Error::config(format!(
                "unknown scheduler {other:?} (known: verl-to, verl-lo, orchestrrl)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::VerlTo => "verl-to",
            SchedulerKind::VerlLo => "verl-lo",
            SchedulerKind::Orchestrrl => "orchestrrl",
        }
    }
}

/// A `(scheduler, fabric)` baseline pair, written `scheduler/fabric`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pair {
    pub scheduler: SchedulerKind,
    pub fabric: TopologyKind,
}

impl Pair {
    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| Error::config(format!("baseline {s:?} must look like scheduler/fabric")))?;
        Ok(Pair { scheduler: SchedulerKind::parse(a)?, fabric: TopologyKind::parse(b)? })
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.scheduler.name(), self.fabric.name())
    }
}

fn d_theta() -> f64 {
    0.25
}
fn d_true() -> bool {
    true
}
fn d_dt_pro() -> f64 {
    30.0
}
fn d_dt_react() -> f64 {
    5.0
}
fn d_epsilon() -> f64 {
    1.0
}
fn d_exact() -> f64 {
    2e6
}
fn d_beam() -> usize {
    32
}
fn d_smoothing() -> f64 {
    0.3
}
fn d_admit() -> f64 {
    0.9
}
fn d_chunk() -> f64 {
    64e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(default = "d_theta")]
    pub theta: f64,
    #[serde(default = "d_true")]
    pub theta_relative: bool,
    #[serde(default = "d_dt_pro")]
    pub dt_pro: f64,
    #[serde(default = "d_dt_react")]
    pub dt_react: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub kv_policy: KvPolicy,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default = "d_exact")]
    pub exact_threshold: f64,
    #[serde(default = "d_beam")]
    pub beam_width: usize,
    #[serde(default = "d_smoothing")]
    pub rate_smoothing: f64,
    #[serde(default = "d_true")]
    pub enable_planning: bool,
    #[serde(default = "d_true")]
    pub enable_balancing: bool,
    /// Feed true remaining lengths instead of forecasts.
    #[serde(default)]
    pub oracle_lengths: bool,
    /// Mode names the planner may choose; all modes when absent.
    #[serde(default)]
    pub candidates: Option<Vec<String>>,
    #[serde(default)]
    pub arima: ArimaOrder,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    #[serde(default = "d_dispatch")]
    pub dispatch: Dispatch,
    #[serde(default = "d_admit")]
    pub admit_fraction: f64,
    /// Mode used by verl-to; defaults to the mode with the fewest GPUs.
    #[serde(default)]
    pub throughput_mode: Option<String>,
    /// Mode used by verl-lo; defaults to the mode with the most GPUs.
    #[serde(default)]
    pub latency_mode: Option<String>,
    /// Starting deployment of orchestrrl; defaults to the throughput mode.
    #[serde(default)]
    pub initial_mode: Option<String>,
}

fn d_dispatch() -> Dispatch {
    Dispatch::RoundRobin
}

impl Default for GenSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn d_baselines() -> Vec<String> {
    vec!["verl-to/fat-tree".into(), "verl-lo/fat-tree".into(), "orchestrrl/fat-tree".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub workload: WorkloadConfig,
    pub modes: Vec<ParallelMode>,
    pub costs: CostModel,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub gen: GenSection,
    pub fabric: FabricConfig,
    pub train: TrainSetup,
    pub pipeline: PipelineConfig,
    /// Pipelining chunk for weight distribution, bytes.
    #[serde(default = "d_chunk")]
    pub weight_sync_chunk: f64,
    #[serde(default = "d_baselines")]
    pub baselines: Vec<String>,
    /// Pair that `compare` normalizes against.
    #[serde(default)]
    pub reference: Option<String>,
}

/// 1-based line of the first occurrence of `"key"` in `src`.
fn key_line(src: &str, key: &str) -> Option<usize> {
    let pat = format!("\"{key}\"");
    src.lines().position(|l| l.contains(&pat)).map(|i| i + 1)
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: cannot read scenario: {e}", path.display())))?;
        Self::parse(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}:{m}", path.display())),
            other => other,
        })
    }

    /// Parses and validates; errors are prefixed with `line:column:` or `line:`.
    pub fn parse(src: &str) -> Result<Self> {
        let scn: Scenario = serde_json::from_str(src)
            .map_err(|e| Error::config(format!("{}:{}: {}", e.line(), e.column(), strip_position(&e.to_string()))))?;
        scn.validate().map_err(|(key, msg)| {
            let line = key_line(src, &key).unwrap_or(1);
            Error::config(format!("{line}: {msg}"))
        })?;
        Ok(scn)
    }

    /// Builds from an already-parsed JSON value (used by sweeps).
    pub fn from_value(v: Value) -> Result<Self> {
        let scn: Scenario = serde_json::from_value(v).map_err(|e| Error::config(e.to_string()))?;
        scn.validate().map_err(|(_, m)| Error::config(m))?;
        Ok(scn)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("scenario serializes")
    }

    /// Short content hash of the fully-defaulted scenario.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("scenario serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn mode(&self, name: &str) -> Option<&ParallelMode> {
        self.modes.iter().find(|m| m.name == name)
    }

    pub fn pairs(&self) -> Result<Vec<Pair>> {
        self.baselines.iter().map(|s| Pair::parse(s)).collect()
    }

    pub fn reference_pair(&self) -> Result<Option<Pair>> {
        self.reference.as_deref().map(Pair::parse).transpose()
    }

    pub fn throughput_mode(&self) -> &ParallelMode {
        match &self.gen.throughput_mode {
            Some(n) => self.mode(n).expect("validated"),
            None => self.modes.iter().min_by_key(|m| m.gpus_required).expect("validated"),
        }
    }

    pub fn latency_mode(&self) -> &ParallelMode {
        match &self.gen.latency_mode {
            Some(n) => self.mode(n).expect("validated"),
            None => self.modes.iter().rev().max_by_key(|m| m.gpus_required).expect("validated"),
        }
    }

    fn initial_mode(&self) -> &ParallelMode {
        match &self.gen.initial_mode {
            Some(n) => self.mode(n).expect("validated"),
            None => self.throughput_mode(),
        }
    }

    fn candidates(&self) -> Vec<ParallelMode> {
        match &self.scheduler.candidates {
            Some(names) => names.iter().map(|n| self.mode(n).expect("validated").clone()).collect(),
            None => self.modes.clone(),
        }
    }

    /// Number of instance slots: the finest partition of the Gen GPUs.
    pub fn slots(&self) -> usize {
        let g = self.modes.iter().map(|m| m.gpus_required).min().unwrap_or(1).max(1);
        (self.pipeline.gen_gpus / g) as usize
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        let s = &self.scheduler;
        SchedulerConfig {
            theta: s.theta,
            theta_relative: s.theta_relative,
            dt_pro: s.dt_pro,
            dt_react: s.dt_react,
            epsilon: s.epsilon,
            kv_policy: s.kv_policy,
            prune: s.prune,
            exact_threshold: s.exact_threshold,
            beam_width: s.beam_width,
            rate_smoothing: s.rate_smoothing,
            enable_planning: s.enable_planning,
            enable_balancing: s.enable_balancing,
            ..SchedulerConfig::new(self.pipeline.gen_gpus, self.candidates())
        }
    }

    /// Simulation inputs for one pair and seed.
    pub fn setup(&self, pair: Pair, seed: u64) -> SimSetup {
        let slots = self.slots();
        let uniform = |m: &ParallelMode| {
            let count = (self.pipeline.gen_gpus / m.gpus_required) as usize;
            GenCluster::uniform(m, count, slots).modes
        };
        let (initial, orchestrator) = match pair.scheduler {
            SchedulerKind::VerlTo => (uniform(self.throughput_mode()), None),
            SchedulerKind::VerlLo => (uniform(self.latency_mode()), None),
            SchedulerKind::Orchestrrl => {
                (uniform(self.initial_mode()), Some((self.scheduler_config(), self.costs.clone())))
            }
        };
        let mut workload = self.workload.clone();
        workload.seed = seed;
        let mut fabric = self.fabric.clone();
        fabric.kind = pair.fabric;
        SimSetup {
            workload,
            pipeline: self.pipeline.clone(),
            initial,
            orchestrator,
            oracle_lengths: self.scheduler.oracle_lengths,
            gen: GenOptions { dispatch: self.gen.dispatch, admit_fraction: self.gen.admit_fraction, ..GenOptions::default() },
            train: self.train.clone(),
            fabric,
            weight_sync_chunk: self.weight_sync_chunk,
            arima: self.scheduler.arima,
        }
    }

    /// Checks cross-references and every sub-config. Errors carry the key
    /// used to anchor the message to a source line.
    fn validate(&self) -> std::result::Result<(), (String, String)> {
        let at = |key: &str| {
            let key = key.to_string();
            move |e: Error| (key.clone(), strip_config(e))
        };
        self.workload.validate().map_err(at("workload"))?;
        self.costs.validate().map_err(at("costs"))?;
        self.pipeline.validate().map_err(at("pipeline"))?;
        self.fabric.validate().map_err(at("fabric"))?;
        if self.modes.is_empty() {
            return Err(("modes".into(), "modes: at least one mode is required".into()));
        }
        for (i, m) in self.modes.iter().enumerate() {
            m.validate().map_err(at(&m.name))?;
            if self.modes[..i].iter().any(|o| o.name == m.name) {
                return Err((m.name.clone(), format!("modes: duplicate mode name {:?}", m.name)));
            }
            if m.gpus_required > self.pipeline.gen_gpus {
                return Err((m.name.clone(), format!("mode {}: needs more GPUs than pipeline.gen_gpus", m.name)));
            }
            let need = self.workload.max_prompt_len as u64 + self.workload.max_response_len as u64;
            if kv_capacity(m) < need {
                return Err((
                    m.name.clone(),
                    format!(
                        "mode {}: KV capacity {} tokens cannot hold one max-length request ({need} tokens)",
                        m.name,
                        kv_capacity(m)
                    ),
                ));
            }
        }
        let g = self.modes.iter().map(|m| m.gpus_required).min().unwrap();
        for m in &self.modes {
            if m.gpus_required % g != 0 || self.pipeline.gen_gpus % m.gpus_required != 0 {
                return Err((
                    m.name.clone(),
                    format!("mode {}: GPU count must divide pipeline.gen_gpus and be a multiple of {g}", m.name),
                ));
            }
        }
        for (key, name) in [
            ("throughput_mode", &self.gen.throughput_mode),
            ("latency_mode", &self.gen.latency_mode),
            ("initial_mode", &self.gen.initial_mode),
        ] {
            if let Some(n) = name {
                if self.mode(n).is_none() {
                    return Err((key.into(), format!("gen.{key}: unknown mode {n:?}")));
                }
            }
        }
        if let Some(names) = &self.scheduler.candidates {
            if names.is_empty() {
                return Err(("candidates".into(), "scheduler.candidates: empty list".into()));
            }
            for n in names {
                if self.mode(n).is_none() {
                    return Err(("candidates".into(), format!("scheduler.candidates: unknown mode {n:?}")));
                }
            }
        }
        if !(self.gen.admit_fraction > 0.0 && self.gen.admit_fraction <= 1.0) {
            return Err(("admit_fraction".into(), "gen.admit_fraction must be in (0,1]".into()));
        }
        if !(self.weight_sync_chunk > 0.0) {
            return Err(("weight_sync_chunk".into(), "weight_sync_chunk must be > 0".into()));
        }
        if self.baselines.is_empty() {
            return Err(("baselines".into(), "baselines: at least one pair is required".into()));
        }
        let pairs = self.pairs().map_err(at("baselines"))?;
        self.reference_pair().map_err(at("reference"))?;
        self.scheduler_config().validate().map_err(at("scheduler"))?;
        if pairs.iter().any(|p| p.scheduler == SchedulerKind::Orchestrrl) && !self.costs.is_free() {
            let mut names = vec!["none".to_string(), self.initial_mode().name.clone()];
            names.extend(self.candidates().into_iter().map(|m| m.name));
            names.dedup();
            for a in &names {
                for b in &names {
                    if a == b {
                        continue;
                    }
                    let key = format!("{a}->{b}");
                    if !self.costs.weight_reshard_time.contains_key(&key) {
                        return Err((
                            "weight_reshard_time".into(),
                            format!("costs.weight_reshard_time: unknown mode pair {key}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

// serde_json appends " at line L column C"; the prefix already carries it
fn strip_position(msg: &str) -> &str {
    match msg.rfind(" at line ") {
        Some(i) => &msg[..i],
        None => msg,
    }
}

/// Sets the value at a dotted path (`fabric.b_link`, `modes.0.max_batch`).
/// The path must already exist in `root`.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for part in path.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(format!("grid key {path:?} does not name a scenario field")))?;
    }
    *cur = value;
    Ok(())
}
