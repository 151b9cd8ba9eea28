//! Hybrid EPS/OCS fabric: ToR switches stay electrical and always on, while
//! an aggregation-layer OCS (ToR-granular ports) and a core-layer OCS
//! (pod-granular ports) carry reconfigurable circuits.

mod cost;
mod materialize;

pub use cost::{network_cost, CostBreakdown, PriceTable, TopologyKind};
pub use materialize::{
    aggregate_prune_quantize, allocate_circuits, apply_plan, lookahead_commit, select_template, validate_and_repair,
    validate_plan, DemandGraph, FabricController, FabricEvent, RepairReport, Schedule,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodRole {
    Train,
    Gen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodSpec {
    pub role: PodRole,
    pub servers: u32,
}

/// OCS device profile (reconfiguration delay and radix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsProfile {
    pub name: String,
    pub reconfig_time: f64,
    pub radix: u32,
}

const OCS_PROFILES: [(&str, f64, u32); 5] = [
    ("rotornet", 0.00001, 128),
    ("3d-mems", 0.010, 320),
    ("piezo", 0.025, 576),
    ("liquid-crystal", 0.100, 512),
    ("robotic", 120.0, 1008),
];

impl OcsProfile {
    pub fn by_name(name: &str) -> Result<Self> {
        OCS_PROFILES
            .iter()
            .find(|p| p.0 == name)
            .map(|&(n, t, r)| OcsProfile { name: n.to_string(), reconfig_time: t, radix: r })
            .ok_or_else(|| {
                let known: Vec<&str> = OCS_PROFILES.iter().map(|p| p.0).collect();
                Error::config(format!("unknown OCS profile {name:?} (known: {})", known.join(", ")))
            })
    }

    pub fn names() -> Vec<&'static str> {
        OCS_PROFILES.iter().map(|p| p.0).collect()
    }
}

impl Default for OcsProfile {
    fn default() -> Self {
        OcsProfile::by_name("3d-mems").unwrap()
    }
}

fn default_profile() -> String {
    "3d-mems".into()
}
fn default_b_link() -> f64 {
    400e9
}
fn default_prune() -> f64 {
    0.05
}
fn default_stream_circuits() -> u32 {
    1
}
fn default_fanout() -> u32 {
    4
}
fn default_radix() -> u32 {
    64
}

/// Physical layout of the cluster and fabric parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabricConfig {
    pub kind: TopologyKind,
    pub pods: Vec<PodSpec>,
    pub servers_per_tor: u32,
    pub nics_per_server: u32,
    /// Aggregation-OCS ports per ToR.
    pub agg_ports_per_tor: u32,
    /// Core-OCS ports per ToR (a pod owns the sum over its ToRs).
    pub core_ports_per_tor: u32,
    #[serde(default = "default_profile")]
    pub ocs_profile: String,
    /// Overrides the profile radix (ports per logical OCS).
    #[serde(default)]
    pub ocs_radix: Option<u32>,
    /// Per-link bandwidth, bits/s.
    #[serde(default = "default_b_link")]
    pub b_link: f64,
    /// Demand below this fraction of a link is pruned.
    #[serde(default = "default_prune")]
    pub prune_fraction: f64,
    /// Core circuits reserved per Gen pod for response streaming.
    #[serde(default = "default_stream_circuits")]
    pub response_stream_circuits: u32,
    #[serde(default = "default_fanout")]
    pub tree_fanout: u32,
    /// EPS switch radix used by the cost model and static fat-trees.
    #[serde(default = "default_radix")]
    pub switch_radix: u32,
    #[serde(default)]
    pub prices: PriceTable,
}

impl FabricConfig {
    /// A small uniform layout, handy for tests and examples.
    pub fn uniform(kind: TopologyKind, train_pods: u32, gen_pods: u32, servers_per_pod: u32) -> Self {
        let mut pods = Vec::new();
        pods.extend((0..train_pods).map(|_| PodSpec { role: PodRole::Train, servers: servers_per_pod }));
        pods.extend((0..gen_pods).map(|_| PodSpec { role: PodRole::Gen, servers: servers_per_pod }));
        FabricConfig {
            kind,
            pods,
            servers_per_tor: servers_per_pod.clamp(1, 4),
            nics_per_server: 8,
            agg_ports_per_tor: 8,
            core_ports_per_tor: 8,
            ocs_profile: default_profile(),
            ocs_radix: None,
            b_link: default_b_link(),
            prune_fraction: default_prune(),
            response_stream_circuits: default_stream_circuits(),
            tree_fanout: default_fanout(),
            switch_radix: default_radix(),
            prices: PriceTable::default(),
        }
    }

    pub fn profile(&self) -> Result<OcsProfile> {
        let mut p = OcsProfile::by_name(&self.ocs_profile)?;
        if let Some(r) = self.ocs_radix {
            p.radix = r;
        }
        Ok(p)
    }

    pub fn tors_of(&self, pod: usize) -> u32 {
        self.pods[pod].servers.div_ceil(self.servers_per_tor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pods.is_empty() {
            return Err(Error::config("fabric: no pods"));
        }
        if self.pods.iter().any(|p| p.servers == 0) || self.servers_per_tor == 0 || self.nics_per_server == 0 {
            return Err(Error::config("fabric: servers, servers_per_tor and nics_per_server must be positive"));
        }
        if !(self.b_link > 0.0) || !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(Error::config("fabric: need b_link > 0 and prune_fraction in [0,1)"));
        }
        if self.tree_fanout == 0 {
            return Err(Error::config("fabric: tree_fanout must be positive"));
        }
        let profile = self.profile()?;
        if self.kind == TopologyKind::RFabric {
            let tors: u32 = (0..self.pods.len()).map(|p| self.tors_of(p)).sum();
            for (layer, per_tor) in [("agg", self.agg_ports_per_tor), ("core", self.core_ports_per_tor)] {
                if tors * per_tor > profile.radix {
                    return Err(Error::config(format!(
                        "fabric: {layer} OCS needs {} ports but radix is {}",
                        tors * per_tor,
                        profile.radix
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn server_bw(&self) -> f64 {
        self.nics_per_server as f64 * self.b_link
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OcsLayer {
    Agg,
    Core,
}

impl fmt::Display for OcsLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OcsLayer::Agg => "agg",
            OcsLayer::Core => "core",
        })
    }
}

/// One logical OCS: port ranges owned by ToRs (agg) or pods (core).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsDevice {
    pub layer: OcsLayer,
    pub radix: u32,
    /// `owner[port]` is the ToR or pod behind the port.
    pub owner: Vec<usize>,
    /// Symmetric cross-connect map.
    pub cross: BTreeMap<u32, u32>,
}

impl OcsDevice {
    fn new(layer: OcsLayer, radix: u32, ports_per_owner: &[u32]) -> Self {
        let owner = ports_per_owner.iter().enumerate().flat_map(|(o, &n)| std::iter::repeat_n(o, n as usize)).collect();
        OcsDevice { layer, radix, owner, cross: BTreeMap::new() }
    }

    pub fn ports_of(&self, owner: usize) -> impl Iterator<Item = u32> + '_ {
        (0..self.owner.len() as u32).filter(move |&p| self.owner[p as usize] == owner)
    }

    pub fn owner_of(&self, port: u32) -> Option<usize> {
        self.owner.get(port as usize).copied()
    }

    pub fn circuits(&self) -> usize {
        self.cross.len() / 2
    }
}

/// A single OCS cross-connect (`a < b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub device: OcsLayer,
    pub a: u32,
    pub b: u32,
    /// bits/s
    pub bandwidth: f64,
    /// Demand rate that motivated the circuit (repair ranking), bits/s.
    pub demand: f64,
}

impl Circuit {
    pub fn key(&self) -> (OcsLayer, u32, u32) {
        (self.device, self.a.min(self.b), self.a.max(self.b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateKind {
    InterPodMesh,
    IntraPodIsolated,
    MulticastTree,
    BipartiteM2N,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitPlan {
    pub circuits: Vec<Circuit>,
    pub template: Option<TemplateKind>,
    pub epoch: u64,
    pub feasible: bool,
    /// Demanded endpoint pairs `(layer, a, b)` the plan must keep connected.
    pub demanded: Vec<(OcsLayer, usize, usize)>,
}

impl CircuitPlan {
    pub fn empty() -> Self {
        CircuitPlan { circuits: Vec::new(), template: None, epoch: 0, feasible: true, demanded: Vec::new() }
    }

    /// Circuits between two owners on a layer.
    pub fn count_between(&self, state: &FabricState, layer: OcsLayer, x: usize, y: usize) -> usize {
        let dev = state.device(layer);
        self.circuits
            .iter()
            .filter(|c| c.device == layer)
            .filter(|c| {
                let (oa, ob) = (dev.owner_of(c.a), dev.owner_of(c.b));
                (oa == Some(x) && ob == Some(y)) || (oa == Some(y) && ob == Some(x))
            })
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    TrainDP,
    TrainTP,
    TrainPP,
    TrainCP,
    TrainEP,
    GenTP,
    GenEP,
    GenPD,
    GenAF,
    WeightSync,
    ResponseStream,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "TrainDP" => Phase::TrainDP,
            "TrainTP" => Phase::TrainTP,
            "TrainPP" => Phase::TrainPP,
            "TrainCP" => Phase::TrainCP,
            "TrainEP" => Phase::TrainEP,
            "GenTP" => Phase::GenTP,
            "GenEP" => Phase::GenEP,
            "GenPD" => Phase::GenPD,
            "GenAF" => Phase::GenAF,
            "WeightSync" => Phase::WeightSync,
            "ResponseStream" => Phase::ResponseStream,
            other => return Err(Error::config(format!("unknown phase {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Primitive {
    AllReduce,
    AllToAll,
    P2P,
    M2N,
    T2G,
    G2T,
}

/// A communication phase: who talks, how much, and how much slack precedes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseIntent {
    pub phase: Phase,
    pub primitive: Primitive,
    /// Participating pods.
    pub group: Vec<usize>,
    pub volume: f64,
    pub slack: f64,
}

impl PhaseIntent {
    pub fn validate(&self) -> Result<()> {
        if self.group.is_empty() {
            return Err(Error::config(format!("{:?} intent has an empty group", self.phase)));
        }
        if !(self.slack >= 0.0) || !(self.volume >= 0.0) {
            return Err(Error::config(format!("{:?} intent needs slack >= 0 and volume >= 0", self.phase)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PodLevel,
    TorLevel,
}

/// Observed traffic between pods (core) or ToRs (agg) over `interval` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSummary {
    pub granularity: Granularity,
    pub entries: Vec<(usize, usize, f64)>,
    pub interval: f64,
}

impl DemandSummary {
    pub fn new(granularity: Granularity, interval: f64) -> Self {
        DemandSummary { granularity, entries: Vec::new(), interval }
    }
}

/// Live fabric state: devices, link parameters, the active plan and the
/// most recent transition window.
#[derive(Debug, Clone, PartialEq)]
pub struct FabricState {
    pub config: FabricConfig,
    pub agg: OcsDevice,
    pub core: OcsDevice,
    pub b_link: f64,
    pub t_ocs: f64,
    pub current: CircuitPlan,
    pub epoch: u64,
    /// `(start, end, circuits changed)` of the latest reconfiguration.
    pub window: Option<(f64, f64, Vec<(OcsLayer, u32, u32)>)>,
    /// Cross-connects before the latest reconfiguration.
    previous: CircuitPlan,
    /// Pod of every ToR.
    pub tor_pod: Vec<usize>,
}

impl FabricState {
    pub fn new(config: FabricConfig) -> Result<Self> {
        config.validate()?;
        let profile = config.profile()?;
        let tor_pod: Vec<usize> =
            (0..config.pods.len()).flat_map(|p| std::iter::repeat_n(p, config.tors_of(p) as usize)).collect();
        let agg = OcsDevice::new(OcsLayer::Agg, profile.radix, &vec![config.agg_ports_per_tor; tor_pod.len()]);
        let core_ports: Vec<u32> =
            (0..config.pods.len()).map(|p| config.tors_of(p) * config.core_ports_per_tor).collect();
        let core = OcsDevice::new(OcsLayer::Core, profile.radix, &core_ports);
        Ok(FabricState {
            b_link: config.b_link,
            t_ocs: profile.reconfig_time,
            agg,
            core,
            current: CircuitPlan::empty(),
            previous: CircuitPlan::empty(),
            epoch: 0,
            window: None,
            tor_pod,
            config,
        })
    }

    pub fn device(&self, layer: OcsLayer) -> &OcsDevice {
        match layer {
            OcsLayer::Agg => &self.agg,
            OcsLayer::Core => &self.core,
        }
    }

    fn device_mut(&mut self, layer: OcsLayer) -> &mut OcsDevice {
        match layer {
            OcsLayer::Agg => &mut self.agg,
            OcsLayer::Core => &mut self.core,
        }
    }

    pub fn pods_with(&self, role: PodRole) -> Vec<usize> {
        (0..self.config.pods.len()).filter(|&p| self.config.pods[p].role == role).collect()
    }

    pub fn tors_of_pod(&self, pod: usize) -> Vec<usize> {
        (0..self.tor_pod.len()).filter(|&t| self.tor_pod[t] == pod).collect()
    }

    /// Bandwidth of the cross-connect `(layer, a, b)` at time `t`.
    pub fn bandwidth_at(&self, layer: OcsLayer, a: u32, b: u32, t: f64) -> f64 {
        let key = (layer, a.min(b), a.max(b));
        let has = |plan: &CircuitPlan| plan.circuits.iter().any(|c| c.key() == key);
        match &self.window {
            Some((start, _, _)) if t < *start => {
                if has(&self.previous) { self.b_link } else { 0.0 }
            }
            Some((_, end, changed)) if t < *end => {
                if changed.contains(&key) || !has(&self.current) { 0.0 } else { self.b_link }
            }
            _ => {
                if has(&self.current) { self.b_link } else { 0.0 }
            }
        }
    }

    /// Checks port exclusivity, symmetry and radix bounds on both devices.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for dev in [&self.agg, &self.core] {
            for (&a, &b) in &dev.cross {
                if dev.cross.get(&b) != Some(&a) {
                    return Err(format!("{} OCS: cross-connect {a}->{b} is not symmetric", dev.layer));
                }
                if a == b {
                    return Err(format!("{} OCS: port {a} connected to itself", dev.layer));
                }
                if a >= dev.radix || a as usize >= dev.owner.len() {
                    return Err(format!("{} OCS: port {a} outside the device", dev.layer));
                }
            }
            if dev.circuits() > dev.radix as usize / 2 {
                return Err(format!("{} OCS: {} cross-connects exceed radix/2", dev.layer, dev.circuits()));
            }
        }
        Ok(())
    }

    fn install(&mut self, plan: &CircuitPlan) {
        self.agg.cross.clear();
        self.core.cross.clear();
        for c in &plan.circuits {
            let dev = self.device_mut(c.device);
            dev.cross.insert(c.a, c.b);
            dev.cross.insert(c.b, c.a);
        }
    }
}
