//! Intent-to-circuit materialization: template choice, demand shaping,
//! port allocation, hard-constraint repair and slack-gated commit.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{
    Circuit, CircuitPlan, DemandSummary, FabricState, Granularity, OcsLayer, Phase, PhaseIntent, PodRole,
    TemplateKind,
};
use crate::error::{Error, Result};

pub fn select_template(intent: &PhaseIntent) -> TemplateKind {
    match intent.phase {
        Phase::TrainDP | Phase::TrainTP | Phase::TrainPP | Phase::TrainCP | Phase::TrainEP => TemplateKind::InterPodMesh,
        Phase::GenTP | Phase::GenEP | Phase::ResponseStream => TemplateKind::IntraPodIsolated,
        Phase::GenPD | Phase::GenAF => TemplateKind::BipartiteM2N,
        Phase::WeightSync => TemplateKind::MulticastTree,
    }
}

/// Quantized demand: unordered endpoint pair -> (peak directional rate in bits/s, circuits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandGraph {
    pub granularity: Granularity,
    pub edges: BTreeMap<(usize, usize), (f64, u32)>,
}

impl DemandGraph {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edges by descending rate, ties by pair.
    fn ranked(&self) -> Vec<((usize, usize), f64, u32)> {
        let mut v: Vec<_> = self.edges.iter().map(|(&k, &(r, n))| (k, r, n)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

/// Sums bytes per directed pair, converts to rate over the summary interval,
/// drops pairs below `prune_fraction · b_link` and quantizes the rest to
/// `ceil(rate / b_link)` circuits. Circuits are full duplex, so an unordered
/// pair needs the larger of its two directions.
pub fn aggregate_prune_quantize(d: &DemandSummary, b_link: f64, prune_fraction: f64) -> DemandGraph {
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(s, t, bytes) in &d.entries {
        if s != t && bytes > 0.0 {
            *directed.entry((s, t)).or_default() += bytes;
        }
    }
    let interval = d.interval.max(1e-6);
    let mut edges: BTreeMap<(usize, usize), (f64, u32)> = BTreeMap::new();
    for ((s, t), bytes) in directed {
        let rate = bytes * 8.0 / interval;
        let key = (s.min(t), s.max(t));
        let e = edges.entry(key).or_insert((0.0, 0));
        e.0 = e.0.max(rate);
    }
    edges.retain(|_, e| e.0 >= prune_fraction * b_link);
    for e in edges.values_mut() {
        e.1 = (e.0 / b_link).ceil().max(1.0) as u32;
    }
    DemandGraph { granularity: d.granularity, edges }
}

/// Free-port bookkeeping for one device during allocation.
struct PortPool {
    free: BTreeMap<usize, BTreeSet<u32>>,
}

impl PortPool {
    fn new(state: &FabricState, layer: OcsLayer, kept: &[Circuit]) -> Self {
        let dev = state.device(layer);
        let used: BTreeSet<u32> =
            kept.iter().filter(|c| c.device == layer).flat_map(|c| [c.a, c.b]).collect();
        let mut free: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
        for p in 0..dev.owner.len().min(dev.radix as usize) as u32 {
            if !used.contains(&p) {
                free.entry(dev.owner[p as usize]).or_default().insert(p);
            }
        }
        PortPool { free }
    }

    fn take_pair(&mut self, x: usize, y: usize) -> Option<(u32, u32)> {
        let a = *self.free.get(&x)?.first()?;
        let b = *self.free.get(&y)?.first()?;
        self.free.get_mut(&x).unwrap().remove(&a);
        self.free.get_mut(&y).unwrap().remove(&b);
        Some((a, b))
    }

    fn available(&self, x: usize) -> usize {
        self.free.get(&x).map_or(0, BTreeSet::len)
    }
}

fn circuit(layer: OcsLayer, a: u32, b: u32, bw: f64, demand: f64) -> Circuit {
    Circuit { device: layer, a: a.min(b), b: a.max(b), bandwidth: bw, demand }
}

/// Largest-demand-first allocation, one circuit per pair per pass until each
/// pair has its quantized count; leftover ports then top up pairs in the same
/// order so the template uses its full port budget.
fn allocate_edges(
    pool: &mut PortPool,
    layer: OcsLayer,
    ranked: &[((usize, usize), f64, u32)],
    b_link: f64,
    out: &mut Vec<Circuit>,
) -> BTreeMap<(usize, usize), u32> {
    let mut got: BTreeMap<(usize, usize), u32> = ranked.iter().map(|e| (e.0, 0)).collect();
    loop {
        let mut progress = false;
        for &((x, y), rate, want) in ranked {
            if got[&(x, y)] >= want {
                continue;
            }
            if let Some((a, b)) = pool.take_pair(x, y) {
                out.push(circuit(layer, a, b, b_link, rate));
                *got.get_mut(&(x, y)).unwrap() += 1;
                progress = true;
            }
        }
        if !progress {
            break;
        }
    }
    loop {
        let mut progress = false;
        for &((x, y), rate, _) in ranked {
            if let Some((a, b)) = pool.take_pair(x, y) {
                out.push(circuit(layer, a, b, b_link, rate));
                *got.get_mut(&(x, y)).unwrap() += 1;
                progress = true;
            }
        }
        if !progress {
            break;
        }
    }
    got
}

/// Pod of an endpoint at the given granularity.
fn pod_of(state: &FabricState, layer: OcsLayer, owner: usize) -> usize {
    match layer {
        OcsLayer::Core => owner,
        OcsLayer::Agg => state.tor_pod[owner],
    }
}

fn touched_layers(tpl: TemplateKind) -> &'static [OcsLayer] {
    match tpl {
        TemplateKind::InterPodMesh | TemplateKind::MulticastTree => &[OcsLayer::Core],
        TemplateKind::IntraPodIsolated => &[OcsLayer::Agg, OcsLayer::Core],
        TemplateKind::BipartiteM2N => &[OcsLayer::Agg],
    }
}

/// Builds a circuit plan for template `tpl` over the pods in `group`.
/// Circuits of the active plan on untouched layers, or not involving the
/// group, are carried over unchanged.
pub fn allocate_circuits(tpl: TemplateKind, g: &DemandGraph, state: &FabricState, group: &[usize]) -> CircuitPlan {
    let group: BTreeSet<usize> = group.iter().copied().collect();
    let layers = touched_layers(tpl);
    let kept: Vec<Circuit> = state
        .current
        .circuits
        .iter()
        .filter(|c| {
            if !layers.contains(&c.device) {
                return true;
            }
            let dev = state.device(c.device);
            let pods = [c.a, c.b].map(|p| dev.owner_of(p).map(|o| pod_of(state, c.device, o)));
            !pods.iter().any(|p| p.is_some_and(|p| group.contains(&p)))
        })
        .cloned()
        .collect();
    let mut circuits = kept.clone();
    let mut demanded = Vec::new();
    let mut feasible = true;
    let b = state.b_link;
    let in_group = |layer: OcsLayer, x: usize| group.contains(&pod_of(state, layer, x));

    match tpl {
        TemplateKind::InterPodMesh => {
            let ranked: Vec<_> = g
                .ranked()
                .into_iter()
                .filter(|((x, y), _, _)| {
                    g.granularity == Granularity::PodLevel && in_group(OcsLayer::Core, *x) && in_group(OcsLayer::Core, *y)
                })
                .collect();
            let mut pool = PortPool::new(state, OcsLayer::Core, &kept);
            let got = allocate_edges(&mut pool, OcsLayer::Core, &ranked, b, &mut circuits);
            for ((x, y), n) in got {
                demanded.push((OcsLayer::Core, x, y));
                feasible &= n > 0;
            }
        }
        TemplateKind::IntraPodIsolated | TemplateKind::BipartiteM2N => {
            let ranked: Vec<_> = g
                .ranked()
                .into_iter()
                .filter(|((x, y), _, _)| {
                    g.granularity == Granularity::TorLevel
                        && in_group(OcsLayer::Agg, *x)
                        && state.tor_pod[*x] == state.tor_pod[*y]
                })
                .collect();
            let mut pool = PortPool::new(state, OcsLayer::Agg, &kept);
            let got = allocate_edges(&mut pool, OcsLayer::Agg, &ranked, b, &mut circuits);
            for ((x, y), n) in got {
                demanded.push((OcsLayer::Agg, x, y));
                feasible &= n > 0;
            }
            if tpl == TemplateKind::IntraPodIsolated {
                let trains = state.pods_with(PodRole::Train);
                let mut core = PortPool::new(state, OcsLayer::Core, &kept);
                let gens = group.iter().filter(|&&p| state.config.pods[p].role == PodRole::Gen);
                for (i, &gp) in gens.enumerate() {
                    if trains.is_empty() {
                        break;
                    }
                    let tp = trains[i % trains.len()];
                    demanded.push((OcsLayer::Core, gp.min(tp), gp.max(tp)));
                    let mut n = 0;
                    for _ in 0..state.config.response_stream_circuits {
                        if let Some((a, bb)) = core.take_pair(gp, tp) {
                            circuits.push(circuit(OcsLayer::Core, a, bb, b, b));
                            n += 1;
                        }
                    }
                    feasible &= n > 0 || state.config.response_stream_circuits == 0;
                }
            }
        }
        TemplateKind::MulticastTree => {
            let root = group.iter().copied().find(|&p| state.config.pods[p].role == PodRole::Train);
            let leaves: Vec<usize> =
                group.iter().copied().filter(|&p| state.config.pods[p].role == PodRole::Gen).collect();
            match root {
                None => feasible = leaves.is_empty(),
                Some(root) => {
                    let mut pool = PortPool::new(state, OcsLayer::Core, &kept);
                    let fanout = state.config.tree_fanout as usize;
                    let mut frontier = VecDeque::from([root]);
                    let mut pending: VecDeque<usize> = leaves.into_iter().collect();
                    while let Some(parent) = frontier.pop_front() {
                        let mut kids = 0;
                        while kids < fanout && !pending.is_empty() {
                            if pool.available(parent) == 0 {
                                break;
                            }
                            let child = pending.pop_front().unwrap();
                            let rate = g.edges.get(&(parent.min(child), parent.max(child))).map_or(b, |e| e.0);
                            demanded.push((OcsLayer::Core, parent.min(child), parent.max(child)));
                            match pool.take_pair(parent, child) {
                                Some((a, bb)) => {
                                    circuits.push(circuit(OcsLayer::Core, a, bb, b, rate));
                                    frontier.push_back(child);
                                }
                                None => feasible = false,
                            }
                            kids += 1;
                        }
                    }
                    feasible &= pending.is_empty();
                }
            }
        }
    }
    demanded.sort();
    demanded.dedup();
    CircuitPlan { circuits, template: Some(tpl), epoch: state.epoch, feasible, demanded }
}

/// Hard-constraint violations of a plan against the devices in `state`.
pub fn validate_plan(plan: &CircuitPlan, state: &FabricState) -> Vec<String> {
    let mut v = Vec::new();
    let mut used: BTreeSet<(OcsLayer, u32)> = BTreeSet::new();
    let mut count: BTreeMap<OcsLayer, usize> = BTreeMap::new();
    for c in &plan.circuits {
        let dev = state.device(c.device);
        for p in [c.a, c.b] {
            if p >= dev.radix || dev.owner_of(p).is_none() {
                v.push(format!("{} OCS: port {p} does not exist", c.device));
            }
            if !used.insert((c.device, p)) {
                v.push(format!("{} OCS: port {p} used twice", c.device));
            }
        }
        if c.a == c.b {
            v.push(format!("{} OCS: circuit loops port {}", c.device, c.a));
        }
        *count.entry(c.device).or_default() += 1;
    }
    for (layer, n) in count {
        let radix = state.device(layer).radix as usize;
        if n > radix / 2 {
            v.push(format!("{layer} OCS: {n} circuits exceed radix {radix}"));
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub ok: bool,
    pub dropped: usize,
    /// Device whose constraint forced a demanded pair or the radix bound to give way.
    pub binding: Option<OcsLayer>,
    pub violations: Vec<String>,
}

/// Keeps circuits in descending demand order while they fit; a circuit that
/// conflicts with an already-kept one (shared port, missing port, radix
/// overrun) is dropped, so conflicts always cost the lower-demand circuit.
pub fn validate_and_repair(plan: &CircuitPlan, state: &FabricState) -> (CircuitPlan, RepairReport) {
    let violations = validate_plan(plan, state);
    if violations.is_empty() && plan.feasible {
        let ok = plan.demanded.iter().all(|&(l, x, y)| plan.count_between(state, l, x, y) > 0);
        let report = RepairReport { ok, dropped: 0, binding: None, violations };
        return (plan.clone(), report);
    }
    let mut order: Vec<usize> = (0..plan.circuits.len()).collect();
    order.sort_by(|&i, &j| plan.circuits[j].demand.total_cmp(&plan.circuits[i].demand).then(i.cmp(&j)));
    let mut used: BTreeSet<(OcsLayer, u32)> = BTreeSet::new();
    let mut count: BTreeMap<OcsLayer, usize> = BTreeMap::new();
    let mut keep = vec![false; plan.circuits.len()];
    let mut binding = None;
    for i in order {
        let c = &plan.circuits[i];
        let dev = state.device(c.device);
        let exists = [c.a, c.b].iter().all(|&p| p < dev.radix && dev.owner_of(p).is_some()) && c.a != c.b;
        let free = !used.contains(&(c.device, c.a)) && !used.contains(&(c.device, c.b));
        let n = count.entry(c.device).or_default();
        if *n >= dev.radix as usize / 2 {
            binding.get_or_insert(c.device);
            continue;
        }
        if exists && free {
            used.insert((c.device, c.a));
            used.insert((c.device, c.b));
            *n += 1;
            keep[i] = true;
        }
    }
    let mut repaired = plan.clone();
    repaired.circuits = plan.circuits.iter().zip(&keep).filter(|(_, &k)| k).map(|(c, _)| c.clone()).collect();
    let dropped = plan.circuits.len() - repaired.circuits.len();
    let radix_overrun = binding.is_some();
    let mut lost = false;
    for &(l, x, y) in &plan.demanded {
        if repaired.count_between(state, l, x, y) == 0 {
            lost = true;
            binding.get_or_insert(l);
        }
    }
    repaired.feasible = plan.feasible && !lost;
    let ok = repaired.feasible && !radix_overrun;
    (repaired, RepairReport { ok, dropped, binding, violations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    NoReconfig,
    Commit { start: f64, end: f64 },
    Abort { reason: String },
}

/// Commits the swap inside the slack window, or keeps the active plan when
/// the slack cannot hide the OCS delay or the plan is infeasible.
pub fn lookahead_commit(plan: &CircuitPlan, slack: f64, state: &FabricState, now: f64) -> Schedule {
    if !plan.feasible {
        return Schedule::Abort { reason: "infeasible plan".into() };
    }
    if slack < state.t_ocs {
        return Schedule::NoReconfig;
    }
    Schedule::Commit { start: now, end: now + state.t_ocs }
}

/// Installs `plan`; circuits that change carry no bandwidth during
/// `[commit_time, commit_time + T_ocs)`.
pub fn apply_plan(state: &mut FabricState, plan: &CircuitPlan, commit_time: f64) -> Result<()> {
    let v = validate_plan(plan, state);
    if !v.is_empty() {
        return Err(Error::InvalidPlan(v.join("; ")));
    }
    let old: BTreeSet<_> = state.current.circuits.iter().map(Circuit::key).collect();
    let new: BTreeSet<_> = plan.circuits.iter().map(Circuit::key).collect();
    let changed: Vec<_> = old.symmetric_difference(&new).copied().collect();
    state.previous = state.current.clone();
    state.epoch += 1;
    state.current = plan.clone();
    state.current.epoch = state.epoch;
    state.window = Some((commit_time, commit_time + state.t_ocs, changed));
    state.install(plan);
    state.check_invariants().map_err(Error::InvalidPlan)
}

/// One line of the fabric event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabricEvent {
    pub time: f64,
    pub epoch: u64,
    pub phase: Phase,
    pub template: Option<TemplateKind>,
    pub slack: f64,
    pub t_ocs: f64,
    pub schedule: Schedule,
    pub circuits: usize,
    pub changed: usize,
    pub dropped: usize,
}

/// Control proxy: turns phase intents plus observed demand into committed
/// circuit plans and keeps an auditable event log.
#[derive(Debug, Clone)]
pub struct FabricController {
    pub state: FabricState,
    pub log: Vec<FabricEvent>,
    /// Active plan per epoch, for topology dumps.
    pub history: Vec<CircuitPlan>,
}

impl FabricController {
    pub fn new(state: FabricState) -> Self {
        FabricController { state, log: Vec::new(), history: Vec::new() }
    }

    pub fn materialize(&mut self, intent: &PhaseIntent, demand: &DemandSummary, now: f64) -> Result<Schedule> {
        intent.validate()?;
        let tpl = select_template(intent);
        let mut event = FabricEvent {
            time: now,
            epoch: self.state.epoch,
            phase: intent.phase,
            template: Some(tpl),
            slack: intent.slack,
            t_ocs: self.state.t_ocs,
            schedule: Schedule::NoReconfig,
            circuits: self.state.current.circuits.len(),
            changed: 0,
            dropped: 0,
        };
        if intent.slack < self.state.t_ocs {
            self.log.push(event);
            return Ok(Schedule::NoReconfig);
        }
        let g = aggregate_prune_quantize(demand, self.state.b_link, self.state.config.prune_fraction);
        let plan = allocate_circuits(tpl, &g, &self.state, &intent.group);
        let (plan, report) = validate_and_repair(&plan, &self.state);
        event.dropped = report.dropped;
        let schedule = if report.ok {
            lookahead_commit(&plan, intent.slack, &self.state, now)
        } else {
            Schedule::Abort { reason: format!("repair failed: {}", report.violations.join("; ")) }
        };
        if let Schedule::Commit { start, .. } = schedule {
            apply_plan(&mut self.state, &plan, start)?;
            event.changed = self.state.window.as_ref().map_or(0, |w| w.2.len());
            event.circuits = plan.circuits.len();
            self.history.push(self.state.current.clone());
        }
        event.epoch = self.state.epoch;
        event.schedule = schedule.clone();
        self.log.push(event);
        Ok(schedule)
    }

    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|e| serde_json::to_string(e).expect("event serializes") + "\n").collect()
    }
}
