//! Flow-level network model: topology graphs for static Clos fabrics and the
//! hybrid fabric, max-min fair rate allocation and a fluid flow simulator.
//! Endpoints are servers; all capacities are bits/s and volumes bytes.

mod collective;
mod intents;

pub use collective::{collective_time, weight_sync_time, Algorithm, CollectiveSpec, CollectivePrimitive, WeightSyncTiming};
pub use intents::{
    build_phase_intents, default_slack, slack_estimate, CommRecord, GenLayout, ModelSpec, TrainParallelism,
};

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::fabric::{FabricConfig, FabricState, OcsLayer, TopologyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Host(usize),
    Tor(usize),
    /// Pod aggregation point: spine block in a fat-tree, core-OCS gateway in the hybrid fabric.
    Pod(usize),
    Core,
}

/// Directed link with an optional zero-capacity window.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub from: Node,
    pub to: Node,
    pub capacity: f64,
    /// `(start, end, capacity during)`.
    pub window: Option<(f64, f64, f64)>,
}

impl Link {
    pub fn capacity_at(&self, t: f64) -> f64 {
        match self.window {
            Some((s, e, c)) if t >= s && t < e => c,
            _ => self.capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub links: Vec<Link>,
    adj: BTreeMap<Node, Vec<usize>>,
    pub host_pod: Vec<usize>,
    pub host_tor: Vec<usize>,
    pub epoch: u64,
}

impl Topology {
    fn empty(cfg: &FabricConfig) -> Self {
        let mut host_pod = Vec::new();
        let mut host_tor = Vec::new();
        let mut tor = 0;
        for (p, pod) in cfg.pods.iter().enumerate() {
            for s in 0..pod.servers {
                host_pod.push(p);
                host_tor.push(tor + (s / cfg.servers_per_tor) as usize);
            }
            tor += cfg.tors_of(p) as usize;
        }
        Topology { links: Vec::new(), adj: BTreeMap::new(), host_pod, host_tor, epoch: 0 }
    }

    /// Adds both directions of a link.
    fn connect(&mut self, a: Node, b: Node, capacity: f64, window: Option<(f64, f64, f64)>) {
        for (x, y) in [(a, b), (b, a)] {
            self.adj.entry(x).or_default().push(self.links.len());
            self.links.push(Link { from: x, to: y, capacity, window });
        }
    }

    fn host_links(&mut self, cfg: &FabricConfig) {
        for h in 0..self.host_pod.len() {
            let tor = self.host_tor[h];
            self.connect(Node::Host(h), Node::Tor(tor), cfg.server_bw(), None);
        }
    }

    fn servers_on_tor(&self, tor: usize) -> usize {
        self.host_tor.iter().filter(|&&t| t == tor).count()
    }

    fn tor_pods(&self) -> Vec<usize> {
        let n = self.host_tor.iter().max().map_or(0, |m| m + 1);
        (0..n).map(|t| self.host_pod[self.host_tor.iter().position(|&x| x == t).unwrap()]).collect()
    }

    /// Three-tier Clos with ideal ECMP, collapsed to one aggregated link per
    /// tier. `oversubscription` divides ToR uplink capacity.
    pub fn fat_tree(cfg: &FabricConfig, oversubscription: f64) -> Self {
        let mut t = Topology::empty(cfg);
        t.host_links(cfg);
        let tor_pods = t.tor_pods();
        let mut pod_up = vec![0.0; cfg.pods.len()];
        for (tor, &pod) in tor_pods.iter().enumerate() {
            let up = t.servers_on_tor(tor) as f64 * cfg.server_bw() / oversubscription;
            t.connect(Node::Tor(tor), Node::Pod(pod), up, None);
            pod_up[pod] += up;
        }
        for (pod, up) in pod_up.into_iter().enumerate() {
            t.connect(Node::Pod(pod), Node::Core, up, None);
        }
        t
    }

    /// Static topology for a fabric kind, or the circuit topology of `state`.
    pub fn for_fabric(cfg: &FabricConfig, state: Option<&FabricState>) -> Result<Self> {
        match cfg.kind {
            TopologyKind::FatTree => Ok(Topology::fat_tree(cfg, 1.0)),
            TopologyKind::FatTreeOs3 => Ok(Topology::fat_tree(cfg, 3.0)),
            TopologyKind::RFabric => {
                let s = state.ok_or_else(|| Error::config("hybrid fabric topology needs a fabric state"))?;
                Ok(Topology::rfabric(s))
            }
        }
    }

    /// ToR EPS plus the active circuits of the hybrid fabric. Circuits that
    /// change in the latest reconfiguration carry nothing inside its window.
    pub fn rfabric(state: &FabricState) -> Self {
        let cfg = &state.config;
        let mut t = Topology::empty(cfg);
        t.epoch = state.epoch;
        t.host_links(cfg);
        let tor_pods = t.tor_pods();
        for tor in 0..tor_pods.len() {
            let up = cfg.core_ports_per_tor as f64 * state.b_link;
            if up > 0.0 {
                t.connect(Node::Tor(tor), Node::Pod(tor_pods[tor]), up, None);
            }
        }
        // aggregate circuits per endpoint pair: (total, unchanged during window)
        let mut pairs: BTreeMap<(OcsLayer, usize, usize), (u32, u32)> = BTreeMap::new();
        let changed = state.window.as_ref().map(|w| w.2.clone()).unwrap_or_default();
        for c in &state.current.circuits {
            let dev = state.device(c.device);
            let (Some(x), Some(y)) = (dev.owner_of(c.a), dev.owner_of(c.b)) else { continue };
            if x == y {
                continue;
            }
            let e = pairs.entry((c.device, x.min(y), x.max(y))).or_default();
            e.0 += 1;
            if !changed.contains(&c.key()) {
                e.1 += 1;
            }
        }
        for ((layer, x, y), (n, kept)) in pairs {
            let (a, b) = match layer {
                OcsLayer::Agg => (Node::Tor(x), Node::Tor(y)),
                OcsLayer::Core => (Node::Pod(x), Node::Pod(y)),
            };
            let window = state.window.as_ref().map(|w| (w.0, w.1, kept as f64 * state.b_link));
            t.connect(a, b, n as f64 * state.b_link, window);
        }
        t
    }

    /// Re-expresses reconfiguration windows relative to `origin`.
    pub fn shifted(mut self, origin: f64) -> Self {
        for l in &mut self.links {
            if let Some(w) = l.window.as_mut() {
                w.0 -= origin;
                w.1 -= origin;
            }
        }
        self
    }

    pub fn hosts(&self) -> usize {
        self.host_pod.len()
    }

    pub fn hosts_in_pod(&self, pod: usize) -> Vec<usize> {
        (0..self.hosts()).filter(|&h| self.host_pod[h] == pod).collect()
    }

    /// Fewest-hop path as link ids; neighbours explored in insertion order.
    pub fn path(&self, src: usize, dst: usize) -> Result<Vec<usize>> {
        if src == dst {
            return Ok(Vec::new());
        }
        if src >= self.hosts() || dst >= self.hosts() {
            return Err(Error::Connectivity { src: src.to_string(), dst: dst.to_string() });
        }
        let (s, d) = (Node::Host(src), Node::Host(dst));
        let mut prev: BTreeMap<Node, usize> = BTreeMap::new();
        let mut q = VecDeque::from([s]);
        while let Some(n) = q.pop_front() {
            if n == d {
                break;
            }
            for &l in self.adj.get(&n).map_or(&[][..], Vec::as_slice) {
                let to = self.links[l].to;
                // hosts are endpoints only, never transit
                if matches!(to, Node::Host(_)) && to != d {
                    continue;
                }
                if to != s && !prev.contains_key(&to) {
                    prev.insert(to, l);
                    q.push_back(to);
                }
            }
        }
        if !prev.contains_key(&d) {
            return Err(Error::Connectivity { src: format!("host {src}"), dst: format!("host {dst}") });
        }
        let mut path = Vec::new();
        let mut n = d;
        while n != s {
            let l = prev[&n];
            path.push(l);
            n = self.links[l].from;
        }
        path.reverse();
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub src: usize,
    pub dst: usize,
    pub bytes: f64,
    pub start_time: f64,
    pub path: Vec<usize>,
}

impl Flow {
    pub fn routed(topo: &Topology, src: usize, dst: usize, bytes: f64, start_time: f64) -> Result<Self> {
        Ok(Flow { src, dst, bytes, start_time, path: topo.path(src, dst)? })
    }
}

/// Progressive filling: raise all unfrozen flows together until a link
/// saturates, freeze its flows, repeat. Flows with an empty path get
/// infinite rate.
pub fn max_min_rates(paths: &[&[usize]], capacity: &[f64]) -> Vec<f64> {
    let n = paths.len();
    let mut rate = vec![0.0; n];
    let mut frozen = vec![false; n];
    let mut residual = capacity.to_vec();
    for (i, p) in paths.iter().enumerate() {
        if p.is_empty() {
            rate[i] = f64::INFINITY;
            frozen[i] = true;
        }
    }
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); capacity.len()];
    for (i, p) in paths.iter().enumerate() {
        for &l in p.iter() {
            users[l].push(i);
        }
    }
    loop {
        let mut best: Option<(f64, usize)> = None;
        for (l, u) in users.iter().enumerate() {
            let active = u.iter().filter(|&&i| !frozen[i]).count();
            if active == 0 {
                continue;
            }
            let share = residual[l].max(0.0) / active as f64;
            if best.is_none_or(|b| share < b.0) {
                best = Some((share, l));
            }
        }
        let Some((share, _)) = best else { break };
        for i in 0..n {
            if !frozen[i] {
                rate[i] += share;
                for &l in paths[i].iter() {
                    residual[l] -= share;
                }
            }
        }
        let eps = 1e-12;
        for (l, u) in users.iter().enumerate() {
            if residual[l] <= eps * capacity[l].max(1.0) {
                for &i in u {
                    frozen[i] = true;
                }
            }
        }
        if frozen.iter().all(|&f| f) {
            break;
        }
    }
    rate
}

/// Fluid simulation of `flows` over time-varying link capacities. Returns
/// each flow's completion time; flows stuck behind a permanently dead link
/// never finish (`INFINITY`).
pub fn simulate_flows(topo: &Topology, flows: &[Flow]) -> Vec<f64> {
    let n = flows.len();
    let mut done = vec![f64::NAN; n];
    let mut left: Vec<f64> = flows.iter().map(|f| f.bytes * 8.0).collect();
    let mut breakpoints: Vec<f64> = topo.links.iter().filter_map(|l| l.window).flat_map(|w| [w.0, w.1]).collect();
    breakpoints.extend(flows.iter().map(|f| f.start_time));
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();
    let mut t = flows.iter().map(|f| f.start_time).fold(f64::INFINITY, f64::min);
    if n == 0 {
        return done;
    }
    for i in 0..n {
        if left[i] <= 0.0 || flows[i].path.is_empty() {
            done[i] = flows[i].start_time;
        }
    }
    loop {
        let active: Vec<usize> = (0..n).filter(|&i| done[i].is_nan() && flows[i].start_time <= t).collect();
        let next_break = breakpoints.iter().copied().find(|&b| b > t + 1e-15);
        if active.is_empty() {
            match (0..n).any(|i| done[i].is_nan()) {
                true => match next_break {
                    Some(b) => {
                        t = b;
                        continue;
                    }
                    None => break,
                },
                false => break,
            }
        }
        let caps: Vec<f64> = topo.links.iter().map(|l| l.capacity_at(t)).collect();
        let paths: Vec<&[usize]> = active.iter().map(|&i| flows[i].path.as_slice()).collect();
        let rates = max_min_rates(&paths, &caps);
        let mut dt = f64::INFINITY;
        for (k, &i) in active.iter().enumerate() {
            if rates[k] > 0.0 {
                dt = dt.min(left[i] / rates[k]);
            }
        }
        if let Some(b) = next_break {
            dt = dt.min(b - t);
        }
        if !dt.is_finite() {
            break;
        }
        for (k, &i) in active.iter().enumerate() {
            left[i] -= rates[k] * dt;
            if left[i] <= 1e-9 * flows[i].bytes.max(1.0) {
                done[i] = t + dt;
            }
        }
        t += dt;
    }
    done.iter().map(|&d| if d.is_nan() { f64::INFINITY } else { d }).collect()
}
