//! Collective and weight-synchronization times over a topology.

use serde::{Deserialize, Serialize};

use super::{simulate_flows, Flow, Topology};
use crate::error::{Error, Result};
use crate::fabric::{CircuitPlan, FabricState, OcsLayer, PodRole, TemplateKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollectivePrimitive {
    AllReduce,
    AllToAll,
    P2P,
    /// First `senders` participants send to the rest.
    M2N { senders: usize },
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    Ring,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveSpec {
    pub primitive: CollectivePrimitive,
    /// Server indices; repeated servers communicate locally for free.
    pub participants: Vec<usize>,
    pub volume_per_rank: f64,
    pub algorithm: Algorithm,
}

impl CollectiveSpec {
    /// Point-to-point flows `(src, dst, bytes)` realizing the collective.
    pub fn flows(&self) -> Vec<(usize, usize, f64)> {
        let p = &self.participants;
        let n = p.len();
        let v = self.volume_per_rank;
        let mut out = Vec::new();
        if n < 2 || v <= 0.0 {
            return out;
        }
        match (self.primitive, self.algorithm) {
            (CollectivePrimitive::AllReduce, Algorithm::Ring) => {
                let bytes = 2.0 * (n - 1) as f64 / n as f64 * v;
                out.extend((0..n).map(|i| (p[i], p[(i + 1) % n], bytes)));
            }
            (CollectivePrimitive::AllReduce, Algorithm::Direct) => {
                // reduce-scatter + all-gather with direct exchange of 1/n shards
                let bytes = 2.0 * v / n as f64;
                for i in 0..n {
                    out.extend((0..n).filter(|&j| j != i).map(|j| (p[i], p[j], bytes)));
                }
            }
            (CollectivePrimitive::AllToAll, _) => {
                let bytes = v / n as f64;
                for i in 0..n {
                    out.extend((0..n).filter(|&j| j != i).map(|j| (p[i], p[j], bytes)));
                }
            }
            (CollectivePrimitive::P2P, _) => out.extend((0..n - 1).map(|i| (p[i], p[i + 1], v))),
            (CollectivePrimitive::M2N { senders }, _) => {
                let m = senders.clamp(1, n - 1);
                let share = v / (n - m) as f64;
                for &s in &p[..m] {
                    out.extend(p[m..].iter().map(|&r| (s, r, share)));
                }
            }
            (CollectivePrimitive::Broadcast, Algorithm::Direct) => out.extend(p[1..].iter().map(|&r| (p[0], r, v))),
            (CollectivePrimitive::Broadcast, Algorithm::Ring) => out.extend((0..n - 1).map(|i| (p[i], p[i + 1], v))),
        }
        out.retain(|f| f.0 != f.1);
        out
    }
}

/// Makespan of the collective's flow set under max-min sharing, optionally
/// alongside `background` flows that compete for the same links.
pub fn collective_time(spec: &CollectiveSpec, topo: &Topology, start: f64, background: &[Flow]) -> Result<f64> {
    if spec.participants.is_empty() {
        return Err(Error::config("collective with no participants"));
    }
    let mut flows = Vec::new();
    for (s, d, b) in spec.flows() {
        flows.push(Flow::routed(topo, s, d, b, start)?);
    }
    if flows.is_empty() {
        return Ok(0.0);
    }
    let own = flows.len();
    flows.extend(background.iter().cloned());
    let done = simulate_flows(topo, &flows);
    let end = done[..own].iter().copied().fold(start, f64::max);
    if !end.is_finite() {
        return Err(Error::Deadlock("collective flow crosses a link with no capacity".into()));
    }
    Ok(end - start)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSyncTiming {
    /// Train source to every Gen pod root.
    pub stage1: f64,
    /// Intra-pod fan-out from each root.
    pub stage2: f64,
    pub total: f64,
    /// Contention-free stage-1 bound: `V / B_link` plus one chunk per extra hop.
    pub bound: f64,
}

/// Tree edges `(parent pod, child pod)` of a multicast plan.
fn tree_edges(plan: &CircuitPlan, state: &FabricState) -> Vec<(usize, usize)> {
    let dev = state.device(OcsLayer::Core);
    let mut e: Vec<(usize, usize)> = plan
        .circuits
        .iter()
        .filter(|c| c.device == OcsLayer::Core)
        .filter_map(|c| Some((dev.owner_of(c.a)?, dev.owner_of(c.b)?)))
        .collect();
    e.sort();
    e.dedup();
    e
}

/// Two-stage weight broadcast. With a multicast-tree `plan` the train
/// source relays over the tree's circuits, pipelined in `chunk` bytes;
/// otherwise (static fabrics) the source sends to every Gen pod root
/// directly. Distinct train servers source distinct top-level edges.
pub fn weight_sync_time(
    params_bytes: f64,
    topo: &Topology,
    pods: &[PodRole],
    tree: Option<(&CircuitPlan, &FabricState)>,
    chunk: f64,
    background: &[Flow],
) -> Result<WeightSyncTiming> {
    let trains: Vec<usize> = (0..pods.len()).filter(|&p| pods[p] == PodRole::Train).collect();
    let gens: Vec<usize> = (0..pods.len()).filter(|&p| pods[p] == PodRole::Gen).collect();
    let zero = WeightSyncTiming { stage1: 0.0, stage2: 0.0, total: 0.0, bound: 0.0 };
    if params_bytes <= 0.0 || gens.is_empty() {
        return Ok(zero);
    }
    // no train pod: trainer co-located with generation, weights stay local
    let Some(&source_pod) = trains.first() else {
        return Ok(zero);
    };
    let root_of = |pod: usize| topo.hosts_in_pod(pod).first().copied();
    let source_hosts = topo.hosts_in_pod(source_pod);
    // (parent pod, child pod, hop depth)
    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    let b_link;
    match tree {
        Some((plan, state)) => {
            if plan.template != Some(TemplateKind::MulticastTree) {
                return Err(Error::config("weight sync plan is not a multicast tree"));
            }
            b_link = state.b_link;
            let all = tree_edges(plan, state);
            let mut depth = vec![None; pods.len()];
            depth[source_pod] = Some(0usize);
            let mut frontier = vec![source_pod];
            while let Some(p) = frontier.pop() {
                for &(a, b) in &all {
                    for (x, y) in [(a, b), (b, a)] {
                        if x == p && depth[y].is_none() && pods[y] == PodRole::Gen {
                            depth[y] = Some(depth[p].unwrap() + 1);
                            edges.push((x, y, depth[y].unwrap()));
                            frontier.push(y);
                        }
                    }
                }
            }
            if let Some(&g) = gens.iter().find(|&&g| depth[g].is_none()) {
                return Err(Error::Connectivity { src: format!("pod {source_pod}"), dst: format!("gen pod {g}") });
            }
        }
        None => {
            b_link = topo.links.iter().map(|l| l.capacity).fold(f64::INFINITY, f64::min);
            edges.extend(gens.iter().map(|&g| (source_pod, g, 1)));
        }
    }
    edges.sort_by_key(|e| (e.2, e.1));
    let fill = chunk * 8.0 / b_link;
    let mut flows = Vec::new();
    let mut top = 0;
    for &(parent, child, depth) in &edges {
        let src = if parent == source_pod {
            let h = source_hosts[top % source_hosts.len()];
            top += 1;
            h
        } else {
            root_of(parent).unwrap()
        };
        let dst = root_of(child).ok_or_else(|| Error::config(format!("gen pod {child} has no servers")))?;
        flows.push(Flow::routed(topo, src, dst, params_bytes, (depth - 1) as f64 * fill)?);
    }
    let own = flows.len();
    let max_depth = edges.iter().map(|e| e.2).max().unwrap_or(1);
    let bound = params_bytes * 8.0 / b_link + (max_depth - 1) as f64 * fill;
    flows.extend(background.iter().cloned());
    let done = simulate_flows(topo, &flows);
    let arrival: Vec<(usize, f64)> = edges.iter().zip(&done[..own]).map(|(e, &t)| (e.1, t)).collect();
    let stage1 = arrival.iter().map(|a| a.1).fold(0.0, f64::max);

    // stage 2: pipelined chain through each Gen pod's servers
    let mut flows2 = Vec::new();
    for &(pod, t) in &arrival {
        let hosts = topo.hosts_in_pod(pod);
        for (i, w) in hosts.windows(2).enumerate() {
            flows2.push(Flow::routed(topo, w[0], w[1], params_bytes, t + i as f64 * fill)?);
        }
    }
    let total = simulate_flows(topo, &flows2).into_iter().fold(stage1, f64::max);
    if !total.is_finite() {
        return Err(Error::Deadlock("weight sync crosses a link with no capacity".into()));
    }
    Ok(WeightSyncTiming { stage1, stage2: total - stage1, total, bound })
}
