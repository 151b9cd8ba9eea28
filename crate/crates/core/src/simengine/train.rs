//! Training step timing: a linear compute model plus the step's collectives
//! over the active topology.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fabric::{Phase, PodRole};
use crate::netmodel::{collective_time, Algorithm, CollectivePrimitive, CollectiveSpec, ModelSpec, Topology, TrainParallelism};
use crate::workload::Request;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub parallelism: TrainParallelism,
    pub model: ModelSpec,
    /// Fixed seconds per step.
    pub compute_base: f64,
    /// Seconds per trained token (prompt plus response).
    pub compute_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub compute: f64,
    pub comm: f64,
    pub total: f64,
    /// `(phase, seconds, bytes per rank)` per collective.
    pub phases: Vec<(Phase, f64, f64)>,
}

impl TrainTiming {
    pub fn zero() -> Self {
        TrainTiming { compute: 0.0, comm: 0.0, total: 0.0, phases: Vec::new() }
    }
}

fn spread(hosts: &[usize], n: u32) -> Vec<usize> {
    let n = n.max(1) as usize;
    (0..n).map(|i| hosts[i * hosts.len() / n]).collect()
}

/// Collectives of one training step over `topo`. Tensor parallelism stays
/// inside a server and never reaches the network.
pub fn train_collectives(setup: &TrainSetup, tokens: u64, topo: &Topology, pods: &[PodRole]) -> Vec<(Phase, CollectiveSpec)> {
    let p = &setup.parallelism;
    let m = &setup.model;
    let hosts: Vec<usize> = (0..pods.len())
        .filter(|&i| pods[i] == PodRole::Train)
        .flat_map(|i| topo.hosts_in_pod(i))
        .collect();
    if hosts.is_empty() || tokens == 0 {
        return Vec::new();
    }
    let act = p.micro_batch_tokens as f64 * m.hidden as f64 * m.bytes_per_param;
    let micro = tokens.div_ceil(p.micro_batch_tokens.max(1) as u64 * p.dp.max(1) as u64) as f64;
    let spec = |primitive, n: u32, volume: f64, algorithm| CollectiveSpec {
        primitive,
        participants: spread(&hosts, n),
        volume_per_rank: volume,
        algorithm,
    };
    let mut out = Vec::new();
    if p.dp > 1 {
        let shard = m.weight_bytes() / (p.tp * p.pp).max(1) as f64;
        out.push((Phase::TrainDP, spec(CollectivePrimitive::AllReduce, p.dp, shard, Algorithm::Ring)));
    }
    if p.pp > 1 {
        out.push((Phase::TrainPP, spec(CollectivePrimitive::P2P, p.pp, 2.0 * act * micro, Algorithm::Direct)));
    }
    if p.ep > 1 {
        out.push((Phase::TrainEP, spec(CollectivePrimitive::AllToAll, p.ep, act * micro, Algorithm::Direct)));
    }
    if p.cp > 1 {
        let prim = if p.cp_all_to_all { CollectivePrimitive::AllToAll } else { CollectivePrimitive::P2P };
        out.push((Phase::TrainCP, spec(prim, p.cp, act * micro / p.cp as f64, Algorithm::Direct)));
    }
    out
}

/// Time of one training step on `batch`; collectives run back to back
/// after compute, starting at time zero of `topo`.
pub fn run_train_step(batch: &[Request], setup: &TrainSetup, topo: &Topology, pods: &[PodRole]) -> Result<TrainTiming> {
    if batch.is_empty() {
        return Ok(TrainTiming::zero());
    }
    let tokens: u64 = batch.iter().map(|r| r.true_total_len as u64).sum();
    let compute = setup.compute_base + setup.compute_per_token * tokens as f64;
    let mut phases = Vec::new();
    let mut comm = 0.0;
    for (phase, spec) in train_collectives(setup, tokens, topo, pods) {
        let t = collective_time(&spec, topo, comm, &[])?;
        comm += t;
        phases.push((phase, t, spec.volume_per_rank));
    }
    Ok(TrainTiming { compute, comm, total: compute + comm, phases })
}
