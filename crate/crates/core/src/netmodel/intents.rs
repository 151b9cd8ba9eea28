//! Per-iteration communication intents and slack estimation.

use serde::{Deserialize, Serialize};

use crate::fabric::{Phase, PhaseIntent, PodRole, Primitive};

/// Model dimensions driving communication volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub params: f64,
    pub bytes_per_param: f64,
    pub hidden: u32,
    pub layers: u32,
}

impl ModelSpec {
    pub fn weight_bytes(&self) -> f64 {
        self.params * self.bytes_per_param
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParallelism {
    pub dp: u32,
    pub tp: u32,
    pub pp: u32,
    #[serde(default = "one")]
    pub ep: u32,
    #[serde(default = "one")]
    pub cp: u32,
    /// Tokens per micro-batch per rank, for activation volumes.
    pub micro_batch_tokens: u32,
    /// Emit CP traffic as AllToAll instead of P2P.
    #[serde(default)]
    pub cp_all_to_all: bool,
}

fn one() -> u32 {
    1
}

/// Gen-side deployment summary: TP width and whether it uses EP / PD / AFD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLayout {
    pub tp: u32,
    #[serde(default)]
    pub ep: u32,
    #[serde(default)]
    pub pd: bool,
    #[serde(default)]
    pub afd: bool,
    /// Bytes of responses streamed back per iteration.
    #[serde(default)]
    pub response_bytes: f64,
}

/// Default slack per phase class, seconds.
pub fn default_slack(phase: Phase) -> f64 {
    match phase {
        Phase::GenTP => 0.0005,
        Phase::GenEP | Phase::GenAF => 0.0008,
        Phase::GenPD => 2.0,
        Phase::TrainTP => 0.030,
        Phase::TrainCP | Phase::TrainEP => 0.050,
        Phase::TrainPP => 0.200,
        Phase::TrainDP => 0.300,
        Phase::WeightSync => 5.0,
        Phase::ResponseStream => 1.0,
    }
}

/// Intents for one iteration over the given pod roles.
pub fn build_phase_intents(train: &TrainParallelism, gen: &GenLayout, model: &ModelSpec, pods: &[PodRole]) -> Vec<PhaseIntent> {
    let trains: Vec<usize> = (0..pods.len()).filter(|&p| pods[p] == PodRole::Train).collect();
    let gens: Vec<usize> = (0..pods.len()).filter(|&p| pods[p] == PodRole::Gen).collect();
    let act = train.micro_batch_tokens as f64 * model.hidden as f64 * model.bytes_per_param;
    let shard = model.weight_bytes() / (train.tp * train.pp) as f64;
    let mut out = Vec::new();
    let mut push = |phase, primitive, group: &Vec<usize>, volume: f64| {
        if !group.is_empty() {
            out.push(PhaseIntent { phase, primitive, group: group.clone(), volume, slack: default_slack(phase) });
        }
    };
    if train.dp > 1 {
        push(Phase::TrainDP, Primitive::AllReduce, &trains, shard);
    }
    if train.tp > 1 {
        for _ in 0..model.layers {
            push(Phase::TrainTP, Primitive::AllReduce, &trains, 2.0 * act);
        }
    }
    if train.pp > 1 {
        push(Phase::TrainPP, Primitive::P2P, &trains, act);
    }
    if train.ep > 1 {
        push(Phase::TrainEP, Primitive::AllToAll, &trains, act);
    }
    if train.cp > 1 {
        let prim = if train.cp_all_to_all { Primitive::AllToAll } else { Primitive::P2P };
        push(Phase::TrainCP, prim, &trains, act / train.cp as f64);
    }
    if gen.tp > 1 {
        push(Phase::GenTP, Primitive::AllReduce, &gens, model.hidden as f64 * model.bytes_per_param);
    }
    if gen.ep > 1 {
        push(Phase::GenEP, Primitive::AllToAll, &gens, model.hidden as f64 * model.bytes_per_param);
    }
    if gen.pd {
        push(Phase::GenPD, Primitive::P2P, &gens, act);
    }
    if gen.afd {
        push(Phase::GenAF, Primitive::M2N, &gens, model.hidden as f64 * model.bytes_per_param);
    }
    let mut sync_group = trains.first().map(|&t| vec![t]).unwrap_or_default();
    sync_group.extend(&gens);
    if !gens.is_empty() {
        push(Phase::WeightSync, Primitive::T2G, &sync_group, model.weight_bytes());
        push(Phase::ResponseStream, Primitive::G2T, &gens, gen.response_bytes);
    }
    out
}

/// Conservative slack: smallest observed gap times `safety`; 0 without history.
pub fn slack_estimate(gaps: &[f64], safety: f64) -> f64 {
    gaps.iter().copied().reduce(f64::min).map_or(0.0, |g| g * safety)
}

/// One row of the communication trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommRecord {
    pub phase: Phase,
    pub start: f64,
    pub duration: f64,
    pub bytes: f64,
    pub epoch: u64,
}

impl CommRecord {
    pub fn csv(records: &[CommRecord]) -> String {
        let mut s = String::from("phase,start,duration,bytes,epoch\n");
        for r in records {
            s += &format!("{:?},{:.6},{:.6},{:.0},{}\n", r.phase, r.start, r.duration, r.bytes, r.epoch);
        }
        s
    }
}
