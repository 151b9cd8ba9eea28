//! Analytic performance and cost models for generation instances.
//!
//! A decode step on an instance serving `b` concurrent requests takes
//! `t0 + c·b` seconds and yields one token per request.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::Bucket;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModeKind {
    TP,
    EP,
    AFD,
}

/// Attention/FFN server split of an AFD deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfdLayout {
    pub attention_servers: u32,
    pub ffn_servers: u32,
    pub gpus_per_server: u32,
}

fn default_max_batch() -> u32 {
    256
}

/// A candidate deployment of one generation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelMode {
    pub name: String,
    pub kind: ModeKind,
    pub degree: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub afd: Option<AfdLayout>,
    pub gpus_required: u32,
    /// Fixed per-step decode latency, seconds.
    pub base_step_time: f64,
    /// Additional step latency per concurrent request, seconds.
    pub per_request_step_cost: f64,
    pub kv_tokens_per_gpu: u64,
    /// Prefill / recompute speed, tokens per second.
    pub prefill_rate: f64,
    /// Engine concurrency limit (max sequences per step).
    #[serde(default = "default_max_batch")]
    pub max_batch: u32,
}

impl ParallelMode {
    pub fn tp(name: &str, degree: u32, t0: f64, c: f64, kv_tokens_per_gpu: u64) -> Self {
        ParallelMode {
            name: name.to_string(),
            kind: ModeKind::TP,
            degree,
            afd: None,
            gpus_required: degree,
            base_step_time: t0,
            per_request_step_cost: c,
            kv_tokens_per_gpu,
            prefill_rate: 40_000.0,
            max_batch: default_max_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("mode {}: {m}", self.name)));
        if self.gpus_required == 0 {
            return bad("gpus_required must be >= 1".into());
        }
        if !(self.base_step_time > 0.0) || !self.base_step_time.is_finite() {
            return bad(format!("base_step_time must be > 0, got {}", self.base_step_time));
        }
        if !(self.per_request_step_cost >= 0.0) || !self.per_request_step_cost.is_finite() {
            return bad("per_request_step_cost must be >= 0".into());
        }
        if self.kv_tokens_per_gpu == 0 {
            return bad("kv_tokens_per_gpu must be > 0".into());
        }
        if !(self.prefill_rate > 0.0) {
            return bad("prefill_rate must be > 0".into());
        }
        if self.max_batch == 0 {
            return bad("max_batch must be > 0".into());
        }
        match self.kind {
            ModeKind::TP if ![1, 2, 4, 8].contains(&self.degree) => {
                bad(format!("TP degree {} is not a single-node width", self.degree))
            }
            ModeKind::AFD => match self.afd {
                None => bad("AFD mode needs an afd layout".into()),
                Some(l) if l.attention_servers == 0 || l.gpus_per_server == 0 => {
                    bad("AFD layout needs attention servers".into())
                }
                Some(l) if (l.attention_servers + l.ffn_servers) * l.gpus_per_server != self.gpus_required => {
                    bad("AFD layout GPU count disagrees with gpus_required".into())
                }
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn step_time(&self, batch: usize) -> f64 {
        self.base_step_time + self.per_request_step_cost * batch as f64
    }
}

/// Decode tokens/s for `batch` concurrent requests.
pub fn decode_throughput(mode: &ParallelMode, batch: usize) -> f64 {
    if batch == 0 {
        return 0.0;
    }
    batch as f64 / mode.step_time(batch)
}

/// Maximum resident KV tokens (`C_k`). AFD counts only attention servers.
pub fn kv_capacity(mode: &ParallelMode) -> u64 {
    match (mode.kind, mode.afd) {
        (ModeKind::AFD, Some(l)) => mode.kv_tokens_per_gpu * (l.attention_servers * l.gpus_per_server) as u64,
        _ => mode.kv_tokens_per_gpu * mode.gpus_required as u64,
    }
}

/// Requests of `mean_footprint` tokens that fit in `free_kv`.
pub fn stable_concurrency(free_kv: u64, mean_footprint: f64) -> u64 {
    assert!(mean_footprint > 0.0, "mean footprint must be positive");
    (free_kv as f64 / mean_footprint).floor().max(0.0) as u64
}

/// Mean per-request footprint used for concurrency limits: current context
/// plus half the remaining decode (mid-life size).
pub fn mean_footprint(assigned: &[Bucket]) -> f64 {
    let n: usize = assigned.iter().map(Bucket::count).sum();
    if n == 0 {
        return 1.0;
    }
    let tokens: f64 = assigned
        .iter()
        .map(|b| b.context_tokens() as f64 + b.count() as f64 * b.representative as f64 / 2.0)
        .sum();
    (tokens / n as f64).max(1.0)
}

/// Concurrency an instance of `mode` sustains at the given footprint.
pub fn saturated_concurrency(mode: &ParallelMode, footprint: f64) -> u64 {
    stable_concurrency(kv_capacity(mode), footprint.max(1.0)).min(mode.max_batch as u64)
}

/// Fluid-drain completion estimate (`𝓛`) for buckets assigned to an instance.
///
/// Requests run shortest-remaining-first at up to the saturated concurrency;
/// every running request advances one token per step of `t0 + c·batch`.
pub fn instance_completion_estimate(assigned: &[Bucket], mode: &ParallelMode) -> f64 {
    instance_completion_estimate_at(assigned, mode, mean_footprint(assigned))
}

/// [`instance_completion_estimate`] with an externally fixed footprint, which
/// makes the estimate monotone in the assigned work.
pub fn instance_completion_estimate_at(assigned: &[Bucket], mode: &ParallelMode, footprint: f64) -> f64 {
    let classes: Vec<(f64, u64)> = assigned
        .iter()
        .filter(|b| b.count() > 0)
        .map(|b| (b.representative as f64, b.count() as u64))
        .collect();
    estimate_classes(classes, mode, footprint)
}

/// Completion estimate over `(remaining_tokens, count)` classes.
pub(crate) fn estimate_classes(mut classes: Vec<(f64, u64)>, mode: &ParallelMode, footprint: f64) -> f64 {
    classes.retain(|c| c.1 > 0);
    if classes.is_empty() {
        return 0.0;
    }
    let cap = saturated_concurrency(mode, footprint);
    if cap == 0 {
        return f64::INFINITY;
    }
    classes.sort_by(|a, b| a.0.total_cmp(&b.0));
    drain(&classes, cap, mode)
}

/// Drains `(remaining_tokens, count)` classes (sorted ascending) through an
/// instance with concurrency `cap`.
pub(crate) fn drain(classes: &[(f64, u64)], cap: u64, mode: &ParallelMode) -> f64 {
    let mut waiting: std::collections::VecDeque<(f64, u64)> = classes.iter().copied().collect();
    let mut running: Vec<(f64, u64)> = Vec::new();
    let mut t = 0.0;
    loop {
        let mut active: u64 = running.iter().map(|r| r.1).sum();
        while active < cap {
            let Some((rem, cnt)) = waiting.pop_front() else { break };
            let take = cnt.min(cap - active);
            running.push((rem, take));
            active += take;
            if take < cnt {
                waiting.push_front((rem, cnt - take));
            }
        }
        if running.is_empty() {
            return t;
        }
        let step = mode.step_time(active as usize);
        let min_rem = running.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        t += min_rem * step;
        for r in running.iter_mut() {
            r.0 -= min_rem;
        }
        running.retain(|r| r.0 > 1e-9);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MigrationMethod {
    None,
    Transfer,
    Recompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationCost {
    pub seconds: f64,
    pub method: MigrationMethod,
}

/// Parameters of the reconfiguration cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub kv_bytes_per_token: f64,
    /// Bytes/s available to a KV transfer.
    pub link_bw: f64,
    /// Weight reshard seconds keyed `"<from>-><to>"`; `none` names an idle slot.
    pub weight_reshard_time: BTreeMap<String, f64>,
    /// Tokens/s when rebuilding KV by re-running the forward pass.
    pub recompute_rate: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("kv_bytes_per_token", self.kv_bytes_per_token),
            ("link_bw", self.link_bw),
            ("recompute_rate", self.recompute_rate),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("costs.{k} must be > 0, got {v}")));
            }
        }
        for (k, v) in &self.weight_reshard_time {
            if !(*v >= 0.0) {
                return Err(Error::config(format!("costs.weight_reshard_time[{k}] must be >= 0")));
            }
        }
        Ok(())
    }

    /// Zero-cost model used for idealised comparisons.
    pub fn free() -> Self {
        CostModel {
            kv_bytes_per_token: 1e-12,
            link_bw: 1e30,
            weight_reshard_time: BTreeMap::new(),
            recompute_rate: 1e30,
        }
    }

    pub fn is_free(&self) -> bool {
        self.link_bw >= 1e29 && self.weight_reshard_time.is_empty()
    }

    pub fn reshard_time(&self, prev: Option<&ParallelMode>, next: Option<&ParallelMode>) -> Result<f64> {
        let name = |m: Option<&ParallelMode>| m.map_or("none".to_string(), |m| m.name.clone());
        let (a, b) = (name(prev), name(next));
        if a == b {
            return Ok(0.0);
        }
        if self.is_free() {
            return Ok(0.0);
        }
        let key = format!("{a}->{b}");
        self.weight_reshard_time
            .get(&key)
            .copied()
            .ok_or_else(|| Error::config(format!("no reshard time for mode pair {key}")))
    }
}

/// Cost of moving one request's KV state, choosing the cheaper of network
/// transfer and recomputation.
pub fn migration_cost(kv_tokens: u64, moved: bool, cm: &CostModel) -> MigrationCost {
    if !moved {
        return MigrationCost { seconds: 0.0, method: MigrationMethod::None };
    }
    let transfer = kv_tokens as f64 * cm.kv_bytes_per_token / cm.link_bw;
    let recompute = kv_tokens as f64 / cm.recompute_rate;
    if transfer <= recompute {
        MigrationCost { seconds: transfer, method: MigrationMethod::Transfer }
    } else {
        MigrationCost { seconds: recompute, method: MigrationMethod::Recompute }
    }
}

/// Mode-switch overhead for one instance slot: weight reshard plus KV
/// re-layout of the requests that stay resident on it.
pub fn switch_cost(
    prev: Option<&ParallelMode>,
    next: Option<&ParallelMode>,
    resident_kv: &[u64],
    cm: &CostModel,
) -> Result<f64> {
    let same = prev.map(|m| &m.name) == next.map(|m| &m.name);
    if same {
        return Ok(0.0);
    }
    let reshard = cm.reshard_time(prev, next)?;
    let relayout: f64 = resident_kv.iter().map(|&kv| migration_cost(kv, true, cm).seconds).sum();
    Ok(reshard + relayout)
}

/// `mode,batch,step_time_s,throughput_tok_s` rows for batches 1..=max_batch (powers of two plus the cap).
pub fn profile_csv(modes: &[ParallelMode]) -> String {
    let mut out = String::from("mode,batch,step_time_s,throughput_tok_s\n");
    for m in modes {
        let mut b = 1u32;
        let mut batches = Vec::new();
        while b < m.max_batch {
            batches.push(b);
            b *= 2;
        }
        batches.push(m.max_batch);
        for b in batches {
            out.push_str(&format!(
                "{},{},{:.6},{:.3}\n",
                m.name,
                b,
                m.step_time(b as usize),
                decode_throughput(m, b as usize)
            ));
        }
    }
    out
}
