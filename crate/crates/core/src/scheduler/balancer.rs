//! LoadIndex ranking and greedy waiting-queue migration.

use serde::{Deserialize, Serialize};

use crate::perfmodel::{kv_capacity, stable_concurrency, ParallelMode};

/// A request as seen by the scheduler: its context so far and, for oracle
/// experiments only, its true final length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedRequest {
    pub id: u64,
    pub prompt_len: u32,
    pub generated_len: u32,
    pub true_total_len: u32,
}

impl QueuedRequest {
    pub fn kv_tokens(&self) -> u64 {
        self.prompt_len as u64 + self.generated_len as u64
    }
}

/// One active generation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub slot: usize,
    pub mode: ParallelMode,
    pub running: Vec<QueuedRequest>,
    pub waiting: Vec<QueuedRequest>,
    /// Smoothed decode rate, tokens/s.
    pub rate: f64,
    /// Mean per-request footprint used to convert free KV into batch slots.
    pub footprint: f64,
}

impl Instance {
    pub fn resident_kv(&self) -> u64 {
        self.running.iter().map(QueuedRequest::kv_tokens).sum()
    }

    pub fn free_kv(&self) -> u64 {
        kv_capacity(&self.mode).saturating_sub(self.resident_kv())
    }

    /// Additional sequences the free KV can hold, limited by the engine batch cap.
    pub fn batch_capacity(&self) -> u64 {
        let room = (self.mode.max_batch as u64).saturating_sub(self.running.len() as u64);
        stable_concurrency(self.free_kv(), self.footprint.max(1.0)).min(room)
    }
}

/// `(|running| + |waiting|) / B_cap(free) × 1 / rate`. Batch capacity is
/// floored at one slot so a full instance ranks high but finite.
pub fn load_index(inst: &Instance) -> f64 {
    let queued = (inst.running.len() + inst.waiting.len()) as f64;
    if queued == 0.0 {
        return 0.0;
    }
    let cap = inst.batch_capacity().max(1) as f64;
    queued / cap / inst.rate.max(1e-9)
}

/// Spread of the indices: `(max-min)/max` when `relative`, else `max-min`.
pub fn imbalance(indices: &[f64], relative: bool) -> f64 {
    let (Some(max), Some(min)) = (
        indices.iter().copied().reduce(f64::max),
        indices.iter().copied().reduce(f64::min),
    ) else {
        return 0.0;
    };
    if max <= 0.0 {
        return 0.0;
    }
    if relative { (max - min) / max } else { max - min }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Migration {
    pub id: u64,
    pub from: Option<usize>,
    pub to: usize,
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] < v[b] { i } else { b })
}

/// Greedily moves waiting requests, shortest context first, from the most
/// to the least loaded instance while the imbalance exceeds `theta` and each
/// move strictly reduces it. Instances are updated in place.
pub fn rebalance(instances: &mut [Instance], theta: f64, relative: bool) -> Vec<Migration> {
    let mut out = Vec::new();
    if instances.len() < 2 {
        return out;
    }
    let budget: usize = instances.iter().map(|i| i.waiting.len()).sum();
    for _ in 0..budget {
        let idx: Vec<f64> = instances.iter().map(load_index).collect();
        let delta = imbalance(&idx, relative);
        if delta <= theta {
            break;
        }
        let (src, dst) = (argmax(&idx), argmin(&idx));
        if src == dst || instances[src].waiting.is_empty() {
            break;
        }
        let pick = (0..instances[src].waiting.len())
            .min_by_key(|&i| (instances[src].waiting[i].kv_tokens(), instances[src].waiting[i].id))
            .unwrap();
        let req = &instances[src].waiting[pick];
        let d = &instances[dst];
        let fits = req.kv_tokens() <= d.free_kv()
            && d.batch_capacity() > d.waiting.len() as u64
            && d.running.len() + d.waiting.len() < d.mode.max_batch as usize;
        if !fits {
            break;
        }
        let req = instances[src].waiting.remove(pick);
        instances[dst].waiting.push(req);
        let after: Vec<f64> = instances.iter().map(load_index).collect();
        if imbalance(&after, relative) >= delta {
            let req = instances[dst].waiting.pop().unwrap();
            instances[src].waiting.insert(pick, req);
            break;
        }
        out.push(Migration { id: instances[dst].waiting.last().unwrap().id, from: Some(instances[src].slot), to: instances[dst].slot });
    }
    out
}
