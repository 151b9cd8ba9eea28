//! Proactive planner: mode selection per instance slot plus bucket
//! assignment, minimising `z + Σ C^mig + Σ Cost^sw` subject to the GPU
//! budget, the KV balance band and unique assignment.
//!
//! Small problems are solved exactly by enumerating slot modes and
//! branch-and-bound over bucket assignments. Larger ones enumerate mode
//! multisets (beam-limited), assign buckets longest-first and polish the
//! result with move/swap local search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::SchedulerConfig;
use crate::error::{Error, Result};
use crate::perfmodel::{
    decode_throughput, estimate_classes, kv_capacity, migration_cost, saturated_concurrency, CostModel,
    ParallelMode,
};
use crate::workload::Bucket;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BindingConstraint {
    GpuBudget,
    KvBalance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveError {
    Infeasible { binding: BindingConstraint },
    Config(Error),
}

impl From<Error> for SolveError {
    fn from(e: Error) -> Self {
        SolveError::Config(e)
    }
}

/// A solved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Mode per instance slot (`None` = slot idle).
    pub y: Vec<Option<ParallelMode>>,
    /// Slot per bucket.
    pub x: Vec<usize>,
    pub z: f64,
    pub migration_total: f64,
    pub switch_total: f64,
    pub objective: f64,
    pub switches: usize,
    pub migrations: usize,
    /// Lower edge of the KV band waived for at least one active slot.
    pub kv_relaxed: bool,
    pub exact: bool,
}

impl Plan {
    pub fn overhead(&self) -> f64 {
        self.migration_total + self.switch_total
    }

    pub fn mode_names(&self) -> Vec<String> {
        self.y.iter().map(|m| m.as_ref().map_or("none".into(), |m| m.name.clone())).collect()
    }
}

/// Objective terms and constraint status of an assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEvaluation {
    pub per_instance: Vec<f64>,
    pub z: f64,
    pub migration_total: f64,
    pub switch_total: f64,
    pub objective: f64,
    pub switches: usize,
    pub migrations: usize,
    pub kv_relaxed: bool,
    pub violations: Vec<String>,
}

/// Mean mid-life footprint over every pending request in the problem.
fn problem_footprint(buckets: &[Bucket]) -> f64 {
    crate::perfmodel::mean_footprint(buckets)
}

fn moved(home: Option<usize>, slot: usize) -> bool {
    home.is_some_and(|h| h != slot)
}

/// Per-bucket, per-slot migration and resident re-layout costs.
struct CostTables {
    /// migration seconds if bucket b goes to slot k
    mig: Vec<Vec<f64>>,
    mig_count: Vec<Vec<usize>>,
    /// re-layout seconds of members homed at k, charged when slot k changes mode
    relayout: Vec<Vec<f64>>,
}

impl CostTables {
    fn new(buckets: &[Bucket], slots: usize, cm: &CostModel) -> Self {
        let mut mig = vec![vec![0.0; slots]; buckets.len()];
        let mut mig_count = vec![vec![0; slots]; buckets.len()];
        let mut relayout = vec![vec![0.0; slots]; buckets.len()];
        for (b, bucket) in buckets.iter().enumerate() {
            for k in 0..slots {
                for m in &bucket.members {
                    // queued: no KV state to carry
                    let cost = if m.resident { migration_cost(m.kv_tokens(), true, cm).seconds } else { 0.0 };
                    if moved(m.home, k) {
                        mig[b][k] += cost;
                        mig_count[b][k] += 1;
                    } else if m.home == Some(k) {
                        relayout[b][k] += cost;
                    }
                }
            }
        }
        CostTables { mig, mig_count, relayout }
    }
}

/// Evaluates `(y, x)` against the objective and every constraint.
pub fn evaluate_plan(
    buckets: &[Bucket],
    prev: &[Option<ParallelMode>],
    y: &[Option<ParallelMode>],
    x: &[usize],
    cm: &CostModel,
    cfg: &SchedulerConfig,
) -> Result<PlanEvaluation> {
    let tables = CostTables::new(buckets, y.len(), cm);
    evaluate_with(buckets, prev, y, x, cm, cfg, &tables, problem_footprint(buckets))
}

#[allow(clippy::too_many_arguments)]
fn evaluate_with(
    buckets: &[Bucket],
    prev: &[Option<ParallelMode>],
    y: &[Option<ParallelMode>],
    x: &[usize],
    cm: &CostModel,
    cfg: &SchedulerConfig,
    tables: &CostTables,
    footprint: f64,
) -> Result<PlanEvaluation> {
    let slots = y.len();
    let mut violations = Vec::new();
    if prev.len() != slots {
        violations.push(format!("y has {slots} slots, previous config {}", prev.len()));
    }
    if x.len() != buckets.len() {
        violations.push(format!("x assigns {} of {} buckets", x.len(), buckets.len()));
    }
    let mut classes: Vec<Vec<(f64, u64)>> = vec![Vec::new(); slots];
    let mut kv = vec![0u64; slots];
    let mut migration_total = 0.0;
    let mut migrations = 0;
    let mut relayout = vec![0.0; slots];
    for (b, &k) in x.iter().enumerate().take(buckets.len()) {
        if k >= slots {
            violations.push(format!("bucket {b} assigned to missing slot {k}"));
            continue;
        }
        if y[k].is_none() {
            violations.push(format!("bucket {b} assigned to idle slot {k}"));
        }
        classes[k].push((buckets[b].representative as f64, buckets[b].count() as u64));
        kv[k] += buckets[b].kv_tokens();
        migration_total += tables.mig[b][k];
        migrations += tables.mig_count[b][k];
        relayout[k] += tables.relayout[b][k];
    }
    let mut per_instance = vec![0.0; slots];
    let mut switch_total = 0.0;
    let mut switches = 0;
    let mut gpus = 0u64;
    let mut kv_relaxed = false;
    for k in 0..slots {
        let before = prev.get(k).cloned().flatten();
        let changed = before.as_ref().map(|m| &m.name) != y[k].as_ref().map(|m| &m.name);
        if changed {
            switches += 1;
            switch_total += cm.reshard_time(before.as_ref(), y[k].as_ref())? + relayout[k];
        }
        let Some(mode) = &y[k] else { continue };
        gpus += mode.gpus_required as u64;
        per_instance[k] = estimate_classes(std::mem::take(&mut classes[k]), mode, footprint);
        let cap = kv_capacity(mode);
        let d = kv[k] as f64;
        if d > cfg.kv_policy.upper(cap) {
            violations.push(format!("slot {k}: KV demand {d} above band {}", cfg.kv_policy.upper(cap)));
        }
        if d < cfg.kv_policy.lower(cap) {
            if cfg.kv_policy.hard {
                violations.push(format!("slot {k}: KV demand {d} below band {}", cfg.kv_policy.lower(cap)));
            } else {
                kv_relaxed = true;
            }
        }
    }
    if gpus > cfg.g_total as u64 {
        violations.push(format!("GPU budget exceeded: {gpus} > {}", cfg.g_total));
    }
    let z = per_instance.iter().copied().fold(0.0, f64::max);
    Ok(PlanEvaluation {
        objective: z + migration_total + switch_total,
        per_instance,
        z,
        migration_total,
        switch_total,
        switches,
        migrations,
        kv_relaxed,
        violations,
    })
}

/// Standalone feasibility check for a returned plan: GPU budget, KV band,
/// one mode per slot, each bucket assigned exactly once to an active slot.
pub fn validate_plan(plan: &Plan, buckets: &[Bucket], cfg: &SchedulerConfig) -> Vec<String> {
    let mut v = Vec::new();
    if plan.x.len() != buckets.len() {
        v.push(format!("plan assigns {} buckets, expected {}", plan.x.len(), buckets.len()));
        return v;
    }
    let gpus: u64 = plan.y.iter().flatten().map(|m| m.gpus_required as u64).sum();
    if gpus > cfg.g_total as u64 {
        v.push(format!("gpu budget: {gpus} GPUs > budget {}", cfg.g_total));
    }
    let mut demand = vec![0u64; plan.y.len()];
    for (b, &k) in plan.x.iter().enumerate() {
        match plan.y.get(k) {
            None => v.push(format!("assignment: bucket {b} -> slot {k} out of range")),
            Some(None) => v.push(format!("assignment: bucket {b} -> idle slot {k}")),
            Some(Some(_)) => demand[k] += buckets[b].kv_tokens(),
        }
    }
    for (k, mode) in plan.y.iter().enumerate() {
        let Some(mode) = mode else { continue };
        let cap = kv_capacity(mode);
        let d = demand[k] as f64;
        if d > cfg.kv_policy.upper(cap) + 1e-9 {
            v.push(format!("kv band: slot {k} demand {d} > {}", cfg.kv_policy.upper(cap)));
        }
        let lower_waived = !cfg.kv_policy.hard && plan.kv_relaxed;
        if d < cfg.kv_policy.lower(cap) - 1e-9 && !lower_waived {
            v.push(format!("kv band: slot {k} demand {d} < {}", cfg.kv_policy.lower(cap)));
        }
    }
    v
}

/// Pending-request statistics describing where the wave is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveStats {
    pub pending: usize,
    /// Max over mean of remaining-length estimates.
    pub skew: f64,
}

impl WaveStats {
    pub fn from_buckets(buckets: &[Bucket]) -> Self {
        let pending: usize = buckets.iter().map(Bucket::count).sum();
        if pending == 0 {
            return WaveStats { pending, skew: 1.0 };
        }
        let total: f64 = buckets.iter().map(Bucket::work).sum();
        let max = buckets.iter().map(|b| b.representative).max().unwrap_or(0) as f64;
        let mean = total / pending as f64;
        WaveStats { pending, skew: if mean > 0.0 { max / mean } else { 1.0 } }
    }
}

/// Keeps throughput-oriented (smaller) modes early in the wave and the
/// largest, latency-oriented modes once few skewed requests remain.
pub fn prune_candidates(phase: WaveStats, cfg: &SchedulerConfig) -> Result<Vec<ParallelMode>> {
    let cands = &cfg.candidate_modes;
    if cands.is_empty() {
        return Err(Error::config("scheduler: empty candidate mode set"));
    }
    if cands.len() == 1 {
        return Ok(cands.clone());
    }
    let max_g = cands.iter().map(|m| m.gpus_required).max().unwrap();
    let kept: Vec<ParallelMode> = if phase.pending >= cfg.prune.high_watermark {
        cands.iter().filter(|m| m.gpus_required < max_g).cloned().collect()
    } else if phase.pending <= cfg.prune.low_watermark && phase.skew >= cfg.prune.skew_threshold {
        cands.iter().filter(|m| m.gpus_required == max_g).cloned().collect()
    } else {
        cands.clone()
    };
    Ok(if kept.is_empty() { cands.clone() } else { kept })
}

/// Splits oversized buckets so no single bucket forces a lopsided plan.
/// Members are grouped by home instance first so chunks stay local.
pub fn split_for_planning(buckets: &[Bucket], slots: usize) -> Vec<Bucket> {
    let total: usize = buckets.iter().map(Bucket::count).sum();
    let chunk = total.div_ceil(2 * slots.max(1)).max(1);
    let mut out = Vec::new();
    for b in buckets {
        if b.count() <= chunk {
            out.push(b.clone());
            continue;
        }
        let mut sorted = b.clone();
        sorted.members.sort_by_key(|m| (m.home.map_or(usize::MAX, |h| h), m.id));
        out.extend(sorted.split(b.count().div_ceil(chunk)));
    }
    out
}

/// Ordering key for tie-breaking between equal-objective plans.
fn plan_key(e: &PlanEvaluation, y: &[Option<usize>], x: &[usize]) -> (f64, usize, usize, Vec<usize>, Vec<usize>) {
    let ykey = y.iter().map(|m| m.map_or(0, |j| j + 1)).collect();
    (e.objective, e.switches, e.migrations, ykey, x.to_vec())
}

fn key_cmp(
    a: &(f64, usize, usize, Vec<usize>, Vec<usize>),
    b: &(f64, usize, usize, Vec<usize>, Vec<usize>),
) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
        .then_with(|| a.3.cmp(&b.3))
        .then_with(|| a.4.cmp(&b.4))
}

struct Problem<'a> {
    buckets: &'a [Bucket],
    prev: &'a [Option<ParallelMode>],
    cands: &'a [ParallelMode],
    cm: &'a CostModel,
    cfg: &'a SchedulerConfig,
    tables: CostTables,
    footprint: f64,
}

struct Best {
    key: (f64, usize, usize, Vec<usize>, Vec<usize>),
    y: Vec<Option<usize>>,
    x: Vec<usize>,
    eval: PlanEvaluation,
}

impl<'a> Problem<'a> {
    fn modes(&self, y: &[Option<usize>]) -> Vec<Option<ParallelMode>> {
        y.iter().map(|j| j.map(|j| self.cands[j].clone())).collect()
    }

    fn gpus(&self, y: &[Option<usize>]) -> u64 {
        y.iter().flatten().map(|&j| self.cands[j].gpus_required as u64).sum()
    }

    fn reshard_base(&self, y: &[Option<usize>]) -> Result<f64> {
        let mut s = 0.0;
        for (k, j) in y.iter().enumerate() {
            let next = j.map(|j| &self.cands[j]);
            let before = self.prev[k].as_ref();
            if before.map(|m| &m.name) != next.map(|m| &m.name) {
                s += self.cm.reshard_time(before, next)?;
            }
        }
        Ok(s)
    }

    fn changed(&self, y: &[Option<usize>], k: usize) -> bool {
        self.prev[k].as_ref().map(|m| &m.name) != y[k].map(|j| &self.cands[j].name)
    }

    fn upper_kv(&self, j: usize) -> f64 {
        self.cfg.kv_policy.upper(kv_capacity(&self.cands[j]))
    }

    fn consider(&self, y: &[Option<usize>], x: &[usize], best: &mut Option<Best>) -> Result<bool> {
        let modes = self.modes(y);
        let e = evaluate_with(self.buckets, self.prev, &modes, x, self.cm, self.cfg, &self.tables, self.footprint)?;
        if !e.violations.is_empty() {
            return Ok(false);
        }
        let key = plan_key(&e, y, x);
        if best.as_ref().is_none_or(|b| key_cmp(&key, &b.key) == Ordering::Less) {
            *best = Some(Best { key, y: y.to_vec(), x: x.to_vec(), eval: e });
        }
        Ok(true)
    }
}

/// Per-slot partial state during assignment search.
#[derive(Clone)]
struct SlotState {
    classes: Vec<(f64, u64)>,
    kv: u64,
    est: f64,
}

struct Dfs<'p, 'a> {
    p: &'p Problem<'a>,
    y: Vec<Option<usize>>,
    order: Vec<usize>,
    slots: Vec<SlotState>,
    x: Vec<usize>,
    base: f64,
    /// Slot k may be skipped when an earlier interchangeable slot is still empty.
    twin_of: Vec<Option<usize>>,
    feasible_leaf: bool,
    kv_blocked: bool,
}

impl Dfs<'_, '_> {
    fn bound(&self, mig: f64, relayout: f64) -> f64 {
        self.slots.iter().map(|s| s.est).fold(0.0, f64::max) + mig + relayout + self.base
    }

    fn run(&mut self, depth: usize, mig: f64, relayout: f64, best: &mut Option<Best>) -> Result<()> {
        if let Some(b) = best {
            if self.bound(mig, relayout) > b.key.0 {
                return Ok(());
            }
        }
        if depth == self.order.len() {
            if self.p.consider(&self.y, &self.x, best)? {
                self.feasible_leaf = true;
            }
            return Ok(());
        }
        let b = self.order[depth];
        let bucket = &self.p.buckets[b];
        for k in 0..self.y.len() {
            let Some(j) = self.y[k] else { continue };
            if let Some(t) = self.twin_of[k] {
                if self.slots[t].classes.is_empty() && self.slots[k].classes.is_empty() {
                    continue;
                }
            }
            let kv = self.slots[k].kv + bucket.kv_tokens();
            if kv as f64 > self.p.upper_kv(j) {
                self.kv_blocked = true;
                continue;
            }
            let saved = self.slots[k].clone();
            self.slots[k].classes.push((bucket.representative as f64, bucket.count() as u64));
            self.slots[k].kv = kv;
            self.slots[k].est = estimate_classes(self.slots[k].classes.clone(), &self.p.cands[j], self.p.footprint);
            self.x[b] = k;
            let extra_relayout = if self.p.changed(&self.y, k) { self.p.tables.relayout[b][k] } else { 0.0 };
            self.run(depth + 1, mig + self.p.tables.mig[b][k], relayout + extra_relayout, best)?;
            self.slots[k] = saved;
        }
        Ok(())
    }
}

fn twins(p: &Problem, y: &[Option<usize>]) -> Vec<Option<usize>> {
    let homed: Vec<bool> = (0..y.len())
        .map(|k| p.buckets.iter().any(|b| b.members.iter().any(|m| m.home == Some(k))))
        .collect();
    (0..y.len())
        .map(|k| {
            if homed[k] || y[k].is_none() {
                return None;
            }
            (0..k).rev().find(|&t| {
                !homed[t] && y[t] == y[k] && p.prev[t].as_ref().map(|m| &m.name) == p.prev[k].as_ref().map(|m| &m.name)
            })
        })
        .collect()
}

fn empty_slots(n: usize) -> Vec<SlotState> {
    vec![SlotState { classes: Vec::new(), kv: 0, est: 0.0 }; n]
}

fn work_order(buckets: &[Bucket]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..buckets.len()).collect();
    order.sort_by(|&a, &b| buckets[b].work().total_cmp(&buckets[a].work()).then(a.cmp(&b)));
    order
}

fn solve_exact(p: &Problem, best: &mut Option<Best>) -> Result<(bool, bool, bool)> {
    let slots = p.prev.len();
    let choices = p.cands.len() + 1;
    let total = choices.pow(slots as u32);
    let (mut any_gpu_ok, mut any_feasible, mut kv_blocked) = (false, false, false);
    for code in 0..total {
        let mut c = code;
        let y: Vec<Option<usize>> = (0..slots)
            .map(|_| {
                let d = c % choices;
                c /= choices;
                if d == 0 { None } else { Some(d - 1) }
            })
            .collect();
        if y.iter().all(Option::is_none) || p.gpus(&y) > p.cfg.g_total as u64 {
            continue;
        }
        any_gpu_ok = true;
        let base = p.reshard_base(&y)?;
        if best.as_ref().is_some_and(|b| base > b.key.0) {
            continue;
        }
        let mut dfs = Dfs {
            p,
            twin_of: twins(p, &y),
            y,
            order: work_order(p.buckets),
            slots: empty_slots(slots),
            x: vec![0; p.buckets.len()],
            base,
            feasible_leaf: false,
            kv_blocked: false,
        };
        dfs.run(0, 0.0, 0.0, best)?;
        any_feasible |= dfs.feasible_leaf;
        kv_blocked |= dfs.kv_blocked;
    }
    Ok((any_gpu_ok, any_feasible || best.is_some(), kv_blocked))
}

/// All mode-count vectors within the GPU budget and slot count.
fn mode_multisets(p: &Problem, limit: usize) -> Vec<Vec<usize>> {
    fn rec(p: &Problem, j: usize, counts: &mut Vec<usize>, gpus: u64, n: usize, out: &mut Vec<Vec<usize>>, limit: usize) {
        if out.len() >= limit {
            return;
        }
        if j == p.cands.len() {
            if n > 0 {
                out.push(counts.clone());
            }
            return;
        }
        let g = p.cands[j].gpus_required as u64;
        let mut c = 0;
        loop {
            let used = gpus + c as u64 * g;
            if used > p.cfg.g_total as u64 || n + c > p.prev.len() {
                break;
            }
            counts.push(c);
            rec(p, j + 1, counts, used, n + c, out, limit);
            counts.pop();
            c += 1;
        }
    }
    let mut out = Vec::new();
    rec(p, 0, &mut Vec::new(), 0, 0, &mut out, limit);
    out
}

/// Places a mode multiset onto slots, keeping unchanged modes in place.
fn place_multiset(p: &Problem, counts: &[usize]) -> Vec<Option<usize>> {
    let slots = p.prev.len();
    let mut y = vec![None; slots];
    let mut left = counts.to_vec();
    for k in 0..slots {
        if let Some(prev) = &p.prev[k] {
            if let Some(j) = p.cands.iter().position(|c| c.name == prev.name) {
                if left[j] > 0 {
                    y[k] = Some(j);
                    left[j] -= 1;
                }
            }
        }
    }
    // remaining modes go to slots holding the most resident requests first
    let mut free: Vec<usize> = (0..slots).filter(|&k| y[k].is_none()).collect();
    let resident = |k: usize| p.buckets.iter().flat_map(|b| &b.members).filter(|m| m.home == Some(k)).count();
    free.sort_by_key(|&k| (std::cmp::Reverse(resident(k)), k));
    let mut it = free.into_iter();
    for (j, n) in left.iter().enumerate() {
        for _ in 0..*n {
            if let Some(k) = it.next() {
                y[k] = Some(j);
            }
        }
    }
    y
}

fn quick_bound(p: &Problem, counts: &[usize]) -> f64 {
    let work: f64 = p.buckets.iter().map(Bucket::work).sum();
    let rate: f64 = counts
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let m = &p.cands[j];
            n as f64 * decode_throughput(m, saturated_concurrency(m, p.footprint) as usize)
        })
        .sum();
    if rate > 0.0 { work / rate } else { f64::INFINITY }
}

/// Longest-processing-time assignment followed by move/swap improvement.
fn assign_heuristic(p: &Problem, y: &[Option<usize>]) -> Option<Vec<usize>> {
    let slots = y.len();
    let active: Vec<usize> = (0..slots).filter(|&k| y[k].is_some()).collect();
    let mut st = empty_slots(slots);
    let mut x = vec![usize::MAX; p.buckets.len()];
    let est = |classes: &[(f64, u64)], k: usize| {
        estimate_classes(classes.to_vec(), &p.cands[y[k].unwrap()], p.footprint)
    };
    let extra = |b: usize, k: usize| {
        p.tables.mig[b][k] + if p.changed(y, k) { p.tables.relayout[b][k] } else { 0.0 }
    };
    for b in work_order(p.buckets) {
        let bucket = &p.buckets[b];
        let mut choice: Option<(f64, usize, f64)> = None;
        for &k in &active {
            let kv = st[k].kv + bucket.kv_tokens();
            if kv as f64 > p.upper_kv(y[k].unwrap()) {
                continue;
            }
            let mut cls = st[k].classes.clone();
            cls.push((bucket.representative as f64, bucket.count() as u64));
            let e = est(&cls, k);
            let score = e + extra(b, k);
            if choice.is_none_or(|c| score < c.0) {
                choice = Some((score, k, e));
            }
        }
        let (_, k, e) = choice?;
        st[k].classes.push((bucket.representative as f64, bucket.count() as u64));
        st[k].kv += bucket.kv_tokens();
        st[k].est = e;
        x[b] = k;
    }
    // local search on z + migration + relayout with incremental slot estimates
    let total = |st: &[SlotState], x: &[usize]| {
        let z = st.iter().map(|s| s.est).fold(0.0, f64::max);
        z + x.iter().enumerate().map(|(b, &k)| extra(b, k)).sum::<f64>()
    };
    let rebuild = |x: &[usize], k: usize| -> SlotState {
        let mut s = SlotState { classes: Vec::new(), kv: 0, est: 0.0 };
        for (b, &kb) in x.iter().enumerate() {
            if kb == k {
                s.classes.push((p.buckets[b].representative as f64, p.buckets[b].count() as u64));
                s.kv += p.buckets[b].kv_tokens();
            }
        }
        if y[k].is_some() {
            s.est = est(&s.classes, k);
        }
        s
    };
    let fits = |s: &SlotState, k: usize| s.kv as f64 <= p.upper_kv(y[k].unwrap());
    let mut cur = total(&st, &x);
    for _round in 0..50 {
        let mut improved = false;
        for b in 0..p.buckets.len() {
            let from = x[b];
            for &to in &active {
                if to == from {
                    continue;
                }
                x[b] = to;
                let (sf, stt) = (rebuild(&x, from), rebuild(&x, to));
                if fits(&stt, to) {
                    let (of, ot) = (std::mem::replace(&mut st[from], sf), std::mem::replace(&mut st[to], stt));
                    let t = total(&st, &x);
                    if t < cur - 1e-12 {
                        cur = t;
                        improved = true;
                        break;
                    }
                    st[from] = of;
                    st[to] = ot;
                }
                x[b] = from;
            }
        }
        for a in 0..p.buckets.len() {
            for b in (a + 1)..p.buckets.len() {
                let (ka, kb) = (x[a], x[b]);
                if ka == kb {
                    continue;
                }
                x.swap(a, b);
                let (sa, sb) = (rebuild(&x, ka), rebuild(&x, kb));
                if fits(&sa, ka) && fits(&sb, kb) {
                    let (oa, ob) = (std::mem::replace(&mut st[ka], sa), std::mem::replace(&mut st[kb], sb));
                    let t = total(&st, &x);
                    if t < cur - 1e-12 {
                        cur = t;
                        improved = true;
                        continue;
                    }
                    st[ka] = oa;
                    st[kb] = ob;
                }
                x.swap(a, b);
            }
        }
        if !improved {
            break;
        }
    }
    Some(x)
}

fn solve_heuristic(p: &Problem, best: &mut Option<Best>) -> Result<(bool, bool, bool)> {
    let mut sets = mode_multisets(p, 100_000);
    let any_gpu_ok = !sets.is_empty();
    sets.sort_by(|a, b| quick_bound(p, a).total_cmp(&quick_bound(p, b)).then_with(|| a.cmp(b)));
    sets.truncate(p.cfg.beam_width.max(1));
    let mut feasible = false;
    let mut kv_blocked = false;
    for counts in sets {
        let y = place_multiset(p, &counts);
        let base = p.reshard_base(&y)?;
        if best.as_ref().is_some_and(|b| base > b.key.0) {
            continue;
        }
        match assign_heuristic(p, &y) {
            Some(x) => feasible |= p.consider(&y, &x, best)?,
            None => kv_blocked = true,
        }
    }
    Ok((any_gpu_ok, feasible, kv_blocked))
}

/// Solves the planning problem for `buckets` over the instance slots of
/// `prev` (the current per-slot modes).
pub fn solve_plan(
    buckets: &[Bucket],
    prev: &[Option<ParallelMode>],
    candidates: &[ParallelMode],
    cm: &CostModel,
    cfg: &SchedulerConfig,
) -> std::result::Result<Plan, SolveError> {
    if candidates.is_empty() {
        return Err(Error::config("solve_plan: no candidate modes").into());
    }
    let p = Problem {
        buckets,
        prev,
        cands: candidates,
        cm,
        cfg,
        tables: CostTables::new(buckets, prev.len(), cm),
        footprint: problem_footprint(buckets),
    };
    let space = ((candidates.len() + 1) as f64).powi(prev.len() as i32)
        * (prev.len().max(1) as f64).powi(buckets.len() as i32);
    let exact = space <= cfg.exact_threshold;
    let mut best = None;
    let (gpu_ok, _, _) = if exact { solve_exact(&p, &mut best)? } else { solve_heuristic(&p, &mut best)? };
    let Some(best) = best else {
        let binding = if gpu_ok { BindingConstraint::KvBalance } else { BindingConstraint::GpuBudget };
        return Err(SolveError::Infeasible { binding });
    };
    let e = best.eval;
    Ok(Plan {
        y: p.modes(&best.y),
        x: best.x,
        z: e.z,
        migration_total: e.migration_total,
        switch_total: e.switch_total,
        objective: e.objective,
        switches: e.switches,
        migrations: e.migrations,
        kv_relaxed: e.kv_relaxed,
        exact,
    })
}
