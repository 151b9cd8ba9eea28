//! One generation step: decode rounds per instance, orchestrator ticks and
//! cluster reconfigurations.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{EventKind, EventQueue};
use crate::error::{Error, Result};
use crate::perfmodel::{kv_capacity, migration_cost, switch_cost, CostModel, ParallelMode};
use crate::scheduler::{Action, ClusterSnapshot, DecisionRecord, Instance, LengthView, Migration, Orchestrator, Plan, QueuedRequest};
use crate::workload::{condition_on_completions, LengthDistribution, Request, RequestState};

/// How a fresh batch is spread over the active instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispatch {
    RoundRobin,
    /// Contiguous blocks of the batch per instance.
    Chunked,
}

/// Remaining-length knowledge handed to the orchestrator.
#[derive(Debug, Clone, PartialEq)]
pub enum LengthSource {
    Oracle,
    /// Forecast response-length histogram for the batch, conditioned on
    /// completions as the step progresses.
    Predicted(LengthDistribution),
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub dispatch: Dispatch,
    /// Waiting requests are admitted while resident KV stays under this
    /// fraction of capacity.
    pub admit_fraction: f64,
    pub lengths: LengthSource,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { dispatch: Dispatch::RoundRobin, admit_fraction: 0.9, lengths: LengthSource::Oracle }
    }
}

/// Deployment of the generation cluster, persisting across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GenCluster {
    pub modes: Vec<Option<ParallelMode>>,
}

impl GenCluster {
    pub fn new(modes: Vec<Option<ParallelMode>>) -> Self {
        GenCluster { modes }
    }

    /// `count` identical instances of `mode` in `slots` slots.
    pub fn uniform(mode: &ParallelMode, count: usize, slots: usize) -> Self {
        GenCluster { modes: (0..slots).map(|k| (k < count).then(|| mode.clone())).collect() }
    }
}

/// A deployment change committed during the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub time: f64,
    pub overhead: f64,
    pub modes: Vec<String>,
    /// Widest TP degree in the new deployment.
    pub max_degree: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenStepResult {
    pub makespan: f64,
    /// `(time, remaining requests)` after every completion event.
    pub remaining: Vec<(f64, usize)>,
    /// Busy seconds per slot.
    pub busy: Vec<f64>,
    pub reconfigs: usize,
    pub reconfig_overhead: f64,
    pub plan_migrations: usize,
    pub rebalance_migrations: usize,
    pub decisions: Vec<DecisionRecord>,
    pub deployments: Vec<Deployment>,
    pub tokens: u64,
    pub samples: usize,
    /// Response lengths of the batch, for predictor history.
    pub response_lengths: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
enum Payload {
    Decode { slot: usize, id: u64 },
    Tick,
    ReconfigEnd,
}

#[derive(Debug, Clone)]
struct Round {
    /// Admission time; busy time counts from here.
    begin: f64,
    /// First decode step starts after prefill.
    start: f64,
    step: f64,
    k: u32,
    prefilled: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Slot {
    mode: ParallelMode,
    running: Vec<usize>,
    waiting: VecDeque<usize>,
    round: Option<Round>,
    round_id: u64,
    tokens: u64,
}

impl Slot {
    fn new(mode: ParallelMode) -> Self {
        Slot { mode, running: Vec::new(), waiting: VecDeque::new(), round: None, round_id: 0, tokens: 0 }
    }
}

#[derive(Debug, Clone)]
struct Req {
    r: Request,
    kv_ready: bool,
}

struct Sim<'a> {
    reqs: Vec<Req>,
    index: BTreeMap<u64, usize>,
    slots: Vec<Option<Slot>>,
    q: EventQueue<Payload>,
    pending: usize,
    paused: bool,
    busy: Vec<f64>,
    opts: &'a GenOptions,
    out: GenStepResult,
    completed_since_tick: Vec<u32>,
    dist: Option<LengthDistribution>,
    last_tick: f64,
}

impl Sim<'_> {
    fn resident(&self, s: &Slot) -> u64 {
        s.running.iter().map(|&r| self.reqs[r].r.kv_tokens()).sum()
    }

    fn can_admit(&self, k: usize) -> bool {
        let Some(s) = &self.slots[k] else { return false };
        let Some(&front) = s.waiting.front() else { return false };
        let cap = kv_capacity(&s.mode) as f64;
        let limit = if s.running.is_empty() { cap } else { self.opts.admit_fraction * cap };
        s.running.len() < s.mode.max_batch as usize
            && (self.resident(s) + self.reqs[front].r.kv_tokens()) as f64 <= limit
    }

    fn kv_dump(&self) -> String {
        let mut parts = Vec::new();
        for (k, s) in self.slots.iter().enumerate() {
            let Some(s) = s else { continue };
            let smallest = s.waiting.iter().map(|&r| self.reqs[r].r.kv_tokens()).min();
            parts.push(format!(
                "slot {k} ({}): capacity {} resident {} running {} waiting {} smallest waiting {:?}",
                s.mode.name,
                kv_capacity(&s.mode),
                self.resident(s),
                s.running.len(),
                s.waiting.len(),
                smallest
            ));
        }
        parts.join("; ")
    }

    fn start_round(&mut self, k: usize, now: f64) -> Result<()> {
        if self.paused {
            return Ok(());
        }
        let Some(mut s) = self.slots[k].take() else { return Ok(()) };
        if s.round.is_some() {
            self.slots[k] = Some(s);
            return Ok(());
        }
        let cap = kv_capacity(&s.mode);
        let mut resident = self.resident(&s);
        let mut prefill_tokens = 0u64;
        let mut prefilled = Vec::new();
        while let Some(&r) = s.waiting.front() {
            if s.running.len() >= s.mode.max_batch as usize {
                break;
            }
            let kv = self.reqs[r].r.kv_tokens();
            let limit = if s.running.is_empty() { cap as f64 } else { self.opts.admit_fraction * cap as f64 };
            if (resident + kv) as f64 > limit {
                break;
            }
            s.waiting.pop_front();
            s.running.push(r);
            resident += kv;
            self.reqs[r].r.state = RequestState::Running;
            if !self.reqs[r].kv_ready {
                self.reqs[r].kv_ready = true;
                prefill_tokens += kv;
                prefilled.push(r);
            }
        }
        // KV grows by one token per running request per step; evict the
        // newest arrivals until at least one step fits
        while s.running.len() > 1 && cap.saturating_sub(resident) < s.running.len() as u64 {
            let r = s.running.pop().unwrap();
            let kv = self.reqs[r].r.kv_tokens();
            resident -= kv;
            if let Some(p) = prefilled.iter().position(|&x| x == r) {
                prefilled.remove(p);
                prefill_tokens -= kv;
            }
            self.reqs[r].kv_ready = false;
            self.reqs[r].r.state = RequestState::Waiting;
            s.waiting.push_front(r);
        }
        if s.running.is_empty() {
            self.slots[k] = Some(s);
            return Ok(());
        }
        let b = s.running.len() as u64;
        let kv_steps = cap.saturating_sub(resident) / b;
        if kv_steps == 0 {
            self.slots[k] = Some(s);
            return Err(Error::Deadlock(format!(
                "request cannot grow within instance KV at t={now:.3}: {}",
                self.kv_dump()
            )));
        }
        let min_rem = s.running.iter().map(|&r| self.reqs[r].r.true_remaining()).min().unwrap() as u64;
        let steps = min_rem.min(kv_steps) as u32;
        debug_assert!(resident + b * steps as u64 <= cap, "round would overrun KV capacity");
        let step = s.mode.step_time(b as usize);
        let start = now + prefill_tokens as f64 / s.mode.prefill_rate;
        s.round_id += 1;
        let end = start + steps as f64 * step;
        self.q.push(end, EventKind::DecodeRound, Payload::Decode { slot: k, id: s.round_id })?;
        s.round = Some(Round { begin: now, start, step, k: steps, prefilled });
        self.slots[k] = Some(s);
        Ok(())
    }

    fn advance(&mut self, k: usize, tokens: u32) {
        let s = self.slots[k].as_mut().unwrap();
        for &r in &s.running {
            self.reqs[r].r.advance(tokens);
        }
        s.tokens += tokens as u64 * s.running.len() as u64;
        self.out.tokens += tokens as u64 * s.running.len() as u64;
    }

    fn finish_round(&mut self, k: usize, now: f64) -> Result<()> {
        let round = self.slots[k].as_mut().unwrap().round.take().unwrap();
        self.busy[k] += now - round.begin;
        self.advance(k, round.k);
        let s = self.slots[k].as_mut().unwrap();
        let (done, live): (Vec<usize>, Vec<usize>) = s.running.iter().partition(|&&r| self.reqs[r].r.is_done());
        s.running = live;
        if !done.is_empty() {
            self.pending -= done.len();
            for &r in &done {
                self.reqs[r].r.home_instance = None;
                self.completed_since_tick.push(self.reqs[r].r.response_len());
            }
            self.out.remaining.push((now, self.pending));
            self.out.makespan = now;
        }
        self.start_round(k, now)
    }

    /// Credits whole decode steps completed by `now` in the in-flight round.
    fn settle(&mut self, k: usize, now: f64) {
        let Some(s) = self.slots[k].as_mut() else { return };
        let Some(round) = s.round.as_mut() else { return };
        if now <= round.start || round.k <= 1 {
            return;
        }
        let done = (((now - round.start) / round.step).floor() as u32).min(round.k - 1);
        if done == 0 {
            return;
        }
        round.start += done as f64 * round.step;
        round.k -= done;
        self.advance(k, done);
    }

    /// Stops the in-flight round at `now`; a partial step is lost.
    fn cancel(&mut self, k: usize, now: f64) {
        self.settle(k, now);
        let Some(s) = self.slots[k].as_mut() else { return };
        s.round_id += 1;
        if let Some(round) = s.round.take() {
            self.busy[k] += now - round.begin;
            if now < round.start {
                for r in round.prefilled {
                    self.reqs[r].kv_ready = false;
                }
            }
        }
    }

    fn snapshot(&self, now: f64) -> ClusterSnapshot {
        let q = |r: usize| {
            let r = &self.reqs[r].r;
            QueuedRequest { id: r.id, prompt_len: r.prompt_len, generated_len: r.generated_len, true_total_len: r.true_total_len }
        };
        let running: Vec<u64> = self.slots.iter().flatten().flat_map(|s| &s.running).map(|&r| self.reqs[r].r.kv_tokens()).collect();
        let footprint = if running.is_empty() {
            let all: Vec<u64> = self.slots.iter().flatten().flat_map(|s| &s.waiting).map(|&r| self.reqs[r].r.kv_tokens()).collect();
            all.iter().sum::<u64>() as f64 / all.len().max(1) as f64
        } else {
            running.iter().sum::<u64>() as f64 / running.len() as f64
        };
        let elapsed = now - self.last_tick;
        let instances = self
            .slots
            .iter()
            .enumerate()
            .map(|(k, s)| {
                s.as_ref().map(|s| Instance {
                    slot: k,
                    mode: s.mode.clone(),
                    running: s.running.iter().map(|&r| q(r)).collect(),
                    waiting: s.waiting.iter().map(|&r| q(r)).collect(),
                    rate: if elapsed > 0.0 { s.tokens as f64 / elapsed } else { 0.0 },
                    footprint: footprint.max(1.0),
                })
            })
            .collect();
        ClusterSnapshot { now, instances, unassigned: Vec::new() }
    }

    fn tick(&mut self, orch: &mut Orchestrator, now: f64) -> Result<()> {
        if self.paused {
            return self.q.push(now + orch.cfg.dt_react, EventKind::OrchestratorTick, Payload::Tick);
        }
        for k in 0..self.slots.len() {
            self.settle(k, now);
        }
        if let Some(d) = &self.dist {
            self.dist = Some(condition_on_completions(d, &self.completed_since_tick));
        }
        self.completed_since_tick.clear();
        let snap = self.snapshot(now);
        let view = match &self.dist {
            Some(d) => LengthView::Distribution(d),
            None => LengthView::Oracle,
        };
        let outcome = orch.tick(&snap, view)?;
        self.out.decisions.push(outcome.record.clone());
        match outcome.action {
            Action::NoOp => {}
            Action::Rebalance => {
                self.out.rebalance_migrations += outcome.migrations.len();
                self.apply_moves(&outcome.migrations, now)?;
            }
            Action::Reconfigure => {
                let plan = outcome.plan.expect("reconfigure carries a plan");
                self.out.plan_migrations += outcome.migrations.len();
                execute_reconfiguration(self, &plan, &outcome.migrations, &orch.costs, now)?;
            }
        }
        for k in 0..self.slots.len() {
            self.start_round(k, now)?;
        }
        for s in self.slots.iter_mut().flatten() {
            s.tokens = 0;
        }
        self.last_tick = now;
        if self.pending > 0 {
            if !self.paused && self.slots.iter().flatten().all(|s| s.round.is_none()) {
                return Err(Error::Deadlock(format!(
                    "{} requests pending but no instance can admit any: {}",
                    self.pending,
                    self.kv_dump()
                )));
            }
            self.q.push(now + orch.cfg.dt_react, EventKind::OrchestratorTick, Payload::Tick)?;
        }
        Ok(())
    }

    fn apply_moves(&mut self, moves: &[Migration], now: f64) -> Result<()> {
        let mut touched = Vec::new();
        for m in moves {
            let r = self.index[&m.id];
            let from = m.from.expect("balancer moves placed requests");
            let src = self.slots[from].as_mut().unwrap();
            let pos = src.waiting.iter().position(|&x| x == r).expect("moved request is waiting");
            src.waiting.remove(pos);
            self.reqs[r].r.home_instance = Some(m.to);
            self.slots[m.to].as_mut().unwrap().waiting.push_back(r);
            touched.push(m.to);
        }
        touched.sort();
        touched.dedup();
        for k in touched {
            if self.can_admit(k) {
                self.cancel(k, now);
                self.start_round(k, now)?;
            }
        }
        Ok(())
    }
}

/// Applies an accepted plan: stops every instance, charges weight reshard
/// and KV movement, remaps requests and pauses the cluster for the
/// overhead. Returns the overhead in seconds.
fn execute_reconfiguration(sim: &mut Sim, plan: &Plan, moves: &[Migration], cm: &CostModel, now: f64) -> Result<f64> {
    if plan.y.len() != sim.slots.len() {
        return Err(Error::InvalidPlan(format!("plan has {} slots, cluster {}", plan.y.len(), sim.slots.len())));
    }
    for k in 0..sim.slots.len() {
        sim.cancel(k, now);
    }
    let mut home: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (k, s) in sim.slots.iter().enumerate() {
        for &r in s.iter().flat_map(|s| s.running.iter().chain(&s.waiting)) {
            home.insert(r, (k, k));
        }
    }
    for m in moves {
        let r = sim.index[&m.id];
        home.get_mut(&r).ok_or_else(|| Error::InvalidPlan(format!("request {} is not pending", m.id)))?.1 = m.to;
    }
    let prev: Vec<Option<ParallelMode>> = sim.slots.iter().map(|s| s.as_ref().map(|s| s.mode.clone())).collect();
    let mut overhead = 0.0;
    let mut placed: Vec<Vec<usize>> = vec![Vec::new(); plan.y.len()];
    let mut stay_kv: Vec<Vec<u64>> = vec![Vec::new(); plan.y.len()];
    for (&r, &(old, new)) in &home {
        let Some(Some(_)) = plan.y.get(new) else {
            return Err(Error::InvalidPlan(format!("request {} mapped to inactive slot {new}", sim.reqs[r].r.id)));
        };
        let req = &mut sim.reqs[r];
        let switched = prev[new].as_ref().map(|m| &m.name) != plan.y[new].as_ref().map(|m| &m.name);
        if req.r.generated_len == 0 {
            if old != new || switched {
                req.kv_ready = false;
            }
        } else if old != new {
            overhead += migration_cost(req.r.kv_tokens(), true, cm).seconds;
            req.kv_ready = true;
        } else if switched {
            stay_kv[new].push(req.r.kv_tokens());
            req.kv_ready = true;
        }
        req.r.home_instance = Some(new);
        req.r.state = RequestState::Waiting;
        placed[new].push(r);
    }
    for k in 0..plan.y.len() {
        overhead += switch_cost(prev[k].as_ref(), plan.y[k].as_ref(), &stay_kv[k], cm)?;
    }
    sim.slots = plan
        .y
        .iter()
        .enumerate()
        .map(|(k, m)| {
            m.as_ref().map(|m| {
                let mut s = Slot::new(m.clone());
                let mut members = std::mem::take(&mut placed[k]);
                members.sort_by_key(|&r| (!sim.reqs[r].kv_ready, sim.reqs[r].r.id));
                s.waiting = members.into();
                s
            })
        })
        .collect();
    sim.paused = true;
    sim.q.push(now + overhead, EventKind::ReconfigEnd, Payload::ReconfigEnd)?;
    sim.out.reconfigs += 1;
    sim.out.reconfig_overhead += overhead;
    sim.out.deployments.push(Deployment {
        time: now,
        overhead,
        modes: plan.mode_names(),
        max_degree: plan.y.iter().flatten().map(|m| m.degree).max().unwrap_or(0),
    });
    Ok(overhead)
}

/// Runs one generation step to completion and returns its makespan and
/// per-step metrics. `cluster` carries the deployment into the next step.
pub fn run_gen_step(
    requests: Vec<Request>,
    cluster: &mut GenCluster,
    mut orch: Option<&mut Orchestrator>,
    opts: &GenOptions,
) -> Result<GenStepResult> {
    let slots: Vec<Option<Slot>> = cluster.modes.iter().map(|m| m.clone().map(Slot::new)).collect();
    let active: Vec<usize> = (0..slots.len()).filter(|&k| slots[k].is_some()).collect();
    let samples = requests.len();
    let response_lengths = requests.iter().map(Request::response_len).collect();
    let index = requests.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    let pending = requests.iter().filter(|r| !r.is_done()).count();
    let mut sim = Sim {
        reqs: requests.into_iter().map(|r| Req { r, kv_ready: false }).collect(),
        index,
        busy: vec![0.0; slots.len()],
        slots,
        q: EventQueue::new(),
        pending,
        paused: false,
        opts,
        out: GenStepResult {
            makespan: 0.0,
            remaining: vec![(0.0, pending)],
            busy: Vec::new(),
            reconfigs: 0,
            reconfig_overhead: 0.0,
            plan_migrations: 0,
            rebalance_migrations: 0,
            decisions: Vec::new(),
            deployments: Vec::new(),
            tokens: 0,
            samples,
            response_lengths,
        },
        completed_since_tick: Vec::new(),
        dist: match &opts.lengths {
            LengthSource::Predicted(d) => Some(d.clone()),
            LengthSource::Oracle => None,
        },
        last_tick: 0.0,
    };
    if pending == 0 {
        sim.out.busy = sim.busy;
        return Ok(sim.out);
    }
    if active.is_empty() {
        return Err(Error::Deadlock("no active generation instance".into()));
    }
    let live: Vec<usize> = (0..sim.reqs.len()).filter(|&r| !sim.reqs[r].r.is_done()).collect();
    let n = live.len();
    for (i, &r) in live.iter().enumerate() {
        let k = match opts.dispatch {
            Dispatch::RoundRobin => active[i % active.len()],
            Dispatch::Chunked => active[i * active.len() / n],
        };
        sim.reqs[r].r.home_instance = Some(k);
        sim.slots[k].as_mut().unwrap().waiting.push_back(r);
    }
    if let Some(o) = orch.as_deref_mut() {
        o.begin_wave();
        sim.q.push(0.0, EventKind::OrchestratorTick, Payload::Tick)?;
    } else {
        for &k in &active {
            sim.start_round(k, 0.0)?;
        }
    }
    while sim.pending > 0 {
        let Some(ev) = sim.q.pop() else {
            return Err(Error::Deadlock(format!(
                "{} requests pending with no runnable instance: {}",
                sim.pending,
                sim.kv_dump()
            )));
        };
        let now = ev.time;
        match ev.payload {
            Payload::Decode { slot, id } => {
                let live = sim.slots[slot].as_ref().is_some_and(|s| s.round_id == id && s.round.is_some());
                if live {
                    sim.finish_round(slot, now)?;
                }
            }
            Payload::Tick => sim.tick(orch.as_deref_mut().expect("ticks need an orchestrator"), now)?,
            Payload::ReconfigEnd => {
                sim.paused = false;
                for k in 0..sim.slots.len() {
                    sim.start_round(k, now)?;
                }
            }
        }
    }
    cluster.modes = sim.slots.iter().map(|s| s.as_ref().map(|s| s.mode.clone())).collect();
    sim.out.busy = sim.busy;
    Ok(sim.out)
}

#[cfg(test)]
mod tests;
