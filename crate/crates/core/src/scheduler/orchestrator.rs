//! The periodic control loop: reactive balancing every `dt_react`,
//! proactive re-planning every `dt_pro`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::balancer::{imbalance, load_index, rebalance, Instance, Migration, QueuedRequest};
use super::planner::{prune_candidates, solve_plan, split_for_planning, Plan, SolveError, WaveStats};
use super::SchedulerConfig;
use crate::error::Result;
use crate::perfmodel::{decode_throughput, estimate_classes, mean_footprint, CostModel, ParallelMode};
use crate::workload::{bucketize_by, Bucket, LengthDistribution, Request, DEFAULT_BUCKET_WIDTH};

/// Where remaining-length estimates come from.
#[derive(Debug, Clone, Copy)]
pub enum LengthView<'a> {
    Distribution(&'a LengthDistribution),
    /// True remaining lengths (idealised comparisons only).
    Oracle,
}

impl LengthView<'_> {
    pub fn bucket_width(&self) -> u32 {
        match self {
            LengthView::Distribution(d) => d.bucket_width,
            LengthView::Oracle => DEFAULT_BUCKET_WIDTH,
        }
    }

    fn remaining(&self, r: &QueuedRequest) -> f64 {
        match self {
            LengthView::Distribution(d) => d.expected_remaining(r.generated_len),
            LengthView::Oracle => r.true_total_len.saturating_sub(r.prompt_len + r.generated_len) as f64,
        }
    }
}

/// State of the generation cluster at a tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSnapshot {
    pub now: f64,
    /// One entry per slot; `None` for idle slots.
    pub instances: Vec<Option<Instance>>,
    /// Pending requests not yet placed on any instance.
    pub unassigned: Vec<QueuedRequest>,
}

impl ClusterSnapshot {
    pub fn modes(&self) -> Vec<Option<ParallelMode>> {
        self.instances.iter().map(|i| i.as_ref().map(|i| i.mode.clone())).collect()
    }

    pub fn pending(&self) -> usize {
        self.unassigned.len()
            + self.instances.iter().flatten().map(|i| i.running.len() + i.waiting.len()).sum::<usize>()
    }

    fn as_requests(&self) -> Vec<Request> {
        use crate::workload::RequestState;
        let to_req = |q: &QueuedRequest, home: Option<usize>, state| Request {
            id: q.id,
            prompt_len: q.prompt_len,
            true_total_len: q.true_total_len,
            generated_len: q.generated_len,
            state,
            home_instance: home,
        };
        let mut out: Vec<Request> = self.unassigned.iter().map(|q| to_req(q, None, RequestState::Waiting)).collect();
        for inst in self.instances.iter().flatten() {
            out.extend(inst.running.iter().map(|q| to_req(q, Some(inst.slot), RequestState::Running)));
            out.extend(inst.waiting.iter().map(|q| to_req(q, Some(inst.slot), RequestState::Waiting)));
        }
        out
    }

    fn lookup(&self) -> BTreeMap<u64, QueuedRequest> {
        self.unassigned
            .iter()
            .chain(self.instances.iter().flatten().flat_map(|i| i.running.iter().chain(&i.waiting)))
            .map(|q| (q.id, q.clone()))
            .collect()
    }
}

fn buckets_for(snap: &ClusterSnapshot, view: &LengthView) -> Vec<Bucket> {
    let lookup = snap.lookup();
    bucketize_by(&snap.as_requests(), view.bucket_width(), |r| view.remaining(&lookup[&r.id]))
}

/// Expected makespan if every pending request stays on its current instance.
/// Unplaced requests make the estimate infinite.
pub fn estimate_makespan(snap: &ClusterSnapshot, view: &LengthView) -> f64 {
    if !snap.unassigned.is_empty() {
        return f64::INFINITY;
    }
    let buckets = buckets_for(snap, view);
    let fp = mean_footprint(&buckets);
    let mut classes: Vec<Vec<(f64, u64)>> = vec![Vec::new(); snap.instances.len()];
    for b in &buckets {
        for m in &b.members {
            classes[m.home.unwrap()].push((b.representative as f64, 1));
        }
    }
    snap.instances
        .iter()
        .zip(classes)
        .filter_map(|(inst, c)| inst.as_ref().map(|i| estimate_classes(c, &i.mode, fp)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    NoOp,
    Rebalance,
    Reconfigure,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time: f64,
    pub load_indices: Vec<f64>,
    pub delta: f64,
    pub action: Action,
    pub migrations: usize,
    pub planned: bool,
    pub obj_cur: Option<f64>,
    pub obj_new: Option<f64>,
    pub overhead: Option<f64>,
    pub accepted: Option<bool>,
    pub kv_relaxed: bool,
    pub candidates: Vec<String>,
    pub modes: Vec<String>,
    pub infeasible: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutcome {
    pub action: Action,
    pub migrations: Vec<Migration>,
    /// Set when a reconfiguration was accepted.
    pub plan: Option<Plan>,
    pub record: DecisionRecord,
}

/// Control-loop state carried between ticks.
#[derive(Debug, Clone)]
pub struct Orchestrator {
    pub cfg: SchedulerConfig,
    pub costs: CostModel,
    last_plan: Option<f64>,
    rates: Vec<Option<(String, f64)>>,
}

impl Orchestrator {
    pub fn new(cfg: SchedulerConfig, costs: CostModel) -> Result<Self> {
        cfg.validate()?;
        costs.validate()?;
        Ok(Orchestrator { cfg, costs, last_plan: None, rates: Vec::new() })
    }

    /// Blends the observed per-instance rates into the smoothed estimate.
    fn smooth_rates(&mut self, snap: &mut ClusterSnapshot) {
        let alpha = self.cfg.rate_smoothing;
        self.rates.resize(snap.instances.len(), None);
        for (k, slot) in snap.instances.iter_mut().enumerate() {
            let Some(inst) = slot else {
                self.rates[k] = None;
                continue;
            };
            let prior = self.rates[k].as_ref().filter(|(name, _)| *name == inst.mode.name).map(|r| r.1);
            let observed = if inst.rate > 0.0 {
                inst.rate
            } else {
                decode_throughput(&inst.mode, inst.running.len().max(1))
            };
            let r = prior.map_or(observed, |p| alpha * observed + (1.0 - alpha) * p);
            self.rates[k] = Some((inst.mode.name.clone(), r));
            inst.rate = r;
        }
    }

    /// Starts a new generation wave: the next tick plans regardless of timers.
    pub fn begin_wave(&mut self) {
        self.last_plan = None;
    }

    fn planning_due(&self, now: f64) -> bool {
        self.cfg.enable_planning && self.last_plan.is_none_or(|t| now - t >= self.cfg.dt_pro - 1e-9)
    }

    pub fn tick(&mut self, snapshot: &ClusterSnapshot, view: LengthView) -> Result<TickOutcome> {
        let mut snap = snapshot.clone();
        self.smooth_rates(&mut snap);
        let active: Vec<&Instance> = snap.instances.iter().flatten().collect();
        let indices: Vec<f64> = active.iter().map(|i| load_index(i)).collect();
        let delta = imbalance(&indices, self.cfg.theta_relative);
        let mut record = DecisionRecord {
            time: snap.now,
            load_indices: indices,
            delta,
            action: Action::NoOp,
            migrations: 0,
            planned: false,
            obj_cur: None,
            obj_new: None,
            overhead: None,
            accepted: None,
            kv_relaxed: false,
            candidates: Vec::new(),
            modes: snap.modes().iter().map(|m| m.as_ref().map_or("none".into(), |m| m.name.clone())).collect(),
            infeasible: None,
        };

        if self.planning_due(snap.now) && snap.pending() > 0 {
            self.last_plan = Some(snap.now);
            record.planned = true;
            if let Some(outcome) = self.plan(&snap, &view, &mut record)? {
                return Ok(outcome);
            }
        }

        let mut migrations = Vec::new();
        if self.cfg.enable_balancing {
            let mut insts: Vec<Instance> = snap.instances.iter().flatten().cloned().collect();
            migrations = rebalance(&mut insts, self.cfg.theta, self.cfg.theta_relative);
        }
        record.migrations = migrations.len();
        let action = if migrations.is_empty() { Action::NoOp } else { Action::Rebalance };
        record.action = action;
        Ok(TickOutcome { action, migrations, plan: None, record })
    }

    fn plan(
        &self,
        snap: &ClusterSnapshot,
        view: &LengthView,
        record: &mut DecisionRecord,
    ) -> Result<Option<TickOutcome>> {
        let buckets = buckets_for(snap, view);
        let cands = prune_candidates(WaveStats::from_buckets(&buckets), &self.cfg)?;
        record.candidates = cands.iter().map(|m| m.name.clone()).collect();
        let prev = snap.modes();
        let split = split_for_planning(&buckets, prev.len());
        let obj_cur = estimate_makespan(snap, view);
        record.obj_cur = Some(obj_cur);
        let plan = match solve_plan(&split, &prev, &cands, &self.costs, &self.cfg) {
            Ok(p) => p,
            Err(SolveError::Infeasible { binding }) => {
                log::warn!("t={:.1}: planning infeasible ({binding:?}); keeping configuration", snap.now);
                record.infeasible = Some(format!("{binding:?}"));
                return Ok(None);
            }
            Err(SolveError::Config(e)) => return Err(e),
        };
        record.obj_new = Some(plan.z);
        record.overhead = Some(plan.overhead());
        record.kv_relaxed = plan.kv_relaxed;
        let accept = plan.z + plan.overhead() < obj_cur - self.cfg.epsilon;
        record.accepted = Some(accept);
        if !accept {
            return Ok(None);
        }
        let mut migrations = Vec::new();
        for (b, &k) in split.iter().zip(&plan.x) {
            for m in &b.members {
                if m.home != Some(k) {
                    migrations.push(Migration { id: m.id, from: m.home, to: k });
                }
            }
        }
        migrations.sort_by_key(|m| m.id);
        record.action = Action::Reconfigure;
        record.migrations = migrations.len();
        record.modes = plan.mode_names();
        Ok(Some(TickOutcome { action: Action::Reconfigure, migrations, plan: Some(plan), record: record.clone() }))
    }
}
