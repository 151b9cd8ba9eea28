//! Multi-step pipeline: Gen and Train per step, weight sync at the step
//! boundary, fabric materialization around each phase.

use serde::{Deserialize, Serialize};

use super::gen::{run_gen_step, GenCluster, GenOptions, LengthSource};
use super::train::{run_train_step, train_collectives, TrainSetup, TrainTiming};
use super::{Paradigm, PipelineConfig};
use crate::error::Result;
use crate::fabric::{
    CircuitPlan, DemandSummary, FabricConfig, FabricController, FabricEvent, FabricState, Granularity, Phase,
    PhaseIntent, PodRole, Primitive, TemplateKind, TopologyKind,
};
use crate::netmodel::{default_slack, weight_sync_time, CommRecord, Topology};
use crate::perfmodel::{CostModel, ParallelMode};
use crate::scheduler::{DecisionRecord, Orchestrator, SchedulerConfig};
use crate::workload::{
    fit_predictor, sample_trace, ArimaOrder, LengthDistribution, Request, WorkloadConfig, DEFAULT_BUCKET_WIDTH,
};

/// Everything one pipeline run needs.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub workload: WorkloadConfig,
    pub pipeline: PipelineConfig,
    /// Initial mode per generation slot.
    pub initial: Vec<Option<ParallelMode>>,
    /// Orchestrator settings; `None` keeps the initial deployment static.
    pub orchestrator: Option<(SchedulerConfig, CostModel)>,
    /// Give the orchestrator true remaining lengths instead of forecasts.
    pub oracle_lengths: bool,
    pub gen: GenOptions,
    pub train: TrainSetup,
    pub fabric: FabricConfig,
    /// Pipelining chunk for weight distribution, bytes.
    pub weight_sync_chunk: f64,
    pub arima: ArimaOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub start: f64,
    pub gen_makespan: f64,
    pub train_time: f64,
    pub train_compute: f64,
    pub train_comm: f64,
    pub weight_sync_time: f64,
    pub step_time: f64,
    pub samples: usize,
    pub tokens: u64,
    pub samples_per_s: f64,
    pub tokens_per_s: f64,
    pub reconfigs: usize,
    pub reconfig_overhead: f64,
    pub plan_migrations: usize,
    pub rebalance_migrations: usize,
    pub busy_max: f64,
    pub busy_min: f64,
    pub busy_ratio: f64,
    pub dp_bytes: f64,
    pub weight_sync_bytes: f64,
    pub fabric_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainingPoint {
    pub step: usize,
    pub time: f64,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLine {
    pub step: usize,
    #[serde(flatten)]
    pub record: DecisionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_steps: usize,
    pub total_time: f64,
    pub samples: usize,
    pub tokens: u64,
    pub samples_per_s: f64,
    pub tokens_per_s: f64,
    pub mean_gen_makespan: f64,
    pub mean_train_time: f64,
    pub mean_weight_sync: f64,
    pub reconfigs: usize,
    pub reconfig_overhead: f64,
    pub plan_migrations: usize,
    pub rebalance_migrations: usize,
    pub mean_busy_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub steps: Vec<StepMetrics>,
    pub remaining: Vec<RemainingPoint>,
    /// Busy seconds per slot, per step.
    pub busy: Vec<Vec<f64>>,
    pub decisions: Vec<DecisionLine>,
    pub fabric: Vec<FabricEvent>,
    pub comm: Vec<CommRecord>,
    /// Active circuit plan after each committed reconfiguration.
    pub circuit_plans: Vec<CircuitPlan>,
    pub summary: Summary,
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|x| serde_json::to_string(x).expect("record serializes") + "\n").collect()
}

impl Metrics {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from(
            "step,start,gen_makespan,train_time,train_compute,train_comm,weight_sync_time,step_time,samples,tokens,\
             samples_per_s,tokens_per_s,reconfigs,reconfig_overhead,plan_migrations,rebalance_migrations,\
             busy_max,busy_min,busy_ratio,dp_bytes,weight_sync_bytes,fabric_epoch\n",
        );
        for m in &self.steps {
            s += &format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                m.step,
                m.start,
                m.gen_makespan,
                m.train_time,
                m.train_compute,
                m.train_comm,
                m.weight_sync_time,
                m.step_time,
                m.samples,
                m.tokens,
                m.samples_per_s,
                m.tokens_per_s,
                m.reconfigs,
                m.reconfig_overhead,
                m.plan_migrations,
                m.rebalance_migrations,
                m.busy_max,
                m.busy_min,
                m.busy_ratio,
                m.dp_bytes,
                m.weight_sync_bytes,
                m.fabric_epoch
            );
        }
        s
    }

    pub fn remaining_csv(&self) -> String {
        let mut s = String::from("step,time,remaining\n");
        for p in &self.remaining {
            s += &format!("{},{},{}\n", p.step, p.time, p.remaining);
        }
        s
    }

    pub fn decisions_jsonl(&self) -> String {
        jsonl(&self.decisions)
    }

    pub fn fabric_jsonl(&self) -> String {
        jsonl(&self.fabric)
    }

    pub fn comm_csv(&self) -> String {
        CommRecord::csv(&self.comm)
    }
}

fn busy_stats(busy: &[f64]) -> (f64, f64, f64) {
    let used: Vec<f64> = busy.iter().copied().filter(|&b| b > 0.0).collect();
    let max = used.iter().copied().fold(0.0, f64::max);
    let min = used.iter().copied().reduce(f64::min).unwrap_or(0.0);
    let ratio = if min > 0.0 { max / min } else { 1.0 };
    (max, min, ratio)
}

/// Pod-level demand of the DP ring.
fn dp_demand(setup: &TrainSetup, tokens: u64, topo: &Topology, pods: &[PodRole]) -> DemandSummary {
    let mut d = DemandSummary::new(Granularity::PodLevel, default_slack(Phase::TrainDP));
    for (phase, spec) in train_collectives(setup, tokens, topo, pods) {
        if phase != Phase::TrainDP {
            continue;
        }
        for (s, t, bytes) in spec.flows() {
            let (a, b) = (topo.host_pod[s], topo.host_pod[t]);
            if a != b {
                d.entries.push((a, b, bytes));
            }
        }
    }
    d
}

enum FabricAction {
    GenDeploy { slack: f64 },
    TrainDp,
}

struct StepFabric<'a> {
    controller: &'a mut FabricController,
    pods: &'a [PodRole],
}

impl StepFabric<'_> {
    fn intent(&self, phase: Phase, primitive: Primitive, slack: f64) -> PhaseIntent {
        let role = if phase == Phase::TrainDP { PodRole::Train } else { PodRole::Gen };
        let mut group: Vec<usize> = (0..self.pods.len()).filter(|&p| self.pods[p] == role).collect();
        if phase == Phase::WeightSync {
            group = (0..self.pods.len()).filter(|&p| self.pods[p] == PodRole::Train).take(1).chain(group).collect();
        }
        PhaseIntent { phase, primitive, group, volume: 0.0, slack }
    }
}

/// Runs `n_steps` RL iterations and collects metrics.
pub fn run_pipeline(setup: &SimSetup) -> Result<Metrics> {
    setup.pipeline.validate()?;
    setup.workload.validate()?;
    setup.fabric.validate()?;
    let pods: Vec<PodRole> = setup.fabric.pods.iter().map(|p| p.role).collect();
    let rfabric = setup.fabric.kind == TopologyKind::RFabric;
    let mut controller = if rfabric { Some(FabricController::new(FabricState::new(setup.fabric.clone())?)) } else { None };
    let static_topo = if rfabric { None } else { Some(Topology::for_fabric(&setup.fabric, None)?) };
    let mut cluster = GenCluster::new(setup.initial.clone());
    let mut orch = match &setup.orchestrator {
        Some((cfg, cm)) => Some(Orchestrator::new(cfg.clone(), cm.clone())?),
        None => None,
    };

    // offline profiling pass seeds the length history
    let mut warm = setup.workload.clone();
    warm.seed = warm.seed.wrapping_add(0x5EED_0F_F1CE);
    let mut history: Vec<LengthDistribution> = vec![LengthDistribution::from_lengths(
        sample_trace(&warm, 0)?.iter().map(Request::response_len),
        DEFAULT_BUCKET_WIDTH,
    )];

    let mut metrics = Metrics {
        steps: Vec::new(),
        remaining: Vec::new(),
        busy: Vec::new(),
        decisions: Vec::new(),
        fabric: Vec::new(),
        comm: Vec::new(),
        circuit_plans: Vec::new(),
        summary: Summary {
            n_steps: 0,
            total_time: 0.0,
            samples: 0,
            tokens: 0,
            samples_per_s: 0.0,
            tokens_per_s: 0.0,
            mean_gen_makespan: 0.0,
            mean_train_time: 0.0,
            mean_weight_sync: 0.0,
            reconfigs: 0,
            reconfig_overhead: 0.0,
            plan_migrations: 0,
            rebalance_migrations: 0,
            mean_busy_ratio: 0.0,
        },
    };
    let mut clock = 0.0;
    let mut prev_batch: Option<Vec<Request>> = None;
    let weight_bytes = setup.train.model.weight_bytes();

    for step in 0..setup.pipeline.n_steps {
        let batch = sample_trace(&setup.workload, step)?;
        let mut opts = setup.gen.clone();
        opts.lengths = if setup.oracle_lengths {
            LengthSource::Oracle
        } else {
            LengthSource::Predicted(fit_predictor(&history, setup.arima).forecast_distribution(batch.len() as u64))
        };
        let gen = run_gen_step(batch.clone(), &mut cluster, orch.as_mut(), &opts)?;
        history.push(LengthDistribution::from_lengths(gen.response_lengths.iter().copied(), DEFAULT_BUCKET_WIDTH));

        let train_batch = match setup.pipeline.paradigm {
            Paradigm::OneStepAsync => prev_batch.take(),
            Paradigm::SyncDisaggregated => Some(batch.clone()),
        };
        let train_tokens: u64 = train_batch.iter().flatten().map(|r| r.true_total_len as u64).sum();
        let train_compute = match &train_batch {
            Some(b) if !b.is_empty() => setup.train.compute_base + setup.train.compute_per_token * train_tokens as f64,
            _ => 0.0,
        };
        let train_start = match setup.pipeline.paradigm {
            Paradigm::OneStepAsync => clock,
            Paradigm::SyncDisaggregated => clock + gen.makespan,
        };
        let dp_start = train_start + train_compute;

        // fabric actions of this step in time order
        let mut actions: Vec<(f64, FabricAction)> = gen
            .deployments
            .iter()
            .map(|d| (clock + d.time, FabricAction::GenDeploy { slack: d.overhead }))
            .collect();
        if train_batch.is_some() {
            let slack = default_slack(Phase::TrainDP).min(train_compute);
            actions.push((dp_start - slack, FabricAction::TrainDp));
        }
        actions.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut train = TrainTiming::zero();
        let mut train_done = train_batch.is_none();
        let run_train = |topo: &Topology| -> Result<TrainTiming> {
            let b = train_batch.as_deref().unwrap_or(&[]);
            run_train_step(b, &setup.train, &topo.clone().shifted(dp_start), &pods)
        };
        for (t, action) in &actions {
            let Some(ctrl) = controller.as_mut() else { break };
            let f = StepFabric { controller: ctrl, pods: &pods };
            match action {
                FabricAction::GenDeploy { slack } => {
                    let intent = f.intent(Phase::GenTP, Primitive::AllReduce, *slack);
                    f.controller.materialize(&intent, &DemandSummary::new(Granularity::TorLevel, 1.0), *t)?;
                }
                FabricAction::TrainDp => {
                    let topo = Topology::rfabric(&f.controller.state);
                    let demand = dp_demand(&setup.train, train_tokens, &topo, &pods);
                    let mut intent = f.intent(Phase::TrainDP, Primitive::AllReduce, dp_start - t);
                    intent.volume = demand.entries.iter().map(|e| e.2).sum();
                    if !demand.entries.is_empty() {
                        f.controller.materialize(&intent, &demand, *t)?;
                    }
                    train = run_train(&Topology::rfabric(&f.controller.state))?;
                    train_done = true;
                }
            }
        }
        if !train_done {
            train = match &static_topo {
                Some(topo) => run_train(topo)?,
                None => run_train(&Topology::rfabric(&controller.as_ref().unwrap().state))?,
            };
        }
        if train_batch.is_none() {
            train = TrainTiming::zero();
        }
        let train_time = train.total;
        for (phase, duration, bytes) in &train.phases {
            metrics.comm.push(CommRecord {
                phase: *phase,
                start: dp_start,
                duration: *duration,
                bytes: *bytes,
                epoch: controller.as_ref().map_or(0, |c| c.state.epoch),
            });
        }

        let boundary = match setup.pipeline.paradigm {
            Paradigm::OneStepAsync => clock + gen.makespan.max(train_time),
            Paradigm::SyncDisaggregated => clock + gen.makespan + train_time,
        };

        // weight sync over the materialized tree (hybrid) or static routing
        let sync = match controller.as_mut() {
            Some(ctrl) => {
                let f = StepFabric { controller: ctrl, pods: &pods };
                let slack = default_slack(Phase::WeightSync);
                let at = (boundary - slack).max(train_start + train_time).min(boundary);
                let intent = f.intent(Phase::WeightSync, Primitive::T2G, boundary - at);
                f.controller.materialize(&intent, &DemandSummary::new(Granularity::PodLevel, 1.0), at)?;
                let state = &f.controller.state;
                let topo = Topology::rfabric(state).shifted(boundary);
                let tree = (state.current.template == Some(TemplateKind::MulticastTree)).then_some((&state.current, state));
                weight_sync_time(weight_bytes, &topo, &pods, tree, setup.weight_sync_chunk, &[])?
            }
            None => weight_sync_time(weight_bytes, static_topo.as_ref().unwrap(), &pods, None, setup.weight_sync_chunk, &[])?,
        };
        metrics.comm.push(CommRecord {
            phase: Phase::WeightSync,
            start: boundary,
            duration: sync.total,
            bytes: weight_bytes,
            epoch: controller.as_ref().map_or(0, |c| c.state.epoch),
        });

        let step_time = boundary - clock + sync.total;
        let (busy_max, busy_min, busy_ratio) = busy_stats(&gen.busy);
        metrics.steps.push(StepMetrics {
            step,
            start: clock,
            gen_makespan: gen.makespan,
            train_time,
            train_compute: train.compute,
            train_comm: train.comm,
            weight_sync_time: sync.total,
            step_time,
            samples: gen.samples,
            tokens: gen.tokens,
            samples_per_s: if step_time > 0.0 { gen.samples as f64 / step_time } else { 0.0 },
            tokens_per_s: if step_time > 0.0 { gen.tokens as f64 / step_time } else { 0.0 },
            reconfigs: gen.reconfigs,
            reconfig_overhead: gen.reconfig_overhead,
            plan_migrations: gen.plan_migrations,
            rebalance_migrations: gen.rebalance_migrations,
            busy_max,
            busy_min,
            busy_ratio,
            dp_bytes: train.phases.iter().filter(|p| p.0 == Phase::TrainDP).map(|p| p.2).sum(),
            weight_sync_bytes: weight_bytes,
            fabric_epoch: controller.as_ref().map_or(0, |c| c.state.epoch),
        });
        metrics.remaining.extend(gen.remaining.iter().map(|&(t, n)| RemainingPoint { step, time: t, remaining: n }));
        metrics.busy.push(gen.busy.clone());
        metrics.decisions.extend(gen.decisions.into_iter().map(|mut record| {
            record.time += clock;
            DecisionLine { step, record }
        }));
        clock += step_time;
        prev_batch = Some(batch);
    }
    if let Some(c) = controller {
        metrics.fabric = c.log;
        metrics.circuit_plans = c.history;
    }
    let n = metrics.steps.len();
    let s = &mut metrics.summary;
    s.n_steps = n;
    s.total_time = clock;
    s.samples = metrics.steps.iter().map(|m| m.samples).sum();
    s.tokens = metrics.steps.iter().map(|m| m.tokens).sum();
    s.samples_per_s = if clock > 0.0 { s.samples as f64 / clock } else { 0.0 };
    s.tokens_per_s = if clock > 0.0 { s.tokens as f64 / clock } else { 0.0 };
    let mean = |f: &dyn Fn(&StepMetrics) -> f64| metrics.steps.iter().map(f).sum::<f64>() / n.max(1) as f64;
    s.mean_gen_makespan = mean(&|m| m.gen_makespan);
    s.mean_train_time = mean(&|m| m.train_time);
    s.mean_weight_sync = mean(&|m| m.weight_sync_time);
    s.mean_busy_ratio = mean(&|m| m.busy_ratio);
    s.reconfigs = metrics.steps.iter().map(|m| m.reconfigs).sum();
    s.reconfig_overhead = metrics.steps.iter().map(|m| m.reconfig_overhead).sum();
    s.plan_migrations = metrics.steps.iter().map(|m| m.plan_migrations).sum();
    s.rebalance_migrations = metrics.steps.iter().map(|m| m.rebalance_migrations).sum();
    Ok(metrics)
}
