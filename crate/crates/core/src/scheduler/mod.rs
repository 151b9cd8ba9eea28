//! Generation-side compute orchestration.
//!
//! Two mechanisms on two time scales: a periodic planner that chooses a
//! parallel mode per instance slot and a bucket-to-instance assignment
//! minimising expected makespan plus reconfiguration overhead, and a
//! reactive balancer that migrates waiting requests between instances
//! ranked by LoadIndex.

mod balancer;
mod orchestrator;
mod planner;

pub use balancer::{imbalance, load_index, rebalance, Instance, Migration, QueuedRequest};
pub use orchestrator::{
    estimate_makespan, Action, ClusterSnapshot, DecisionRecord, LengthView, Orchestrator, TickOutcome,
};
pub use planner::{
    evaluate_plan, prune_candidates, solve_plan, split_for_planning, validate_plan, BindingConstraint,
    Plan, PlanEvaluation, SolveError, WaveStats,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perfmodel::ParallelMode;

/// Target KV utilisation band `[(1-δ)ρC, (1+δ)ρC]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvPolicy {
    pub rho: f64,
    pub delta: f64,
    /// When false the lower edge of the band is waived (logged on the plan).
    #[serde(default)]
    pub hard: bool,
}

impl Default for KvPolicy {
    fn default() -> Self {
        KvPolicy { rho: 0.9, delta: 0.1, hard: false }
    }
}

impl KvPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) || !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!(
                "kv_policy: need rho in (0,1] and delta in [0,1), got rho={} delta={}",
                self.rho, self.delta
            )));
        }
        if (1.0 + self.delta) * self.rho > 1.0 + 1e-6 {
            return Err(Error::config("kv_policy: (1+delta)*rho exceeds capacity"));
        }
        Ok(())
    }

    pub fn upper(&self, capacity: u64) -> f64 {
        (1.0 + self.delta) * self.rho * capacity as f64
    }

    pub fn lower(&self, capacity: u64) -> f64 {
        (1.0 - self.delta) * self.rho * capacity as f64
    }
}

/// Wave-lifecycle thresholds used to prune the candidate modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub high_watermark: usize,
    pub low_watermark: usize,
    pub skew_threshold: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { high_watermark: 128, low_watermark: 32, skew_threshold: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    pub theta: f64,
    /// Compare `(max-min)/max` rather than `max-min` against `theta`.
    pub theta_relative: bool,
    pub dt_pro: f64,
    pub dt_react: f64,
    pub epsilon: f64,
    pub g_total: u32,
    pub kv_policy: KvPolicy,
    pub candidate_modes: Vec<ParallelMode>,
    pub prune: PruneConfig,
    /// Search-space size up to which the planner enumerates exactly.
    pub exact_threshold: f64,
    pub beam_width: usize,
    pub rate_smoothing: f64,
    pub enable_planning: bool,
    pub enable_balancing: bool,
}

impl SchedulerConfig {
    pub fn new(g_total: u32, candidate_modes: Vec<ParallelMode>) -> Self {
        SchedulerConfig {
            theta: 0.25,
            theta_relative: true,
            dt_pro: 30.0,
            dt_react: 5.0,
            epsilon: 1.0,
            g_total,
            kv_policy: KvPolicy::default(),
            candidate_modes,
            prune: PruneConfig::default(),
            exact_threshold: 2e6,
            beam_width: 32,
            rate_smoothing: 0.3,
            enable_planning: true,
            enable_balancing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(Error::config("scheduler.theta must be > 0"));
        }
        if !(self.dt_react > 0.0) || self.dt_react > self.dt_pro {
            return Err(Error::config("scheduler: need 0 < dt_react <= dt_pro"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::config("scheduler.epsilon must be >= 0"));
        }
        if self.g_total == 0 {
            return Err(Error::config("scheduler.g_total must be positive"));
        }
        if !(self.rate_smoothing > 0.0 && self.rate_smoothing <= 1.0) {
            return Err(Error::config("scheduler.rate_smoothing must be in (0,1]"));
        }
        self.kv_policy.validate()?;
        for m in &self.candidate_modes {
            m.validate()?;
        }
        Ok(())
    }
}
