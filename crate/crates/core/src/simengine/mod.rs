//! Discrete-event execution of the RL pipeline: generation steps with the
//! orchestrator in the loop, training steps, weight synchronization and
//! fabric reconfiguration on one clock.

mod gen;
mod pipeline;
mod train;

pub use gen::{run_gen_step, Deployment, Dispatch, GenCluster, GenOptions, GenStepResult, LengthSource};
pub use pipeline::{run_pipeline, DecisionLine, Metrics, RemainingPoint, SimSetup, StepMetrics, Summary};
pub use train::{run_train_step, TrainSetup, TrainTiming};

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Event kinds in tie-break order: at equal times earlier variants fire first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    ReconfigEnd,
    PhaseEnd,
    PhaseStart,
    WeightSyncStart,
    StepBoundary,
    ReconfigStart,
    DecodeRound,
    OrchestratorTick,
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: f64,
    pub kind: EventKind,
    seq: u64,
    pub payload: P,
}

impl<P> PartialEq for Event<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<P> Eq for Event<P> {}
impl<P> PartialOrd for Event<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Event<P> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.cmp(&self.kind))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Time-ordered queue; FIFO among events with equal time and kind.
#[derive(Debug)]
pub struct EventQueue<P> {
    heap: BinaryHeap<Event<P>>,
    seq: u64,
    now: f64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), seq: 0, now: 0.0 }
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn push(&mut self, time: f64, kind: EventKind, payload: P) -> Result<()> {
        if !(time >= self.now) {
            return Err(Error::InvalidPlan(format!("event at {time} scheduled before now {}", self.now)));
        }
        self.heap.push(Event { time, kind, seq: self.seq, payload });
        self.seq += 1;
        Ok(())
    }

    pub fn pop(&mut self) -> Option<Event<P>> {
        let e = self.heap.pop()?;
        self.now = e.time;
        Some(e)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Gen of batch i+1 overlaps Train of batch i.
    OneStepAsync,
    SyncDisaggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub paradigm: Paradigm,
    pub n_steps: usize,
    pub gen_gpus: u32,
    pub train_gpus: u32,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gen_gpus == 0 || self.train_gpus == 0 {
            return Err(Error::config("pipeline: GPU counts must be positive"));
        }
        if self.n_steps == 0 {
            return Err(Error::config("pipeline: n_steps must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_orders_by_time_then_kind_then_fifo() {
        let mut q = EventQueue::new();
        q.push(1.0, EventKind::DecodeRound, "d1").unwrap();
        q.push(1.0, EventKind::PhaseStart, "p").unwrap();
        q.push(1.0, EventKind::DecodeRound, "d2").unwrap();
        q.push(1.0, EventKind::ReconfigEnd, "r").unwrap();
        q.push(0.5, EventKind::OrchestratorTick, "t").unwrap();
        let order: Vec<&str> = std::iter::from_fn(|| q.pop().map(|e| e.payload)).collect();
        assert_eq!(order, ["t", "r", "p", "d1", "d2"]);
        assert_eq!(q.now(), 1.0);
    }

    #[test]
    fn clock_never_moves_backward() {
        let mut q = EventQueue::new();
        q.push(2.0, EventKind::DecodeRound, ()).unwrap();
        q.pop();
        assert!(q.push(1.0, EventKind::DecodeRound, ()).is_err());
        assert!(q.push(2.0, EventKind::DecodeRound, ()).is_ok());
    }
}
