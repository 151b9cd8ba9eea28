//! rlsim: a deterministic simulator for disaggregated RL post-training.
//!
//! The crate models one-step-asynchronous RL pipelines where generation and
//! training run on separate GPU pods:
//!
//! - [`workload`]: synthetic heavy-tailed request traces and the step-level
//!   length predictor.
//! - [`perfmodel`]: analytic decode throughput, KV capacity, completion-time
//!   and reconfiguration cost models.
//! - [`scheduler`]: the generation orchestrator (makespan planner, LoadIndex
//!   balancer and the periodic control loop).
//! - [`fabric`]: the hybrid EPS/OCS fabric, topology templates, circuit
//!   materialization and network cost accounting.
//! - [`netmodel`]: phase intents and flow-level max-min communication times.
//! - [`simengine`]: the discrete-event pipeline simulation.
//! - [`scenario`] and [`experiment`]: scenario files and the run/compare/sweep
//!   drivers used by the `rlsim` binary.

pub mod error;
pub mod experiment;
pub mod fabric;
pub mod netmodel;
pub mod perfmodel;
pub mod scenario;
pub mod scheduler;
pub mod simengine;
pub mod workload;

pub use error::{Error, Result};
