//! Online energy and workload management for geo-distributed data centers
//! powered by smart microgrids.
//!
//! Building blocks, bottom up:
//! - [`model`]: scenario configuration, decisions, power and cost accounting.
//! - [`queues`]: Lyapunov constants and the workload and energy queues.
//! - [`admm`]: the per-slot problem and its distributed ADM-G solver.
//! - [`oracle`]: independent reference solvers and random test instances.
//! - [`controller`]: the online policy and the three baselines.
//! - [`scenario`]: config and trace I/O, synthetic traces.
//! - [`harness`]: full runs, metrics and report files.
//! - [`par`]: data parallelism across independent runs.

pub mod admm;
pub mod controller;
pub mod error;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod par;
pub mod queues;
pub mod scenario;

pub use admm::{solve_slot, AdmmOptions, AdmmSolution, SlotProblem};
pub use controller::{PolicyKind, SolverChoice};
pub use error::{Error, Result};
pub use harness::{compare, run, RunOptions, RunReport, Summary};
pub use model::{ControlDecision, ScenarioConfig, SlotInputs};
pub use par::Execution;
pub use queues::{compute_constants, LyapunovConstants, SystemState};
pub use scenario::{load_scenario, synth_traces, TraceSet};
