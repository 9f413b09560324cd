//! Speculative decoding under batching: an analytic speedup model, an
//! iteration-level serving simulator, and a controller that retrains the
//! draft model from hidden states captured while serving.
//!
//! Bundled data covers four target-model latency profiles, the workload
//! scripts used by the examples, and three GPU classes for cluster planning.

pub mod config;
pub mod control;
pub mod error;
pub mod hetero;
pub mod par;
pub mod perf_model;
pub mod report;
pub mod serving;
pub mod training;
pub mod workload;

pub use config::{PreparedRun, RunConfig, SweepConfig};
pub use control::{ControlEvent, ControlEventKind, ControllerParams, ControllerState};
pub use error::{Result, SimError};
pub use par::Execution;
pub use perf_model::{
    expected_accept_length, min_acceptance_for_gain, practical_speedup, theoretical_speedup,
    BreakEven, LatencyProfile, SpeculationConfig,
};
pub use serving::{run, EngineConfig, RunMetrics, RunMode, RunSummary, SignalGeometry};
pub use training::{compare_training_modes, SimTrainer, Trainer, TrainerProfile};
pub use workload::{build_script, WorkloadConfig, WorkloadScript};
