//! Heterogeneity-aware task allocation for decentralized data-parallel
//! training.
//!
//! The crate simulates synchronous ring-allreduce training over workers of
//! unequal speed. Per-aggregation sample counts can be fixed (`equal`,
//! `static`) or rebalanced each epoch from measured gradient-computation
//! times (`adaptive`), which shrinks barrier waiting time and total epoch
//! time on heterogeneous clusters while leaving the training trajectory
//! unchanged.
//!
//! Module map:
//! - [`domain`]: shared value types and config validation
//! - [`allocator`]: the rebalancing math and integer apportionment
//! - [`collective`]: ring allreduce and scalar allgather
//! - [`transport`]: in-memory and TCP ring transports
//! - [`trainer`]: desk-scale models, gradients, SGD and partitioning
//! - [`engine`]: the virtual-clock training loop
//! - [`metrics`]: CSV/JSON reports and speedup summaries
//!
//! See the `book/` directory for a guided tour; its code snippets run as
//! doc-tests.

pub mod allocator;
pub mod collective;
pub mod domain;
pub mod engine;
pub mod metrics;
pub mod trainer;
pub mod transport;

pub use domain::{
    AllocationState, DatasetSpec, EpochTiming, ExperimentConfig, GradientBuffer, LinkSpec,
    ModelKind, ModelSpec, Nanos, RunMode, StabilitySpec, WorkerProfile,
};
pub use engine::{run_experiment, EngineError};
pub use metrics::{EpochReport, ExperimentReport};

// The guide's code blocks compile and run with the rest of the test suite.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ring-allreduce.md")]
    mod ring_allreduce {}
    #[doc = include_str!("../../../book/src/static-allocation.md")]
    mod static_allocation {}
    #[doc = include_str!("../../../book/src/adaptive-allocation.md")]
    mod adaptive_allocation {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
