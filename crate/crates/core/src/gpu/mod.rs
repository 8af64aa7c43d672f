//! Two-resource fluid simulation of a multi-SM GPU running CTA work units.

mod engine;
mod microbench;
mod sources;
mod spec;

use thiserror::Error;

pub use engine::{simulate, simulate_with, SimOptions};
pub use microbench::{make_microbench, MICROBENCH_BALANCED_ITERS};
pub use sources::{proportional_ratio, SchedulerState};
pub use spec::{
    Colocation, ExecutionStrategy, GpuSpec, KernelLaunch, SimResult, SmAwarePolicy, TraceEvent,
    TraceRecord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("nothing to simulate")]
    Empty,
    #[error("scheduler stalled with {0} jobs pending")]
    Stalled(usize),
}

/// Perfect-overlap lower bound: the slower of aggregate compute and aggregate bandwidth.
pub fn oracle_runtime(gpu: &GpuSpec, launches: &[KernelLaunch]) -> f64 {
    let c: f64 = launches.iter().map(KernelLaunch::total_compute).sum();
    let m: f64 = launches.iter().map(KernelLaunch::total_memory).sum();
    (c / gpu.total_compute_rate()).max(m / gpu.mem_bandwidth_total)
}
