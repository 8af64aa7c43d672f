//! Numerical reference and performance model for fused prefill/decode
//! attention in hybrid-batched LLM inference.

pub mod attention;
pub mod decomp;
pub mod experiment;
pub mod gpu;
pub mod serving;
pub mod verify;

pub use attention::{AttentionError, ModelShape};
pub use decomp::{CtaTask, DecompError, HybridBatchSpec, Op, TileConfig, WorkDecomposition};
pub use gpu::{ExecutionStrategy, GpuSpec, KernelLaunch, SimError, SimResult, SmAwarePolicy};
pub use serving::{CostModel, Metrics, Request, SchedulerPolicy, ServingError};
