//! Glue between batch decomposition and the GPU simulator.

use crate::decomp::{
    decompose_with, select_tile_config, DecompError, HybridBatchSpec, SplitPolicy, TileConfig,
    WorkDecomposition,
};
use crate::gpu::{
    oracle_runtime, simulate_with, ExecutionStrategy, GpuSpec, KernelLaunch, SimError, SimOptions,
    SimResult, SmAwarePolicy,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Prefill on stream 0, decode on stream 1; empty ops are omitted.
pub fn launches(decomp: &WorkDecomposition) -> Vec<KernelLaunch> {
    let smem = decomp.config.shared_mem_per_cta;
    let mut out = Vec::with_capacity(2);
    if !decomp.prefill_tasks.is_empty() {
        out.push(KernelLaunch::new(decomp.prefill_tasks.clone(), smem, 0));
    }
    if !decomp.decode_tasks.is_empty() {
        out.push(KernelLaunch::new(decomp.decode_tasks.clone(), smem, 1));
    }
    out
}

/// Tile config a strategy runs with unless overridden: the fused kernel picks
/// its own, every other strategy reuses the standalone kernels.
pub fn default_config(
    batch: &HybridBatchSpec,
    gpu: &GpuSpec,
    strategy: ExecutionStrategy,
) -> TileConfig {
    match strategy {
        ExecutionStrategy::SmAware { .. } => select_tile_config(batch, gpu),
        _ => TileConfig::standalone(gpu),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRun {
    pub strategy: ExecutionStrategy,
    pub config: TileConfig,
    pub result: SimResult,
    pub oracle: f64,
}

pub fn run_batch_with(
    batch: &HybridBatchSpec,
    gpu: &GpuSpec,
    strategy: ExecutionStrategy,
    config: &TileConfig,
    options: SimOptions,
) -> Result<BatchRun, ExperimentError> {
    let decomp = decompose_with(batch, config, gpu)?;
    let launches = launches(&decomp);
    let result = simulate_with(gpu, &launches, strategy, options)?;
    Ok(BatchRun {
        strategy,
        config: *config,
        oracle: oracle_runtime(gpu, &launches),
        result,
    })
}

pub fn run_batch(
    batch: &HybridBatchSpec,
    gpu: &GpuSpec,
    strategy: ExecutionStrategy,
    seed: u64,
) -> Result<BatchRun, ExperimentError> {
    let config = default_config(batch, gpu, strategy);
    run_batch_with(
        batch,
        gpu,
        strategy,
        &config,
        SimOptions {
            seed,
            ..SimOptions::default()
        },
    )
}

/// Fastest SM-aware run over both residencies and both policies, limited splits.
pub fn best_sm_aware(
    batch: &HybridBatchSpec,
    gpu: &GpuSpec,
    seed: u64,
) -> Result<BatchRun, ExperimentError> {
    let mut best: Option<BatchRun> = None;
    for ctas in [2, 4] {
        let config = TileConfig {
            split_policy: SplitPolicy::Limited,
            ..TileConfig::fused(ctas, gpu)
        };
        for policy in [SmAwarePolicy::FiftyFifty, SmAwarePolicy::Proportional] {
            let run = run_batch_with(
                batch,
                gpu,
                ExecutionStrategy::SmAware { policy },
                &config,
                SimOptions {
                    seed,
                    ..SimOptions::default()
                },
            )?;
            if best
                .as_ref()
                .is_none_or(|b| run.result.makespan < b.result.makespan)
            {
                best = Some(run);
            }
        }
    }
    Ok(best.expect("four candidates evaluated"))
}
