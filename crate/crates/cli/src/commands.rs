//! Subcommand bodies. Each returns its CSV rows in sweep order; writing is
//! left to the caller.

use std::io::Write;

use anyhow::Context;
use hybridsim_core::decomp::{DecodeRequest, PrefillChunk};
use hybridsim_core::experiment::{best_sm_aware, default_config, run_batch_with, BatchRun};
use hybridsim_core::gpu::{make_microbench, oracle_runtime, simulate_with, SimOptions};
use hybridsim_core::serving::{generate_trace, run_serving, CostModel, ServingOptions};
use hybridsim_core::verify::{run_all, SuiteReport};
use hybridsim_core::{ExecutionStrategy, GpuSpec, HybridBatchSpec, ModelShape};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_strategies, ChunkPosition, Config, PolicyKind, StrategyChoice};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelRow {
    pub run_id: usize,
    pub strategy: String,
    pub policy: String,
    pub ctas_per_sm: usize,
    pub makespan: f64,
    pub oracle: f64,
    pub compute_util: f64,
    pub bw_util: f64,
    pub waves: usize,
    pub quantized_ctas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MicrobenchRow {
    pub compute_iters: usize,
    pub strategy: String,
    pub makespan: f64,
    pub oracle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServingRow {
    pub qps: f64,
    pub policy: String,
    pub fused: bool,
    /// Empty for policies without chunking.
    pub chunk_size: Option<usize>,
    pub ttft_p50: f64,
    pub ttft_p99: f64,
    pub tbt_p50: f64,
    pub tbt_p99: f64,
    pub lat_p50: f64,
    pub lat_p99: f64,
    pub stall200: f64,
    pub stall500: f64,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub context: usize,
    pub chunk_size: usize,
    pub batch_size: usize,
    pub position: String,
    pub serial: f64,
    pub fused: f64,
    pub speedup: f64,
}

pub fn write_csv<R: Serialize>(rows: &[R], out: impl Write) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn pool(threads: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building worker pool")
}

/// The prompt chunk starting at `offset`, with the decodes running beside it.
pub fn chunk_batch(
    shape: ModelShape,
    chunk_size: usize,
    offset: usize,
    prompt_len: usize,
    num_decodes: usize,
    decode_context: usize,
) -> HybridBatchSpec {
    let chunk = chunk_size.min(prompt_len - offset);
    HybridBatchSpec {
        prefill: Some(PrefillChunk {
            chunk_size: chunk,
            context_len: offset + chunk,
            position_offset: offset,
        }),
        decodes: vec![
            DecodeRequest {
                context_len: decode_context
            };
            num_decodes
        ],
        shape,
    }
}

fn run_choice(
    batch: &HybridBatchSpec,
    gpu: &GpuSpec,
    choice: StrategyChoice,
    options: SimOptions,
) -> anyhow::Result<BatchRun> {
    Ok(match choice {
        StrategyChoice::Fixed(s) => {
            run_batch_with(batch, gpu, s, &default_config(batch, gpu, s), options)?
        }
        StrategyChoice::BestSmAware => best_sm_aware(batch, gpu, options.seed)?,
    })
}

pub struct KernelOutput {
    pub rows: Vec<KernelRow>,
    /// One block of trace lines per row, when requested.
    pub traces: Vec<Vec<String>>,
}

/// Every chunk of the prompt under every strategy; `run_id` is the chunk index.
pub fn kernel_sim(cfg: &Config, record_trace: bool) -> anyhow::Result<KernelOutput> {
    let k = &cfg.kernel;
    let shape = cfg.shape.to_shape()?;
    let strategies = parse_strategies(&k.strategies)?;
    let chunks = k.prompt_len.div_ceil(k.chunk_size);
    let jobs: Vec<(usize, StrategyChoice)> = (0..chunks)
        .flat_map(|c| strategies.iter().map(move |&s| (c, s)))
        .collect();
    let options = SimOptions {
        seed: cfg.seed,
        randomize_ties: k.randomize_ties,
        record_trace,
    };
    let runs: Vec<(KernelRow, Vec<String>)> = pool(cfg.threads)?.install(|| {
        jobs.par_iter()
            .map(|&(c, choice)| {
                let batch = chunk_batch(
                    shape,
                    k.chunk_size,
                    c * k.chunk_size,
                    k.prompt_len,
                    k.num_decodes,
                    k.decode_context,
                );
                let run = run_choice(&batch, &cfg.gpu, choice, options)
                    .with_context(|| format!("chunk {c}"))?;
                let (strategy, policy) = match choice {
                    StrategyChoice::BestSmAware => (
                        "sm_aware".to_string(),
                        format!("best({})", run.strategy.policy_name()),
                    ),
                    fixed => fixed.label(),
                };
                let r = &run.result;
                let trace = r.trace.iter().map(|t| t.to_line()).collect();
                Ok((
                    KernelRow {
                        run_id: c,
                        strategy,
                        policy,
                        ctas_per_sm: run.config.ctas_per_sm,
                        makespan: r.makespan,
                        oracle: run.oracle,
                        compute_util: r.compute_utilization,
                        bw_util: r.bandwidth_utilization,
                        waves: r.waves_used,
                        quantized_ctas: r.quantized_ctas,
                    },
                    trace,
                ))
            })
            .collect::<anyhow::Result<_>>()
    })?;
    let (rows, traces) = runs.into_iter().unzip();
    Ok(KernelOutput { rows, traces })
}

/// The compute and memory kernels co-scheduled at each compute intensity.
pub fn microbench(cfg: &Config) -> anyhow::Result<Vec<MicrobenchRow>> {
    let m = &cfg.microbench;
    let strategies: Vec<ExecutionStrategy> = parse_strategies(&m.strategies)?
        .into_iter()
        .filter_map(|c| match c {
            StrategyChoice::Fixed(s) => Some(s),
            StrategyChoice::BestSmAware => None,
        })
        .collect();
    let jobs: Vec<(usize, ExecutionStrategy)> = m
        .compute_iters
        .iter()
        .flat_map(|&i| strategies.iter().map(move |&s| (i, s)))
        .collect();
    pool(cfg.threads)?.install(|| {
        jobs.par_iter()
            .map(|&(iters, strategy)| {
                let (c, mem) = make_microbench(iters, m.array_len, &cfg.gpu);
                let launches = [c, mem];
                let r = simulate_with(
                    &cfg.gpu,
                    &launches,
                    strategy,
                    SimOptions {
                        seed: cfg.seed,
                        ..SimOptions::default()
                    },
                )?;
                Ok(MicrobenchRow {
                    compute_iters: iters,
                    strategy: strategy.to_string(),
                    makespan: r.makespan,
                    oracle: oracle_runtime(&cfg.gpu, &launches),
                })
            })
            .collect()
    })
}

/// One run per (qps, policy, fused) with a trace generated per qps. Fused
/// attention only changes hybrid batches, so it is swept for the chunked
/// policy alone.
pub fn serve_sim(cfg: &Config) -> anyhow::Result<Vec<ServingRow>> {
    let s = &cfg.serving;
    let cost = CostModel::new(cfg.gpu, cfg.shape.to_shape()?, s.cost)?;
    let mut jobs = Vec::new();
    for &qps in &s.qps {
        for &kind in &s.policies {
            match kind {
                PolicyKind::PrefillPrioritized => jobs.push((qps, kind, false)),
                PolicyKind::ChunkedHybrid => jobs.extend(s.fused.iter().map(|&f| (qps, kind, f))),
            }
        }
    }
    pool(cfg.threads)?.install(|| {
        jobs.par_iter()
            .map(|&(qps, kind, fused)| {
                let trace = generate_trace(&s.workload.at_qps(qps), cfg.seed)?;
                let policy = s.policy(kind);
                let m = run_serving(
                    &trace,
                    policy,
                    &cost,
                    ServingOptions {
                        fused,
                        record_iterations: false,
                    },
                    &hybridsim_core::serving::DEFAULT_STALL_THRESHOLDS,
                )?
                .metrics;
                Ok(ServingRow {
                    qps,
                    policy: policy.name().into(),
                    fused,
                    chunk_size: policy.chunk_size(),
                    ttft_p50: m.ttft_p50,
                    ttft_p99: m.ttft_p99,
                    tbt_p50: m.tbt_p50,
                    tbt_p99: m.tbt_p99,
                    lat_p50: m.latency_p50,
                    lat_p99: m.latency_p99,
                    stall200: m.stall_at(200.0).unwrap_or(0.0),
                    stall500: m.stall_at(500.0).unwrap_or(0.0),
                    throughput: m.throughput,
                })
            })
            .collect()
    })
}

/// Offset of the chunk at `position` in a prompt of `context` tokens.
pub fn chunk_offset(context: usize, chunk: usize, position: ChunkPosition) -> usize {
    match position {
        ChunkPosition::Mid => (context.div_ceil(chunk) / 2) * chunk,
        ChunkPosition::Last => context - chunk,
    }
}

/// Serial against the best SM-aware fused run over the sweep grid; decodes
/// share the prompt's context length.
pub fn sweep(cfg: &Config) -> anyhow::Result<Vec<SweepRow>> {
    let w = &cfg.sweep;
    let shape = cfg.shape.to_shape()?;
    let mut jobs = Vec::new();
    for &context in &w.contexts {
        for &chunk in &w.chunk_sizes {
            for &bs in &w.batch_sizes {
                for &pos in &w.positions {
                    jobs.push((context, chunk, bs, pos));
                }
            }
        }
    }
    pool(cfg.threads)?.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(index, &(context, chunk, bs, pos))| {
                let offset = chunk_offset(context, chunk, pos);
                let batch = chunk_batch(shape, chunk, offset, context, bs, context);
                let options = SimOptions {
                    seed: cfg.seed,
                    ..SimOptions::default()
                };
                let serial = run_choice(
                    &batch,
                    &cfg.gpu,
                    StrategyChoice::Fixed(ExecutionStrategy::Serial),
                    options,
                )?
                .result
                .makespan;
                let fused = best_sm_aware(&batch, &cfg.gpu, cfg.seed)?.result.makespan;
                Ok(SweepRow {
                    index,
                    context,
                    chunk_size: chunk,
                    batch_size: bs,
                    position: pos.name().into(),
                    serial,
                    fused,
                    speedup: serial / fused,
                })
            })
            .collect()
    })
}

pub fn attn_verify(cfg: &Config) -> anyhow::Result<Vec<SuiteReport>> {
    Ok(run_all(&cfg.verify, cfg.seed)?)
}

/// Fixed-width pass/fail table.
pub fn verify_table(reports: &[SuiteReport]) -> String {
    let mut out = format!(
        "{:<10} {:>7} {:>9} {:>12}  result\n",
        "suite", "cases", "failures", "worst"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<10} {:>7} {:>9} {:>12.3e}  {}\n",
            r.name,
            r.cases,
            r.failures,
            r.worst,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
