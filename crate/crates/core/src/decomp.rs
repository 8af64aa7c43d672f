//! Hybrid batch to CTA-granularity work units.
//!
//! Costs: compute in flop-units (one multiply-accumulate over a head-dim
//! vector), memory in elements moved. The simulator only consumes ratios.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{split_ranges, ModelShape};
use crate::gpu::GpuSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid tile config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    Prefill,
    Decode,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Prefill => "prefill",
            Op::Decode => "decode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefillChunk {
    pub chunk_size: usize,
    /// Full prompt length; the chunk lies inside it.
    pub context_len: usize,
    /// Tokens of the prompt already processed before this chunk.
    pub position_offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub context_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridBatchSpec {
    #[serde(default)]
    pub prefill: Option<PrefillChunk>,
    #[serde(default)]
    pub decodes: Vec<DecodeRequest>,
    pub shape: ModelShape,
}

impl HybridBatchSpec {
    pub fn validate(&self) -> Result<(), DecompError> {
        self.shape
            .validate()
            .map_err(|e| DecompError::InvalidBatch(e.to_string()))?;
        if self.prefill.is_none() && self.decodes.is_empty() {
            return Err(DecompError::InvalidBatch(
                "batch has neither prefill nor decodes".into(),
            ));
        }
        if let Some(p) = &self.prefill {
            if p.chunk_size == 0 {
                return Err(DecompError::InvalidBatch(
                    "prefill chunk_size must be >= 1".into(),
                ));
            }
            if p.position_offset + p.chunk_size > p.context_len {
                return Err(DecompError::InvalidBatch(format!(
                    "prefill chunk [{}, {}) exceeds context_len {}",
                    p.position_offset,
                    p.position_offset + p.chunk_size,
                    p.context_len
                )));
            }
        }
        if let Some(i) = self.decodes.iter().position(|d| d.context_len == 0) {
            return Err(DecompError::InvalidBatch(format!(
                "decode {i} has context_len 0"
            )));
        }
        Ok(())
    }

    pub fn prefill_tokens(&self) -> usize {
        self.prefill.map_or(0, |p| p.chunk_size)
    }

    pub fn total_tokens(&self) -> usize {
        self.prefill_tokens() + self.decodes.len()
    }
}

/// Granularity of a "wave" when capping prefill splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveUnit {
    /// One CTA per SM per wave.
    #[default]
    PerSm,
    /// One CTA per resident slot per wave.
    PerSlot,
}

/// How many KV splits each prefill q-tile gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Split-count heuristic of a standalone kernel, capped at two waves.
    Limited,
    /// Split-count heuristic of a standalone kernel, uncapped.
    Unlimited,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    pub prefill_tile_q: usize,
    pub decode_tile_q: usize,
    pub tile_kv: usize,
    pub warps_per_cta: usize,
    pub ctas_per_sm: usize,
    pub shared_mem_per_cta: usize,
    pub virtual_decode: bool,
    pub split_policy: SplitPolicy,
    pub wave_unit: WaveUnit,
}

pub const DEFAULT_TILE_KV: usize = 64;
pub const DEFAULT_WARPS_PER_CTA: usize = 4;
const MAX_UNLIMITED_SPLITS: usize = 128;
/// Split partials are written in f32 and read back by the merge: two
/// element-widths each way.
const MERGE_TRAFFIC_PER_ROW: f64 = 4.0;

impl TileConfig {
    /// Fused-kernel config for the given residency.
    pub fn fused(ctas_per_sm: usize, gpu: &GpuSpec) -> Self {
        Self {
            prefill_tile_q: if ctas_per_sm == 2 { 128 } else { 64 },
            decode_tile_q: 16,
            tile_kv: DEFAULT_TILE_KV,
            warps_per_cta: DEFAULT_WARPS_PER_CTA,
            ctas_per_sm,
            shared_mem_per_cta: gpu.shared_mem_per_sm / ctas_per_sm,
            virtual_decode: true,
            split_policy: SplitPolicy::Limited,
            wave_unit: WaveUnit::PerSm,
        }
    }

    /// Config of the standalone kernels: wide decode tiles, no virtual CTAs,
    /// uncapped prefill splits.
    pub fn standalone(gpu: &GpuSpec) -> Self {
        Self {
            prefill_tile_q: 128,
            decode_tile_q: 64,
            tile_kv: DEFAULT_TILE_KV,
            warps_per_cta: DEFAULT_WARPS_PER_CTA,
            ctas_per_sm: 2,
            shared_mem_per_cta: gpu.shared_mem_per_sm / 2,
            virtual_decode: false,
            split_policy: SplitPolicy::Unlimited,
            wave_unit: WaveUnit::PerSm,
        }
    }

    pub fn validate(&self) -> Result<(), DecompError> {
        if ![16, 64, 128].contains(&self.decode_tile_q) {
            return Err(DecompError::InvalidConfig(format!(
                "decode_tile_q must be 16, 64 or 128, got {}",
                self.decode_tile_q
            )));
        }
        if ![2, 4].contains(&self.ctas_per_sm) {
            return Err(DecompError::InvalidConfig(format!(
                "ctas_per_sm must be 2 or 4, got {}",
                self.ctas_per_sm
            )));
        }
        if self.warps_per_cta == 0 || self.prefill_tile_q == 0 || self.tile_kv == 0 {
            return Err(DecompError::InvalidConfig(
                "warps_per_cta, prefill_tile_q and tile_kv must be >= 1".into(),
            ));
        }
        if self.split_policy == SplitPolicy::Fixed(0) {
            return Err(DecompError::InvalidConfig(
                "fixed split count must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn virtual_shared_mem(&self) -> usize {
        self.shared_mem_per_cta / self.warps_per_cta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtaTask {
    /// Dense index within its op.
    pub id: usize,
    pub op: Op,
    pub request_id: usize,
    /// First query head served; decode CTAs serve the whole group.
    pub q_head: usize,
    pub kv_head: usize,
    pub q_tile: usize,
    /// Absolute KV positions this task reads.
    pub kv_split: Range<usize>,
    pub is_virtual: bool,
    pub compute_work: f64,
    pub memory_work: f64,
    pub barrier_segments: usize,
    /// Fraction of a full CTA's warps this task occupies.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkDecomposition {
    pub prefill_tasks: Vec<CtaTask>,
    pub decode_tasks: Vec<CtaTask>,
    pub config: TileConfig,
    pub prefill_splits: usize,
}

impl WorkDecomposition {
    pub fn total_tasks(&self) -> usize {
        self.prefill_tasks.len() + self.decode_tasks.len()
    }

    /// Decode work counted in full CTAs, folding virtual tasks back.
    pub fn decode_cta_count(&self) -> usize {
        if self.config.virtual_decode {
            self.decode_tasks.len() / self.config.warps_per_cta
        } else {
            self.decode_tasks.len()
        }
    }
}

fn roofline(tasks: &[CtaTask], gpu: &GpuSpec) -> f64 {
    let c: f64 = tasks.iter().map(|t| t.compute_work).sum();
    let m: f64 = tasks.iter().map(|t| t.memory_work).sum();
    (c / gpu.total_compute_rate()).max(m / gpu.mem_bandwidth_total)
}

/// 2 CTAs/SM for prefill-dominant batches, 4 otherwise.
pub fn select_tile_config(batch: &HybridBatchSpec, gpu: &GpuSpec) -> TileConfig {
    let probe = TileConfig::fused(2, gpu);
    let prefill = if batch.prefill.is_some() {
        roofline(&decompose_prefill(batch, &probe, gpu), gpu)
    } else {
        0.0
    };
    let decode = roofline(&decompose_decode(batch, &probe), gpu);
    let ctas = if batch.prefill.is_some() && prefill >= decode {
        2
    } else {
        4
    };
    TileConfig::fused(ctas, gpu)
}

/// One CTA per (request, kv head), optionally cut into one virtual task per warp.
pub fn decompose_decode(batch: &HybridBatchSpec, config: &TileConfig) -> Vec<CtaTask> {
    let shape = &batch.shape;
    let group = shape.group_size();
    let padded_rows = group.div_ceil(config.decode_tile_q) * config.decode_tile_q;
    let hd = shape.head_dim as f64;
    let parts = if config.virtual_decode {
        config.warps_per_cta
    } else {
        1
    };
    let weight = 1.0 / parts as f64;
    let mut tasks = Vec::with_capacity(batch.decodes.len() * shape.num_kv_heads * parts);
    for (request_id, req) in batch.decodes.iter().enumerate() {
        for kv_head in 0..shape.num_kv_heads {
            for range in split_ranges(req.context_len, parts) {
                let len = range.len();
                tasks.push(CtaTask {
                    id: tasks.len(),
                    op: Op::Decode,
                    request_id,
                    q_head: kv_head * group,
                    kv_head,
                    q_tile: 0,
                    is_virtual: parts > 1,
                    compute_work: 2.0 * (padded_rows * len) as f64,
                    memory_work: 2.0 * len as f64 * hd,
                    barrier_segments: len.div_ceil(config.tile_kv).max(1),
                    weight,
                    kv_split: range,
                });
            }
        }
    }
    tasks
}

/// Largest `s >= 1` with `natural * s` within two waves.
pub fn limit_prefill_splits(
    natural_parallelism: usize,
    gpu: &GpuSpec,
    config: &TileConfig,
) -> usize {
    let per_wave = match config.wave_unit {
        WaveUnit::PerSm => gpu.num_sms,
        WaveUnit::PerSlot => gpu.num_sms * config.ctas_per_sm,
    };
    ((2 * per_wave) / natural_parallelism.max(1)).max(1)
}

/// Split count a standalone kernel would pick: none once the grid nearly
/// fills every resident slot, otherwise the smallest count whose wave efficiency
/// is within 85% of the best, skipping counts that leave the KV blocks per
/// split unchanged.
pub fn unlimited_prefill_splits(
    natural_parallelism: usize,
    kv_len: usize,
    gpu: &GpuSpec,
    config: &TileConfig,
) -> usize {
    let slots = config.ctas_per_sm * gpu.num_sms;
    if natural_parallelism as f64 >= 0.8 * slots as f64 {
        return 1;
    }
    let kv_blocks = kv_len.div_ceil(config.tile_kv).max(1);
    let max_splits = MAX_UNLIMITED_SPLITS.min(slots).min(kv_blocks);
    let eligible = |s: usize| s == 1 || kv_blocks.div_ceil(s) != kv_blocks.div_ceil(s - 1);
    let efficiency = |s: usize| {
        let waves = (natural_parallelism * s) as f64 / slots as f64;
        waves / waves.ceil()
    };
    let best = (1..=max_splits)
        .filter(|&s| eligible(s))
        .map(efficiency)
        .fold(0.0, f64::max);
    (1..=max_splits)
        .find(|&s| eligible(s) && efficiency(s) >= 0.85 * best)
        .unwrap_or(1)
}

pub fn prefill_split_count(batch: &HybridBatchSpec, config: &TileConfig, gpu: &GpuSpec) -> usize {
    let Some(p) = batch.prefill else { return 0 };
    let natural = prefill_q_tiles(p.chunk_size, config) * batch.shape.num_q_heads;
    let kv_len = p.position_offset + p.chunk_size;
    match config.split_policy {
        SplitPolicy::Fixed(s) => s,
        SplitPolicy::Unlimited => unlimited_prefill_splits(natural, kv_len, gpu, config),
        SplitPolicy::Limited => unlimited_prefill_splits(natural, kv_len, gpu, config)
            .min(limit_prefill_splits(natural, gpu, config)),
    }
}

/// Token tiles of a prefill chunk; each is processed once per query head.
pub fn prefill_q_tiles(chunk_size: usize, config: &TileConfig) -> usize {
    chunk_size.div_ceil(config.prefill_tile_q)
}

/// q-tiles x query heads x splits; every split re-reads its q-tile. The query
/// heads of one group read the same KV, so each is charged its share of it.
pub fn decompose_prefill(
    batch: &HybridBatchSpec,
    config: &TileConfig,
    gpu: &GpuSpec,
) -> Vec<CtaTask> {
    let Some(p) = batch.prefill else {
        return Vec::new();
    };
    let shape = &batch.shape;
    let group = shape.group_size();
    let hd = shape.head_dim as f64;
    let splits = prefill_split_count(batch, config, gpu);
    let q_tiles = prefill_q_tiles(p.chunk_size, config);
    let mut tasks = Vec::with_capacity(q_tiles * shape.num_q_heads * splits);
    for q_head in 0..shape.num_q_heads {
        for q_tile in 0..q_tiles {
            let rows = q_tile * config.prefill_tile_q
                ..((q_tile + 1) * config.prefill_tile_q).min(p.chunk_size);
            let visible_end = p.position_offset + rows.end;
            let merge = if splits > 1 {
                MERGE_TRAFFIC_PER_ROW * rows.len() as f64 * hd
            } else {
                0.0
            };
            for range in split_ranges(visible_end, splits) {
                let dots: usize = rows
                    .clone()
                    .map(|i| {
                        (p.position_offset + i + 1).clamp(range.start, range.end) - range.start
                    })
                    .sum();
                tasks.push(CtaTask {
                    id: tasks.len(),
                    op: Op::Prefill,
                    request_id: 0,
                    q_head,
                    kv_head: q_head / group,
                    q_tile,
                    is_virtual: false,
                    compute_work: 2.0 * dots as f64,
                    memory_work: 2.0 * hd * range.len() as f64 / group as f64
                        + rows.len() as f64 * hd
                        + merge,
                    barrier_segments: range.len().div_ceil(config.tile_kv).max(1),
                    weight: 1.0,
                    kv_split: range,
                });
            }
        }
    }
    tasks
}

pub fn decompose_with(
    batch: &HybridBatchSpec,
    config: &TileConfig,
    gpu: &GpuSpec,
) -> Result<WorkDecomposition, DecompError> {
    batch.validate()?;
    config.validate()?;
    Ok(WorkDecomposition {
        prefill_tasks: decompose_prefill(batch, config, gpu),
        decode_tasks: decompose_decode(batch, config),
        config: *config,
        prefill_splits: prefill_split_count(batch, config, gpu),
    })
}

pub fn decompose_hybrid(
    batch: &HybridBatchSpec,
    gpu: &GpuSpec,
) -> Result<WorkDecomposition, DecompError> {
    batch.validate()?;
    decompose_with(batch, &select_tile_config(batch, gpu), gpu)
}
