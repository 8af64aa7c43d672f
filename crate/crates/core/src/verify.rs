//! Randomized agreement suites for the attention kernels.

use itertools::Itertools;
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    decode_attention_splitk, max_relative_error, merge_partials, naive_prefill_attention,
    tiled_prefill_attention, AttentionError, DecodeQuery, KvCache, ModelShape, QueryChunk, Result,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub oracle_instances: usize,
    pub max_chunk: usize,
    pub max_context: usize,
    pub head_dims: Vec<usize>,
    pub tiles: Vec<usize>,
    pub split_instances: usize,
    pub max_splits: usize,
    pub causality_instances: usize,
    pub tolerance: f64,
    /// Lets every query row see one key past its position; the causality suite must catch it.
    pub inject_mask_off_by_one: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            oracle_instances: 1000,
            max_chunk: 64,
            max_context: 2048,
            head_dims: vec![4, 8, 64],
            tiles: vec![1, 8, 16, 64, 128],
            split_instances: 200,
            max_splits: 8,
            causality_instances: 200,
            tolerance: 1e-10,
            inject_mask_off_by_one: false,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AttentionError::Domain(m.into()));
        if self.max_chunk == 0 || self.max_context == 0 || self.max_splits == 0 {
            return bad("max_chunk, max_context and max_splits must be >= 1");
        }
        if self.head_dims.is_empty() || self.head_dims.contains(&0) {
            return bad("head_dims must be nonempty and positive");
        }
        if self.tiles.is_empty() || self.tiles.contains(&0) {
            return bad("tiles must be nonempty and positive");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest error seen; for the causality suite, the largest leaked change.
    pub worst: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Relative-error floor for near-zero expected outputs.
const ERROR_FLOOR: f64 = 1e-3;

const SHAPES: [(usize, usize); 4] = [(1, 1), (2, 1), (4, 2), (4, 4)];

fn tensor(rng: &mut ChaCha8Rng, a: usize, b: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_fn((a, b, c), |_| rng.random_range(-1.0..1.0))
}

fn random_shape(rng: &mut ChaCha8Rng, head_dims: &[usize]) -> ModelShape {
    let (q, kv) = SHAPES[rng.random_range(0..SHAPES.len())];
    let d = head_dims[rng.random_range(0..head_dims.len())];
    ModelShape::with_default_scale(q, kv, d).expect("table shapes are valid")
}

fn prefill_instance(
    rng: &mut ChaCha8Rng,
    shape: &ModelShape,
    chunk: usize,
    context: usize,
    cache_len: usize,
) -> (QueryChunk<f64>, KvCache<f64>) {
    let q = tensor(rng, chunk, shape.num_q_heads, shape.head_dim);
    let k = tensor(rng, cache_len, shape.num_kv_heads, shape.head_dim);
    let v = tensor(rng, cache_len, shape.num_kv_heads, shape.head_dim);
    let cache = KvCache::new(k, v).expect("matching dims");
    (
        QueryChunk {
            q,
            position_offset: context - chunk,
        },
        cache,
    )
}

fn kernel(
    chunk: &QueryChunk<f64>,
    cache: &KvCache<f64>,
    shape: &ModelShape,
    tq: usize,
    tk: usize,
    fault: bool,
) -> Result<Array3<f64>> {
    if fault {
        let shifted = QueryChunk {
            q: chunk.q.clone(),
            position_offset: chunk.position_offset + 1,
        };
        tiled_prefill_attention(&shifted, cache, shape, tq, tk)
    } else {
        tiled_prefill_attention(chunk, cache, shape, tq, tk)
    }
}

/// Tiled prefill against the dense oracle over random sizes and tilings.
pub fn oracle_suite(cfg: &VerifyConfig, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        name: "oracle",
        cases: cfg.oracle_instances,
        failures: 0,
        worst: 0.0,
    };
    for _ in 0..cfg.oracle_instances {
        let shape = random_shape(&mut rng, &cfg.head_dims);
        let context = rng.random_range(1..=cfg.max_context);
        let chunk = rng.random_range(1..=cfg.max_chunk.min(context));
        let tq = cfg.tiles[rng.random_range(0..cfg.tiles.len())];
        let tk = cfg.tiles[rng.random_range(0..cfg.tiles.len())];
        let (q, cache) = prefill_instance(&mut rng, &shape, chunk, context, context);
        let naive = naive_prefill_attention(&q, &cache, &shape)?;
        let tiled = tiled_prefill_attention(&q, &cache, &shape, tq, tk)?;
        let err = max_relative_error(tiled.iter(), naive.iter(), ERROR_FLOOR);
        report.worst = report.worst.max(err);
        report.failures += usize::from(!(err <= cfg.tolerance));
    }
    Ok(report)
}

/// Split decode merged for every split count agrees pairwise, and merging is
/// order-independent.
pub fn split_suite(cfg: &VerifyConfig, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        name: "split",
        cases: cfg.split_instances,
        failures: 0,
        worst: 0.0,
    };
    for _ in 0..cfg.split_instances {
        let shape = random_shape(&mut rng, &cfg.head_dims);
        let n = rng.random_range(1..=cfg.max_context);
        let q = DecodeQuery {
            q: Array2::from_shape_fn((shape.num_q_heads, shape.head_dim), |_| {
                rng.random_range(-1.0..1.0)
            }),
        };
        let k = tensor(&mut rng, n, shape.num_kv_heads, shape.head_dim);
        let v = tensor(&mut rng, n, shape.num_kv_heads, shape.head_dim);
        let cache = KvCache::new(k, v)?;
        let merged: Vec<Array2<f64>> = (1..=cfg.max_splits)
            .map(|s| merge_partials(&decode_attention_splitk(&q, &cache, &shape, s)?.partials))
            .collect::<Result<_>>()?;
        let mut ok = true;
        for a in &merged {
            for b in &merged {
                let err = max_relative_error(a.iter(), b.iter(), ERROR_FLOOR);
                report.worst = report.worst.max(err);
                ok &= err <= cfg.tolerance;
            }
        }
        let parts = decode_attention_splitk(&q, &cache, &shape, rng.random_range(1..=4))?.partials;
        let reference = merge_partials(&parts)?;
        for order in (0..parts.len()).permutations(parts.len()) {
            let shuffled: Vec<_> = order.iter().map(|&i| parts[i].clone()).collect();
            ok &= merge_partials(&shuffled)? == reference;
        }
        report.failures += usize::from(!ok);
    }
    Ok(report)
}

/// Overwriting keys after a query's position must not change that query's output.
pub fn causality_suite(cfg: &VerifyConfig, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        name: "causality",
        cases: cfg.causality_instances,
        failures: 0,
        worst: 0.0,
    };
    let max_context = cfg.max_context.min(256);
    for _ in 0..cfg.causality_instances {
        let shape = random_shape(&mut rng, &cfg.head_dims);
        let context = rng.random_range(1..=max_context);
        let chunk = rng.random_range(1..=cfg.max_chunk.min(context).min(16));
        let tq = cfg.tiles[rng.random_range(0..cfg.tiles.len())];
        let tk = cfg.tiles[rng.random_range(0..cfg.tiles.len())];
        // One spare future key so a shifted mask has something to leak.
        let (q, cache) = prefill_instance(&mut rng, &shape, chunk, context, context + 1);
        let row = rng.random_range(0..chunk);
        let base = kernel(&q, &cache, &shape, tq, tk, cfg.inject_mask_off_by_one)?;
        let mut perturbed = cache.clone();
        for p in (q.position_offset + row + 1)..perturbed.context_len() {
            perturbed.k.index_axis_mut(Axis(0), p).fill(3.0);
            perturbed.v.index_axis_mut(Axis(0), p).fill(-3.0);
        }
        let after = kernel(&q, &perturbed, &shape, tq, tk, cfg.inject_mask_off_by_one)?;
        let leak = base
            .index_axis(Axis(0), row)
            .iter()
            .zip(after.index_axis(Axis(0), row))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        report.worst = report.worst.max(leak);
        report.failures += usize::from(leak != 0.0);
    }
    Ok(report)
}

pub fn run_all(cfg: &VerifyConfig, seed: u64) -> Result<Vec<SuiteReport>> {
    cfg.validate()?;
    Ok(vec![
        oracle_suite(cfg, seed)?,
        split_suite(cfg, seed.wrapping_add(1))?,
        causality_suite(cfg, seed.wrapping_add(2))?,
    ])
}
