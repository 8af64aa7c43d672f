//! Request-level serving simulator: iteration scheduling over a trace, with
//! attention costs taken from the GPU simulator.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::attention::ModelShape;
use crate::decomp::{DecodeRequest, HybridBatchSpec, PrefillChunk};
use crate::experiment::{best_sm_aware, run_batch, ExperimentError};
use crate::gpu::{ExecutionStrategy, GpuSpec};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ServingError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error("percentile of an empty sample or p outside [0, 100]")]
    Percentile,
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub arrival_time: f64,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerPolicy {
    /// Whole prompts run alone as soon as they are queued; decodes wait.
    PrefillPrioritized { max_batch: usize },
    /// One chunk of the head-of-line prompt rides along with every active decode.
    ChunkedHybrid {
        chunk_size: usize,
        max_batch: usize,
        token_budget: usize,
    },
}

impl SchedulerPolicy {
    pub fn chunked(chunk_size: usize, max_batch: usize) -> Self {
        Self::ChunkedHybrid {
            chunk_size,
            max_batch,
            token_budget: chunk_size + max_batch,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PrefillPrioritized { .. } => "prefill_prioritized",
            Self::ChunkedHybrid { .. } => "chunked_hybrid",
        }
    }

    pub fn chunk_size(&self) -> Option<usize> {
        match *self {
            Self::PrefillPrioritized { .. } => None,
            Self::ChunkedHybrid { chunk_size, .. } => Some(chunk_size),
        }
    }

    pub fn max_batch(&self) -> usize {
        match *self {
            Self::PrefillPrioritized { max_batch } | Self::ChunkedHybrid { max_batch, .. } => {
                max_batch
            }
        }
    }

    pub fn validate(&self) -> Result<(), ServingError> {
        if self.max_batch() == 0 {
            return Err(ServingError::InvalidPolicy("max_batch must be >= 1".into()));
        }
        if let Self::ChunkedHybrid {
            chunk_size,
            token_budget,
            ..
        } = *self
        {
            if chunk_size == 0 {
                return Err(ServingError::InvalidPolicy(
                    "chunk_size must be >= 1".into(),
                ));
            }
            if token_budget < chunk_size {
                return Err(ServingError::InvalidPolicy(format!(
                    "token_budget {token_budget} is below chunk_size {chunk_size}"
                )));
            }
        }
        Ok(())
    }
}

/// Poisson arrivals with shifted-exponential context lengths and a uniform
/// prefill:decode ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    /// Arrival rate per time unit; infinite puts every arrival at 0.
    pub qps: f64,
    pub num_requests: usize,
    pub min_context: usize,
    pub mean_context: usize,
    /// Draws above this are redrawn.
    pub max_context: usize,
    pub min_pd_ratio: f64,
    pub max_pd_ratio: f64,
}

impl TraceSpec {
    pub fn validate(&self) -> Result<(), ServingError> {
        let bad = |m: &str| Err(ServingError::InvalidTrace(m.into()));
        if !(self.qps > 0.0) {
            return bad("qps must be positive");
        }
        if self.num_requests == 0 {
            return bad("num_requests must be >= 1");
        }
        if !(2 <= self.min_context
            && self.min_context < self.mean_context
            && self.mean_context < self.max_context)
        {
            return bad("need 2 <= min_context < mean_context < max_context");
        }
        if !(0.0 < self.min_pd_ratio
            && self.min_pd_ratio <= self.max_pd_ratio
            && self.max_pd_ratio.is_finite())
        {
            return bad("need 0 < min_pd_ratio <= max_pd_ratio");
        }
        Ok(())
    }
}

pub fn generate_trace(spec: &TraceSpec, seed: u64) -> Result<Vec<Request>, ServingError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(spec.qps).map_err(|e| ServingError::InvalidTrace(e.to_string()))?;
    let tail = Exp::new(1.0 / (spec.mean_context - spec.min_context) as f64)
        .map_err(|e| ServingError::InvalidTrace(e.to_string()))?;
    let mut now = 0.0;
    let mut out = Vec::with_capacity(spec.num_requests);
    for i in 0..spec.num_requests {
        if i > 0 && spec.qps.is_finite() {
            now += gap.sample(&mut rng);
        }
        let context = loop {
            let c = spec.min_context as f64 + tail.sample(&mut rng);
            if c <= spec.max_context as f64 {
                break c.round() as usize;
            }
        };
        let ratio = rng.random_range(spec.min_pd_ratio..=spec.max_pd_ratio);
        let decode = ((context as f64 / (1.0 + ratio)).round() as usize).clamp(1, context - 1);
        out.push(Request {
            arrival_time: now,
            prefill_tokens: context - decode,
            decode_tokens: decode,
        });
    }
    Ok(out)
}

/// `n` identical requests arriving together at time 0.
pub fn uniform_offline_trace(
    n: usize,
    prefill_tokens: usize,
    decode_tokens: usize,
) -> Vec<Request> {
    vec![
        Request {
            arrival_time: 0.0,
            prefill_tokens,
            decode_tokens
        };
        n
    ]
}

/// Constants of the per-iteration cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Per-iteration cost of the non-attention layers, in GPU time units.
    pub linear_fixed: f64,
    /// Added per token in the batch, in GPU time units.
    pub linear_per_token: f64,
    /// A decode-only batch of this many requests at `reference_context`
    /// costs `reference_iteration_time`; every cost is scaled accordingly.
    pub reference_decode_batch: usize,
    pub reference_context: usize,
    pub reference_iteration_time: f64,
    /// Context lengths are rounded up to a multiple of this before costing.
    pub context_bucket: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            linear_fixed: 180.0,
            linear_per_token: 1.12,
            reference_decode_batch: 64,
            reference_context: 8192,
            reference_iteration_time: 50.0,
            context_bucket: 256,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<(), ServingError> {
        if !(self.linear_fixed >= 0.0 && self.linear_per_token >= 0.0) {
            return Err(ServingError::InvalidCost(
                "linear weights must be >= 0".into(),
            ));
        }
        if self.reference_decode_batch == 0
            || self.reference_context == 0
            || self.context_bucket == 0
        {
            return Err(ServingError::InvalidCost(
                "reference batch, context and bucket must be >= 1".into(),
            ));
        }
        if !(self.reference_iteration_time > 0.0) {
            return Err(ServingError::InvalidCost(
                "reference_iteration_time must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Bucketed batch shape: decodes are costed as `n` requests at their mean context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct BatchKey {
    chunk: usize,
    chunk_context: usize,
    decodes: usize,
    decode_context: usize,
}

/// Memoized per-iteration cost in scaled time units. Safe to share across threads.
#[derive(Debug)]
pub struct CostModel {
    pub gpu: GpuSpec,
    pub shape: ModelShape,
    pub config: CostConfig,
    time_scale: f64,
    cache: Mutex<HashMap<(BatchKey, bool), f64>>,
}

impl CostModel {
    pub fn new(gpu: GpuSpec, shape: ModelShape, config: CostConfig) -> Result<Self, ServingError> {
        config.validate()?;
        gpu.validate().map_err(ExperimentError::from)?;
        let mut model = Self {
            gpu,
            shape,
            config,
            time_scale: 1.0,
            cache: Mutex::new(HashMap::new()),
        };
        let reference = HybridBatchSpec {
            prefill: None,
            decodes: vec![
                DecodeRequest {
                    context_len: config.reference_context
                };
                config.reference_decode_batch
            ],
            shape,
        };
        let raw = model.raw_cost(&reference, false)?;
        model.time_scale = config.reference_iteration_time / raw;
        model.cache.lock().expect("cache lock").clear();
        Ok(model)
    }

    fn key(&self, batch: &HybridBatchSpec) -> BatchKey {
        let bucket = self.config.context_bucket;
        let up = |c: usize| c.div_ceil(bucket) * bucket;
        let n = batch.decodes.len();
        let mean = if n == 0 {
            0
        } else {
            batch
                .decodes
                .iter()
                .map(|d| d.context_len)
                .sum::<usize>()
                .div_ceil(n)
        };
        let (chunk, chunk_context) = batch
            .prefill
            .map_or((0, 0), |p| (p.chunk_size, up(p.context_len)));
        BatchKey {
            chunk,
            chunk_context,
            decodes: n,
            decode_context: up(mean),
        }
    }

    fn representative(&self, key: BatchKey) -> HybridBatchSpec {
        HybridBatchSpec {
            prefill: (key.chunk > 0).then(|| PrefillChunk {
                chunk_size: key.chunk,
                context_len: key.chunk_context,
                position_offset: key.chunk_context - key.chunk,
            }),
            decodes: vec![
                DecodeRequest {
                    context_len: key.decode_context
                };
                key.decodes
            ],
            shape: self.shape,
        }
    }

    /// Attention makespan of the bucketed batch, unscaled.
    pub fn attention_time(
        &self,
        batch: &HybridBatchSpec,
        fused: bool,
    ) -> Result<f64, ServingError> {
        let key = self.key(batch);
        if let Some(&t) = self.cache.lock().expect("cache lock").get(&(key, fused)) {
            return Ok(t);
        }
        let rep = self.representative(key);
        let serial = run_batch(&rep, &self.gpu, ExecutionStrategy::Serial, 0)?
            .result
            .makespan;
        // Decode-only and prefill-only batches have nothing to overlap.
        let time = if fused && rep.prefill.is_some() && !rep.decodes.is_empty() {
            best_sm_aware(&rep, &self.gpu, 0)?
                .result
                .makespan
                .min(serial)
        } else {
            serial
        };
        self.cache
            .lock()
            .expect("cache lock")
            .insert((key, fused), time);
        Ok(time)
    }

    pub fn linear_time(&self, batch: &HybridBatchSpec) -> f64 {
        self.config.linear_fixed + self.config.linear_per_token * batch.total_tokens() as f64
    }

    fn raw_cost(&self, batch: &HybridBatchSpec, fused: bool) -> Result<f64, ServingError> {
        Ok(self.linear_time(batch) + self.attention_time(batch, fused)?)
    }

    /// Cost of one iteration in scaled time units.
    pub fn iteration_cost(
        &self,
        batch: &HybridBatchSpec,
        fused: bool,
    ) -> Result<f64, ServingError> {
        if batch.prefill.is_none() && batch.decodes.is_empty() {
            return Err(ServingError::InvalidTrace(
                "iteration batch is empty".into(),
            ));
        }
        Ok(self.raw_cost(batch, fused)? * self.time_scale)
    }

    /// Scaled time units per GPU time unit.
    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenProgress {
    pub request: usize,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t_start: f64,
    pub t_end: f64,
    pub batch: HybridBatchSpec,
    pub progress: Vec<TokenProgress>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StallFraction {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub ttft_p50: f64,
    pub ttft_p99: f64,
    pub tbt_p50: f64,
    pub tbt_p99: f64,
    pub latency_p50: f64,
    pub latency_p99: f64,
    /// Fraction of requests with at least one gap above each threshold.
    pub stalls: Vec<StallFraction>,
    /// Completed requests per time unit over the span of the run.
    pub throughput: f64,
}

impl Metrics {
    pub fn stall_at(&self, threshold: f64) -> Option<f64> {
        self.stalls
            .iter()
            .find(|s| s.threshold == threshold)
            .map(|s| s.fraction)
    }
}

pub const DEFAULT_STALL_THRESHOLDS: [f64; 2] = [200.0, 500.0];

/// Nearest-rank percentile: the value at 1-based rank `ceil(p / 100 * n)`.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, ServingError> {
    if samples.is_empty() || !(0.0..=100.0).contains(&p) {
        return Err(ServingError::Percentile);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0 * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServingOptions {
    pub fused: bool,
    pub record_iterations: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServingRun {
    pub metrics: Metrics,
    pub iterations: Vec<IterationRecord>,
    pub iteration_count: usize,
}

#[derive(Debug, Clone, Default)]
struct RequestState {
    prefilled: usize,
    decoded: usize,
    first_token: Option<f64>,
    last_token: f64,
    completion: Option<f64>,
    gaps: Vec<f64>,
}

pub fn run_serving(
    trace: &[Request],
    policy: SchedulerPolicy,
    cost: &CostModel,
    options: ServingOptions,
    stall_thresholds: &[f64],
) -> Result<ServingRun, ServingError> {
    if trace.is_empty() {
        return Err(ServingError::EmptyTrace);
    }
    policy.validate()?;
    if trace
        .windows(2)
        .any(|w| w[1].arrival_time < w[0].arrival_time)
    {
        return Err(ServingError::InvalidTrace("arrivals must be sorted".into()));
    }
    if trace
        .iter()
        .any(|r| r.prefill_tokens == 0 || r.decode_tokens == 0 || !r.arrival_time.is_finite())
    {
        return Err(ServingError::InvalidTrace(
            "requests need >= 1 prefill and decode token".into(),
        ));
    }
    let mut state = vec![RequestState::default(); trace.len()];
    let mut waiting: VecDeque<usize> = VecDeque::new();
    let mut decoding: Vec<usize> = Vec::new();
    let mut next = 0;
    let mut now = trace[0].arrival_time;
    let mut iterations = Vec::new();
    let mut iteration_count = 0;
    let shape = cost.shape;

    loop {
        while next < trace.len() && trace[next].arrival_time <= now {
            waiting.push_back(next);
            next += 1;
        }
        if waiting.is_empty() && decoding.is_empty() {
            if next == trace.len() {
                break;
            }
            now = trace[next].arrival_time;
            continue;
        }
        let admit = decoding.len() < policy.max_batch();
        let (chunk, decodes): (Option<(usize, usize)>, &[usize]) = match policy {
            SchedulerPolicy::PrefillPrioritized { .. } => match waiting.front() {
                Some(&r) if admit => (Some((r, trace[r].prefill_tokens)), &[]),
                _ => (None, &decoding),
            },
            SchedulerPolicy::ChunkedHybrid {
                chunk_size,
                token_budget,
                ..
            } => {
                let take = waiting.front().filter(|_| admit).map(|&r| {
                    let left = trace[r].prefill_tokens - state[r].prefilled;
                    (
                        r,
                        chunk_size
                            .min(left)
                            .min(token_budget.saturating_sub(decoding.len())),
                    )
                });
                (take.filter(|&(_, n)| n > 0), &decoding)
            }
        };
        if chunk.is_none() && decodes.is_empty() {
            // Nothing runnable until the budget frees up; cannot happen with budget >= chunk >= 1.
            return Err(ServingError::InvalidPolicy(
                "scheduler produced an empty iteration".into(),
            ));
        }
        let batch = HybridBatchSpec {
            prefill: chunk.map(|(r, n)| PrefillChunk {
                chunk_size: n,
                context_len: state[r].prefilled + n,
                position_offset: state[r].prefilled,
            }),
            decodes: decodes
                .iter()
                .map(|&r| DecodeRequest {
                    context_len: trace[r].prefill_tokens + state[r].decoded,
                })
                .collect(),
            shape,
        };
        let t_end = now + cost.iteration_cost(&batch, options.fused)?;
        let mut progress = Vec::new();
        let mut finished = Vec::new();
        for &r in decodes {
            let s = &mut state[r];
            s.decoded += 1;
            s.gaps.push(t_end - s.last_token);
            s.last_token = t_end;
            if s.decoded == trace[r].decode_tokens {
                s.completion = Some(t_end);
                finished.push(r);
            }
            if options.record_iterations {
                progress.push(TokenProgress {
                    request: r,
                    prefill_tokens: 0,
                    decode_tokens: 1,
                });
            }
        }
        decoding.retain(|r| !finished.contains(r));
        if let Some((r, n)) = chunk {
            let s = &mut state[r];
            s.prefilled += n;
            if s.prefilled == trace[r].prefill_tokens {
                s.first_token = Some(t_end);
                s.last_token = t_end;
                waiting.pop_front();
                decoding.push(r);
            }
            if options.record_iterations {
                progress.push(TokenProgress {
                    request: r,
                    prefill_tokens: n,
                    decode_tokens: 0,
                });
            }
        }
        if options.record_iterations {
            iterations.push(IterationRecord {
                t_start: now,
                t_end,
                batch,
                progress,
            });
        }
        iteration_count += 1;
        now = t_end;
    }

    let metrics = summarize(trace, &state, stall_thresholds)?;
    Ok(ServingRun {
        metrics,
        iterations,
        iteration_count,
    })
}

fn summarize(
    trace: &[Request],
    state: &[RequestState],
    thresholds: &[f64],
) -> Result<Metrics, ServingError> {
    let ttft: Vec<f64> = trace
        .iter()
        .zip(state)
        .map(|(r, s)| s.first_token.expect("every request prefilled") - r.arrival_time)
        .collect();
    let latency: Vec<f64> = trace
        .iter()
        .zip(state)
        .map(|(r, s)| s.completion.expect("every request finished") - r.arrival_time)
        .collect();
    let gaps: Vec<f64> = state.iter().flat_map(|s| s.gaps.iter().copied()).collect();
    let stalls = thresholds
        .iter()
        .map(|&threshold| StallFraction {
            threshold,
            fraction: state
                .iter()
                .filter(|s| s.gaps.iter().any(|&g| g > threshold))
                .count() as f64
                / state.len() as f64,
        })
        .collect();
    let start = trace[0].arrival_time;
    let end = state
        .iter()
        .filter_map(|s| s.completion)
        .fold(start, f64::max);
    Ok(Metrics {
        ttft_p50: percentile(&ttft, 50.0)?,
        ttft_p99: percentile(&ttft, 99.0)?,
        tbt_p50: percentile(&gaps, 50.0)?,
        tbt_p99: percentile(&gaps, 99.0)?,
        latency_p50: percentile(&latency, 50.0)?,
        latency_p99: percentile(&latency, 99.0)?,
        stalls,
        throughput: trace.len() as f64 / (end - start),
    })
}
