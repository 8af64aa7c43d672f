use serde::{Deserialize, Serialize};

use super::SimError;
use crate::decomp::{CtaTask, Op};

/// The simulated machine.
///
/// Units are abstract but consistent: compute is measured in flop-units (one
/// multiply-accumulate over a head-dim vector), memory in elements, time in
/// microseconds for the A100-like defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpuSpec {
    pub num_sms: usize,
    pub compute_rate_per_sm: f64,
    pub mem_bandwidth_total: f64,
    pub max_ctas_per_sm: usize,
    pub shared_mem_per_sm: usize,
    /// Fraction of an SM's compute a single CTA can drive on its own, for a
    /// CTA sized at `shared_mem_per_sm / max_ctas_per_sm`; larger CTAs scale up.
    pub cta_compute_share: f64,
    /// A CTA of the same reference size draws at most this multiple of
    /// `mem_bandwidth_total / num_sms`.
    pub cta_bandwidth_fraction: f64,
    /// Synchronization cost paid at each barrier of an intra-thread fused CTA.
    pub barrier_latency: f64,
}

impl Default for GpuSpec {
    fn default() -> Self {
        Self::a100_like()
    }
}

impl GpuSpec {
    pub fn a100_like() -> Self {
        Self {
            num_sms: 108,
            compute_rate_per_sm: 10_000.0,
            mem_bandwidth_total: 1.0e6,
            max_ctas_per_sm: 4,
            shared_mem_per_sm: 164 * 1024,
            cta_compute_share: 0.6,
            cta_bandwidth_fraction: 2.0,
            barrier_latency: 0.5,
        }
    }

    pub fn with_max_ctas(mut self, n: usize) -> Self {
        self.max_ctas_per_sm = n;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("compute_rate_per_sm", self.compute_rate_per_sm),
            ("mem_bandwidth_total", self.mem_bandwidth_total),
            ("cta_compute_share", self.cta_compute_share),
            ("cta_bandwidth_fraction", self.cta_bandwidth_fraction),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(SimError::Config(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if self.num_sms == 0 || self.max_ctas_per_sm == 0 || self.shared_mem_per_sm == 0 {
            return Err(SimError::Config(
                "num_sms, max_ctas_per_sm and shared_mem_per_sm must be >= 1".into(),
            ));
        }
        if self.barrier_latency < 0.0 {
            return Err(SimError::Config("barrier_latency must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_compute_rate(&self) -> f64 {
        self.compute_rate_per_sm * self.num_sms as f64
    }

    /// Compute ceiling for a unit carrying `weight` of a full CTA's warps.
    pub fn unit_compute_cap(&self, weight: f64) -> f64 {
        weight * self.cta_compute_share * self.compute_rate_per_sm
    }

    /// Bandwidth ceiling for a unit carrying `weight` of a full CTA's warps.
    pub fn unit_bandwidth_cap(&self, weight: f64) -> f64 {
        weight * self.cta_bandwidth_fraction * self.mem_bandwidth_total / self.num_sms as f64
    }

    /// Warp capacity of a CTA relative to one sized for full residency,
    /// measured by its shared-memory footprint.
    pub fn cta_size_factor(&self, shared_mem_per_cta: usize) -> f64 {
        if shared_mem_per_cta == 0 {
            1.0
        } else {
            shared_mem_per_cta as f64 * self.max_ctas_per_sm as f64 / self.shared_mem_per_sm as f64
        }
    }

    /// Uncontended runtime of one full-residency-sized task alone on the machine.
    pub fn standalone_time(&self, task: &CtaTask) -> f64 {
        let c = task.compute_work / self.unit_compute_cap(1.0);
        let m = task.memory_work / self.unit_bandwidth_cap(1.0);
        c.max(m)
    }
}

/// One kernel: tasks in submission order plus its per-CTA shared memory.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLaunch {
    pub tasks: Vec<CtaTask>,
    pub shared_mem_per_cta: usize,
    pub stream_id: usize,
}

impl KernelLaunch {
    pub fn new(tasks: Vec<CtaTask>, shared_mem_per_cta: usize, stream_id: usize) -> Self {
        Self {
            tasks,
            shared_mem_per_cta,
            stream_id,
        }
    }

    pub fn total_compute(&self) -> f64 {
        self.tasks.iter().map(|t| t.compute_work).sum()
    }

    pub fn total_memory(&self) -> f64 {
        self.tasks.iter().map(|t| t.memory_work).sum()
    }

    /// Op of the first task, if any; launches are expected to be homogeneous.
    pub fn op(&self) -> Option<Op> {
        self.tasks.first().map(|t| t.op)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SmAwarePolicy {
    FiftyFifty,
    Proportional,
}

/// How the launches of one hybrid batch share the machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecutionStrategy {
    /// One kernel after another.
    Serial,
    /// Each launch on its own stream; free slots go round-robin across streams.
    StreamsParallel,
    /// One fused grid: every prefill CTA, then every decode CTA.
    CtaParallel,
    /// One prefill and one decode task share a CTA, each with half its warps.
    WarpParallel,
    /// A prefill/decode pair interleaved inside each thread with barriers
    /// splitting both into `segments` slices.
    IntraThread { segments: usize },
    /// Fused grid whose CTAs pick prefill or decode after landing on an SM.
    SmAware { policy: SmAwarePolicy },
}

impl ExecutionStrategy {
    pub const DEFAULT_SEGMENTS: usize = 16;

    pub fn name(&self) -> &'static str {
        match self {
            Self::Serial => "serial",
            Self::StreamsParallel => "streams",
            Self::CtaParallel => "cta_parallel",
            Self::WarpParallel => "warp_parallel",
            Self::IntraThread { .. } => "intra_thread",
            Self::SmAware { .. } => "sm_aware",
        }
    }

    pub fn policy_name(&self) -> String {
        match self {
            Self::SmAware {
                policy: SmAwarePolicy::FiftyFifty,
            } => "50:50".into(),
            Self::SmAware {
                policy: SmAwarePolicy::Proportional,
            } => "proportional".into(),
            Self::IntraThread { segments } => format!("segments={segments}"),
            _ => "-".into(),
        }
    }

    /// Parses `serial`, `streams`, `cta_parallel`, `warp_parallel`,
    /// `intra_thread[:N]`, `sm_aware[:50:50|:proportional]`.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let text = text.trim();
        let (head, arg) = match text.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (text, None),
        };
        let strategy = match (head, arg) {
            ("serial", None) => Self::Serial,
            ("streams", None) => Self::StreamsParallel,
            ("cta_parallel", None) => Self::CtaParallel,
            ("warp_parallel", None) => Self::WarpParallel,
            ("intra_thread", None) => Self::IntraThread {
                segments: Self::DEFAULT_SEGMENTS,
            },
            ("intra_thread", Some(n)) => Self::IntraThread {
                segments: n.parse().ok().filter(|&s| s >= 1).ok_or_else(|| {
                    SimError::Config(format!(
                        "intra_thread segments must be a positive integer, got {n:?}"
                    ))
                })?,
            },
            ("sm_aware", None) | ("sm_aware", Some("proportional")) => Self::SmAware {
                policy: SmAwarePolicy::Proportional,
            },
            ("sm_aware", Some("50:50")) | ("sm_aware", Some("fifty_fifty")) => Self::SmAware {
                policy: SmAwarePolicy::FiftyFifty,
            },
            _ => return Err(SimError::Config(format!("unknown strategy {text:?}"))),
        };
        Ok(strategy)
    }
}

impl std::fmt::Display for ExecutionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::IntraThread { segments } => write!(f, "intra_thread:{segments}"),
            Self::SmAware {
                policy: SmAwarePolicy::FiftyFifty,
            } => write!(f, "sm_aware:50:50"),
            Self::SmAware {
                policy: SmAwarePolicy::Proportional,
            } => write!(f, "sm_aware:proportional"),
            other => f.write_str(other.name()),
        }
    }
}

/// Per-SM record of the resident op mix after each change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Colocation {
    pub time: f64,
    pub prefill: usize,
    pub decode: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceEvent {
    Dispatch,
    Complete,
}

/// One line of the event trace dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub sm: usize,
    pub event: TraceEvent,
    pub task_id: usize,
    pub op: Op,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        let event = match self.event {
            TraceEvent::Dispatch => "dispatch",
            TraceEvent::Complete => "complete",
        };
        format!(
            "{} {} {} {} {}",
            self.time,
            self.sm,
            event,
            self.task_id,
            self.op.name()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub makespan: f64,
    pub prefill_finish: Option<f64>,
    pub decode_finish: Option<f64>,
    pub compute_utilization: f64,
    pub bandwidth_utilization: f64,
    pub waves_used: usize,
    pub quantized_ctas: usize,
    pub colocation: Vec<Vec<Colocation>>,
    /// Resident mix of each SM right after its second CTA assignment.
    pub second_assignment: Vec<Option<Colocation>>,
    pub trace: Vec<TraceRecord>,
    /// Work drained over the run, integrated from the fluid rates.
    pub drained_compute: f64,
    pub drained_memory: f64,
}

impl SimResult {
    pub fn finish_of(&self, op: Op) -> Option<f64> {
        match op {
            Op::Prefill => self.prefill_finish,
            Op::Decode => self.decode_finish,
        }
    }
}
