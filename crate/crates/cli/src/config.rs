//! Experiment configuration file. Every table and key is optional; unknown
//! keys are rejected. See `docs/config-schema.md` for the full schema.

use std::path::Path;

use anyhow::Context;
use hybridsim_core::gpu::ExecutionStrategy;
use hybridsim_core::serving::{CostConfig, TraceSpec};
use hybridsim_core::verify::VerifyConfig;
use hybridsim_core::{GpuSpec, ModelShape, SchedulerPolicy};
use serde::{Deserialize, Serialize};

/// An invalid or unreadable configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    /// Worker threads for independent runs; 0 lets the pool decide.
    pub threads: usize,
    pub gpu: GpuSpec,
    pub shape: ShapeConfig,
    pub kernel: KernelConfig,
    pub microbench: MicrobenchConfig,
    pub serving: ServingConfig,
    pub sweep: SweepConfig,
    pub verify: VerifyConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            gpu: GpuSpec::a100_like(),
            shape: ShapeConfig::default(),
            kernel: KernelConfig::default(),
            microbench: MicrobenchConfig::default(),
            serving: ServingConfig::default(),
            sweep: SweepConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeConfig {
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    /// Divisor of raw dot products; `sqrt(head_dim)` when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            num_q_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            scale: None,
        }
    }
}

impl ShapeConfig {
    pub fn to_shape(&self) -> anyhow::Result<ModelShape> {
        let scale = self.scale.unwrap_or((self.head_dim as f64).sqrt());
        ModelShape::new(self.num_q_heads, self.num_kv_heads, self.head_dim, scale)
            .map_err(|e| invalid(format!("shape: {e}")))
    }
}

/// Per-chunk kernel comparison: a long prompt prefilled chunk by chunk next
/// to a fixed set of decodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub prompt_len: usize,
    pub chunk_size: usize,
    pub num_decodes: usize,
    pub decode_context: usize,
    pub strategies: Vec<String>,
    pub randomize_ties: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            prompt_len: 16384,
            chunk_size: 512,
            num_decodes: 16,
            decode_context: 16384,
            strategies: [
                "serial",
                "streams",
                "cta_parallel",
                "warp_parallel",
                "intra_thread",
                "sm_aware:50:50",
                "sm_aware:proportional",
                BEST_SM_AWARE,
            ]
            .map(String::from)
            .to_vec(),
            randomize_ties: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicrobenchConfig {
    pub compute_iters: Vec<usize>,
    /// Elements per array touched by each memory-kernel CTA.
    pub array_len: usize,
    pub strategies: Vec<String>,
}

impl Default for MicrobenchConfig {
    fn default() -> Self {
        Self {
            compute_iters: vec![10, 25, 50, 75, 100, 150, 200, 400],
            array_len: 1 << 16,
            strategies: [
                "serial",
                "streams",
                "cta_parallel",
                "intra_thread",
                "sm_aware:50:50",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    PrefillPrioritized,
    ChunkedHybrid,
}

/// Trace parameters other than the arrival rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub num_requests: usize,
    pub min_context: usize,
    pub mean_context: usize,
    pub max_context: usize,
    pub min_pd_ratio: f64,
    pub max_pd_ratio: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            num_requests: 512,
            min_context: 4096,
            mean_context: 9500,
            max_context: 32768,
            min_pd_ratio: 1.0,
            max_pd_ratio: 50.0,
        }
    }
}

impl WorkloadConfig {
    pub fn at_qps(&self, qps: f64) -> TraceSpec {
        TraceSpec {
            qps,
            num_requests: self.num_requests,
            min_context: self.min_context,
            mean_context: self.mean_context,
            max_context: self.max_context,
            min_pd_ratio: self.min_pd_ratio,
            max_pd_ratio: self.max_pd_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServingConfig {
    pub qps: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub chunk_size: usize,
    pub max_batch: usize,
    /// Token cap per hybrid iteration; `chunk_size + max_batch` when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_budget: Option<usize>,
    /// Attention cost variants to run for the chunked policy.
    pub fused: Vec<bool>,
    pub workload: WorkloadConfig,
    pub cost: CostConfig,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            qps: vec![0.0009],
            policies: vec![PolicyKind::PrefillPrioritized, PolicyKind::ChunkedHybrid],
            chunk_size: 512,
            max_batch: 256,
            token_budget: None,
            fused: vec![false, true],
            workload: WorkloadConfig::default(),
            cost: CostConfig::default(),
        }
    }
}

impl ServingConfig {
    pub fn policy(&self, kind: PolicyKind) -> SchedulerPolicy {
        match kind {
            PolicyKind::PrefillPrioritized => SchedulerPolicy::PrefillPrioritized {
                max_batch: self.max_batch,
            },
            PolicyKind::ChunkedHybrid => SchedulerPolicy::ChunkedHybrid {
                chunk_size: self.chunk_size,
                max_batch: self.max_batch,
                token_budget: self
                    .token_budget
                    .unwrap_or(self.chunk_size + self.max_batch),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkPosition {
    /// The chunk starting at the middle chunk boundary of the prompt.
    Mid,
    /// The final chunk of the prompt.
    Last,
}

impl ChunkPosition {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mid => "mid",
            Self::Last => "last",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub contexts: Vec<usize>,
    pub chunk_sizes: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub positions: Vec<ChunkPosition>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            contexts: vec![4096, 8192, 12288, 16384, 20480],
            chunk_sizes: vec![512, 1024, 2048],
            batch_sizes: vec![8, 32, 64, 128],
            positions: vec![ChunkPosition::Mid, ChunkPosition::Last],
        }
    }
}

/// Strategy token for the fastest SM-aware variant over residencies and policies.
pub const BEST_SM_AWARE: &str = "sm_aware:best";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyChoice {
    Fixed(ExecutionStrategy),
    BestSmAware,
}

impl StrategyChoice {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        if text.trim() == BEST_SM_AWARE {
            return Ok(Self::BestSmAware);
        }
        ExecutionStrategy::parse(text)
            .map(Self::Fixed)
            .map_err(|e| invalid(e.to_string()))
    }

    pub fn label(&self) -> (String, String) {
        match self {
            Self::Fixed(s) => (s.name().into(), s.policy_name()),
            Self::BestSmAware => ("sm_aware".into(), "best".into()),
        }
    }
}

pub fn parse_strategies(list: &[String]) -> anyhow::Result<Vec<StrategyChoice>> {
    if list.is_empty() {
        return Err(invalid("strategy list is empty"));
    }
    list.iter().map(|s| StrategyChoice::parse(s)).collect()
}

fn nonempty<T>(name: &str, v: &[T]) -> anyhow::Result<()> {
    if v.is_empty() {
        return Err(invalid(format!("{name} must not be empty")));
    }
    Ok(())
}

fn positive(name: &str, v: usize) -> anyhow::Result<()> {
    if v == 0 {
        return Err(invalid(format!("{name} must be >= 1")));
    }
    Ok(())
}

impl Config {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Fills every derived default so the emitted file states the run exactly.
    pub fn resolved(mut self) -> anyhow::Result<Self> {
        self.shape.scale = Some(self.shape.to_shape()?.scale);
        let policy = self.serving.policy(PolicyKind::ChunkedHybrid);
        if let SchedulerPolicy::ChunkedHybrid { token_budget, .. } = policy {
            self.serving.token_budget = Some(token_budget);
        }
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.gpu
            .validate()
            .map_err(|e| invalid(format!("gpu: {e}")))?;
        self.shape.to_shape()?;

        let k = &self.kernel;
        positive("kernel.prompt_len", k.prompt_len)?;
        positive("kernel.chunk_size", k.chunk_size)?;
        if k.num_decodes > 0 {
            positive("kernel.decode_context", k.decode_context)?;
        }
        parse_strategies(&k.strategies).context("kernel.strategies")?;

        let m = &self.microbench;
        nonempty("microbench.compute_iters", &m.compute_iters)?;
        positive("microbench.array_len", m.array_len)?;
        for s in parse_strategies(&m.strategies).context("microbench.strategies")? {
            if s == StrategyChoice::BestSmAware {
                return Err(invalid(format!(
                    "microbench.strategies: {BEST_SM_AWARE} applies to attention batches only"
                )));
            }
        }

        let s = &self.serving;
        nonempty("serving.qps", &s.qps)?;
        nonempty("serving.policies", &s.policies)?;
        nonempty("serving.fused", &s.fused)?;
        for &qps in &s.qps {
            s.workload
                .at_qps(qps)
                .validate()
                .map_err(|e| invalid(format!("serving: {e}")))?;
        }
        for &kind in &s.policies {
            s.policy(kind)
                .validate()
                .map_err(|e| invalid(format!("serving: {e}")))?;
        }
        s.cost
            .validate()
            .map_err(|e| invalid(format!("serving.cost: {e}")))?;

        let w = &self.sweep;
        nonempty("sweep.contexts", &w.contexts)?;
        nonempty("sweep.chunk_sizes", &w.chunk_sizes)?;
        nonempty("sweep.batch_sizes", &w.batch_sizes)?;
        nonempty("sweep.positions", &w.positions)?;
        for &c in &w.chunk_sizes {
            positive("sweep.chunk_sizes", c)?;
            if let Some(&ctx) = w.contexts.iter().find(|&&ctx| ctx < c) {
                return Err(invalid(format!(
                    "sweep: context {ctx} is shorter than chunk size {c}"
                )));
            }
        }

        self.verify
            .validate()
            .map_err(|e| invalid(format!("verify: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = Config::default().resolved().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml("[gpu]\nnum_sm = 4\n").unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(err.to_string().contains("num_sm"));
    }

    #[test]
    fn bad_strategy_names_are_rejected() {
        let err =
            Config::from_toml("[kernel]\nstrategies = [\"serial\", \"bogus\"]\n").unwrap_err();
        assert!(format!("{err:#}").contains("bogus"));
    }
}
