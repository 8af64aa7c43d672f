use std::collections::VecDeque;

use super::spec::{KernelLaunch, SmAwarePolicy};
use crate::decomp::{CtaTask, Op};

/// One resident execution context inside a slot.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct UnitSpec {
    pub members: Vec<(Op, usize)>,
    pub weight: f64,
    /// Work per stage; a plain unit has a single stage.
    pub stage_compute: f64,
    pub stage_memory: f64,
    pub stages: usize,
}

impl UnitSpec {
    fn single(task: &CtaTask) -> Self {
        Self {
            members: vec![(task.op, task.id)],
            weight: task.weight,
            stage_compute: task.compute_work,
            stage_memory: task.memory_work,
            stages: 1,
        }
    }

    fn total_compute(&self) -> f64 {
        self.stage_compute * self.stages as f64
    }

    fn total_memory(&self) -> f64 {
        self.stage_memory * self.stages as f64
    }
}

/// What occupies one CTA slot until every unit in it finishes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Job {
    pub units: Vec<UnitSpec>,
    pub shared_mem: usize,
}

impl Job {
    pub fn has_op(&self, op: Op) -> bool {
        self.units
            .iter()
            .any(|u| u.members.iter().any(|&(o, _)| o == op))
    }
}

/// Groups virtual tasks of one parent CTA into a single slot.
pub(crate) fn launch_jobs(launch: &KernelLaunch) -> VecDeque<Job> {
    let mut jobs: VecDeque<Job> = VecDeque::new();
    let mut parent: Option<(usize, usize)> = None;
    for task in &launch.tasks {
        let key = (task.request_id, task.kv_head);
        let joins = task.is_virtual
            && parent == Some(key)
            && jobs.back().is_some_and(|j| {
                j.units.iter().map(|u| u.weight).sum::<f64>() + task.weight <= 1.0 + 1e-12
            });
        if joins {
            jobs.back_mut()
                .expect("checked above")
                .units
                .push(UnitSpec::single(task));
        } else {
            jobs.push_back(Job {
                units: vec![UnitSpec::single(task)],
                shared_mem: launch.shared_mem_per_cta,
            });
        }
        parent = task.is_virtual.then_some(key);
    }
    jobs
}

pub(crate) trait JobSource {
    /// Next job for `sm` that fits in `free_smem`, if any.
    fn next(&mut self, sm: usize, free_smem: usize) -> Option<Job>;
    fn remaining(&self) -> usize;
}

pub(crate) struct QueueSource {
    queue: VecDeque<Job>,
}

impl QueueSource {
    pub fn new(queue: VecDeque<Job>) -> Self {
        Self { queue }
    }
}

impl JobSource for QueueSource {
    fn next(&mut self, _sm: usize, free_smem: usize) -> Option<Job> {
        if self.queue.front()?.shared_mem <= free_smem {
            self.queue.pop_front()
        } else {
            None
        }
    }

    fn remaining(&self) -> usize {
        self.queue.len()
    }
}

/// Round-robin across stream heads, one job per stream per turn.
pub(crate) struct StreamsSource {
    streams: Vec<VecDeque<Job>>,
    cursor: usize,
}

impl StreamsSource {
    pub fn new(streams: Vec<VecDeque<Job>>) -> Self {
        Self { streams, cursor: 0 }
    }
}

impl JobSource for StreamsSource {
    fn next(&mut self, _sm: usize, free_smem: usize) -> Option<Job> {
        let n = self.streams.len();
        for k in 0..n {
            let s = (self.cursor + k) % n;
            if self.streams[s]
                .front()
                .is_some_and(|j| j.shared_mem <= free_smem)
            {
                self.cursor = (s + 1) % n;
                return self.streams[s].pop_front();
            }
        }
        None
    }

    fn remaining(&self) -> usize {
        self.streams.iter().map(VecDeque::len).sum()
    }
}

/// Ratio as `(prefill, decode)` tickets: the smaller side gets one ticket and
/// the larger side the rounded quotient.
pub fn proportional_ratio(prefill_ctas: usize, decode_ctas: usize) -> (usize, usize) {
    if prefill_ctas == 0 || decode_ctas == 0 {
        return (1, 1);
    }
    let round_div = |a: usize, b: usize| ((a as f64 / b as f64).round() as usize).max(1);
    if prefill_ctas <= decode_ctas {
        (1, round_div(decode_ctas, prefill_ctas))
    } else {
        (round_div(prefill_ctas, decode_ctas), 1)
    }
}

/// Per-SM tickets and per-op claim counters of the SM-aware fused kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulerState {
    pub sm_ctr: Vec<usize>,
    pub prefill_assigned: usize,
    pub decode_assigned: usize,
    pub prefill_ratio: usize,
    pub decode_ratio: usize,
    pub prefill_ctas: usize,
    pub decode_ctas: usize,
}

impl SchedulerState {
    pub fn new(
        num_sms: usize,
        prefill_ctas: usize,
        decode_ctas: usize,
        policy: SmAwarePolicy,
    ) -> Self {
        let (prefill_ratio, decode_ratio) = match policy {
            SmAwarePolicy::FiftyFifty => (1, 1),
            SmAwarePolicy::Proportional => proportional_ratio(prefill_ctas, decode_ctas),
        };
        Self {
            sm_ctr: vec![0; num_sms],
            prefill_assigned: 0,
            decode_assigned: 0,
            prefill_ratio,
            decode_ratio,
            prefill_ctas,
            decode_ctas,
        }
    }

    /// Draws a ticket on `sm` and claims the next CTA index of the chosen op,
    /// switching ops when that pool is exhausted.
    pub fn assign(&mut self, sm: usize) -> Option<(Op, usize)> {
        if self.prefill_assigned >= self.prefill_ctas && self.decode_assigned >= self.decode_ctas {
            return None;
        }
        let ticket = self.sm_ctr[sm] % (self.prefill_ratio + self.decode_ratio);
        self.sm_ctr[sm] += 1;
        let preferred = if ticket < self.prefill_ratio {
            Op::Prefill
        } else {
            Op::Decode
        };
        for op in [preferred, other(preferred)] {
            let (claimed, total) = match op {
                Op::Prefill => (&mut self.prefill_assigned, self.prefill_ctas),
                Op::Decode => (&mut self.decode_assigned, self.decode_ctas),
            };
            if *claimed < total {
                *claimed += 1;
                return Some((op, *claimed - 1));
            }
        }
        None
    }
}

fn other(op: Op) -> Op {
    match op {
        Op::Prefill => Op::Decode,
        Op::Decode => Op::Prefill,
    }
}

pub(crate) struct SmAwareSource {
    state: SchedulerState,
    prefill: Vec<Job>,
    decode: Vec<Job>,
    shared_mem: usize,
}

impl SmAwareSource {
    pub fn new(num_sms: usize, prefill: Vec<Job>, decode: Vec<Job>, policy: SmAwarePolicy) -> Self {
        let shared_mem = prefill
            .iter()
            .chain(&decode)
            .map(|j| j.shared_mem)
            .max()
            .unwrap_or(0);
        Self {
            state: SchedulerState::new(num_sms, prefill.len(), decode.len(), policy),
            prefill,
            decode,
            shared_mem,
        }
    }
}

impl JobSource for SmAwareSource {
    fn next(&mut self, sm: usize, free_smem: usize) -> Option<Job> {
        if free_smem < self.shared_mem {
            return None;
        }
        let (op, idx) = self.state.assign(sm)?;
        let pool = match op {
            Op::Prefill => &mut self.prefill,
            Op::Decode => &mut self.decode,
        };
        let mut job = std::mem::replace(
            &mut pool[idx],
            Job {
                units: Vec::new(),
                shared_mem: 0,
            },
        );
        job.shared_mem = self.shared_mem;
        Some(job)
    }

    fn remaining(&self) -> usize {
        (self.state.prefill_ctas - self.state.prefill_assigned)
            + (self.state.decode_ctas - self.state.decode_assigned)
    }
}

fn scaled(job: Job, factor: f64) -> impl Iterator<Item = UnitSpec> {
    job.units.into_iter().map(move |mut u| {
        u.weight *= factor;
        u
    })
}

/// Pairs prefill job i with decode job i, each on half the slot's warps.
/// Unpaired jobs keep half the warps with the rest idle.
pub(crate) fn warp_parallel_jobs(prefill: VecDeque<Job>, decode: VecDeque<Job>) -> VecDeque<Job> {
    let smem = prefill
        .iter()
        .chain(&decode)
        .map(|j| j.shared_mem)
        .max()
        .unwrap_or(0);
    let mut p = prefill.into_iter();
    let mut d = decode.into_iter();
    let mut out = VecDeque::new();
    loop {
        let units: Vec<UnitSpec> = match (p.next(), d.next()) {
            (None, None) => break,
            (Some(a), Some(b)) => scaled(a, 0.5).chain(scaled(b, 0.5)).collect(),
            (Some(a), None) | (None, Some(a)) => scaled(a, 0.5).collect(),
        };
        out.push_back(Job {
            units,
            shared_mem: smem,
        });
    }
    out
}

/// Pairs prefill job i with decode job i into one full-width unit whose work
/// is cut into `segments` barrier-separated stages.
pub(crate) fn intra_thread_jobs(
    prefill: VecDeque<Job>,
    decode: VecDeque<Job>,
    segments: usize,
) -> VecDeque<Job> {
    let smem = prefill
        .iter()
        .chain(&decode)
        .map(|j| j.shared_mem)
        .max()
        .unwrap_or(0);
    let mut p = prefill.into_iter();
    let mut d = decode.into_iter();
    let mut out = VecDeque::new();
    loop {
        match (p.next(), d.next()) {
            (None, None) => break,
            (Some(a), Some(b)) => {
                let units: Vec<&UnitSpec> = a.units.iter().chain(&b.units).collect();
                let compute: f64 = units.iter().map(|u| u.total_compute()).sum();
                let memory: f64 = units.iter().map(|u| u.total_memory()).sum();
                let members = units
                    .iter()
                    .flat_map(|u| u.members.iter().copied())
                    .collect();
                let fused = UnitSpec {
                    members,
                    weight: 1.0,
                    stage_compute: compute / segments as f64,
                    stage_memory: memory / segments as f64,
                    stages: segments,
                };
                out.push_back(Job {
                    units: vec![fused],
                    shared_mem: smem,
                });
            }
            (Some(a), None) | (None, Some(a)) => out.push_back(Job {
                shared_mem: smem,
                ..a
            }),
        }
    }
    out
}
