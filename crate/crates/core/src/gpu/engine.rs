use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sources::{
    intra_thread_jobs, launch_jobs, warp_parallel_jobs, Job, JobSource, QueueSource, SmAwareSource,
    StreamsSource,
};
use super::spec::{
    Colocation, ExecutionStrategy, GpuSpec, KernelLaunch, SimResult, TraceEvent, TraceRecord,
};
use super::{oracle_runtime, SimError};
use crate::decomp::Op;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    pub seed: u64,
    /// Break dispatch ties between equally loaded SMs at random.
    pub randomize_ties: bool,
    pub record_trace: bool,
}

/// Relative slack under which a remainder counts as drained.
const SNAP: f64 = 1e-12;

pub fn simulate(
    gpu: &GpuSpec,
    launches: &[KernelLaunch],
    strategy: ExecutionStrategy,
    seed: u64,
) -> Result<SimResult, SimError> {
    simulate_with(
        gpu,
        launches,
        strategy,
        SimOptions {
            seed,
            ..SimOptions::default()
        },
    )
}

pub fn simulate_with(
    gpu: &GpuSpec,
    launches: &[KernelLaunch],
    strategy: ExecutionStrategy,
    options: SimOptions,
) -> Result<SimResult, SimError> {
    gpu.validate()?;
    if launches.iter().all(|l| l.tasks.is_empty()) {
        return Err(SimError::Empty);
    }
    for l in launches {
        if l.shared_mem_per_cta > gpu.shared_mem_per_sm {
            return Err(SimError::Config(format!(
                "launch on stream {} needs {} bytes of shared memory per CTA, SM has {}",
                l.stream_id, l.shared_mem_per_cta, gpu.shared_mem_per_sm
            )));
        }
    }
    if let ExecutionStrategy::IntraThread { segments: 0 } = strategy {
        return Err(SimError::Config(
            "intra_thread segments must be >= 1".into(),
        ));
    }
    let launches: Vec<&KernelLaunch> = launches.iter().filter(|l| !l.tasks.is_empty()).collect();
    let by_op = |op: Op| -> VecDeque<Job> {
        launches
            .iter()
            .filter(|l| l.op() == Some(op))
            .flat_map(|l| launch_jobs(l))
            .collect()
    };
    let mut result = match strategy {
        ExecutionStrategy::Serial => {
            let mut parts = Vec::with_capacity(launches.len());
            for l in &launches {
                let mut source = QueueSource::new(launch_jobs(l));
                parts.push(run(gpu, &mut source, options)?);
            }
            concat_serial(gpu, parts)
        }
        ExecutionStrategy::StreamsParallel => {
            let mut order: Vec<&&KernelLaunch> = launches.iter().collect();
            order.sort_by_key(|l| l.stream_id);
            let mut source =
                StreamsSource::new(order.into_iter().map(|l| launch_jobs(l)).collect());
            run(gpu, &mut source, options)?
        }
        ExecutionStrategy::CtaParallel => {
            let mut queue = by_op(Op::Prefill);
            queue.extend(by_op(Op::Decode));
            let smem = queue.iter().map(|j| j.shared_mem).max().unwrap_or(0);
            queue.iter_mut().for_each(|j| j.shared_mem = smem);
            run(gpu, &mut QueueSource::new(queue), options)?
        }
        ExecutionStrategy::WarpParallel => {
            let queue = warp_parallel_jobs(by_op(Op::Prefill), by_op(Op::Decode));
            run(gpu, &mut QueueSource::new(queue), options)?
        }
        ExecutionStrategy::IntraThread { segments } => {
            let queue = intra_thread_jobs(by_op(Op::Prefill), by_op(Op::Decode), segments);
            run(gpu, &mut QueueSource::new(queue), options)?
        }
        ExecutionStrategy::SmAware { policy } => {
            let mut source = SmAwareSource::new(
                gpu.num_sms,
                by_op(Op::Prefill).into(),
                by_op(Op::Decode).into(),
                policy,
            );
            run(gpu, &mut source, options)?
        }
    };
    let owned: Vec<KernelLaunch> = launches.into_iter().cloned().collect();
    finish_utilization(gpu, &owned, &mut result);
    Ok(result)
}

fn finish_utilization(gpu: &GpuSpec, launches: &[KernelLaunch], r: &mut SimResult) {
    let c: f64 = launches.iter().map(KernelLaunch::total_compute).sum();
    let m: f64 = launches.iter().map(KernelLaunch::total_memory).sum();
    if r.makespan > 0.0 {
        r.compute_utilization = (c / (r.makespan * gpu.total_compute_rate())).min(1.0);
        r.bandwidth_utilization = (m / (r.makespan * gpu.mem_bandwidth_total)).min(1.0);
    }
    debug_assert!(r.makespan >= oracle_runtime(gpu, launches) * (1.0 - 1e-9));
}

fn concat_serial(gpu: &GpuSpec, parts: Vec<SimResult>) -> SimResult {
    let mut out = SimResult {
        makespan: 0.0,
        prefill_finish: None,
        decode_finish: None,
        compute_utilization: 0.0,
        bandwidth_utilization: 0.0,
        waves_used: 0,
        quantized_ctas: 0,
        colocation: vec![Vec::new(); gpu.num_sms],
        second_assignment: vec![None; gpu.num_sms],
        trace: Vec::new(),
        drained_compute: 0.0,
        drained_memory: 0.0,
    };
    for part in parts {
        let offset = out.makespan;
        let shift = |t: Option<f64>| t.map(|t| t + offset);
        out.prefill_finish = shift(part.prefill_finish).or(out.prefill_finish);
        out.decode_finish = shift(part.decode_finish).or(out.decode_finish);
        for (sm, entries) in part.colocation.into_iter().enumerate() {
            out.colocation[sm].extend(entries.into_iter().map(|c| Colocation {
                time: c.time + offset,
                ..c
            }));
        }
        for (sm, entry) in part.second_assignment.into_iter().enumerate() {
            if out.second_assignment[sm].is_none() {
                out.second_assignment[sm] = entry.map(|c| Colocation {
                    time: c.time + offset,
                    ..c
                });
            }
        }
        out.trace
            .extend(part.trace.into_iter().map(|t| TraceRecord {
                time: t.time + offset,
                ..t
            }));
        out.waves_used += part.waves_used;
        out.quantized_ctas += part.quantized_ctas;
        out.drained_compute += part.drained_compute;
        out.drained_memory += part.drained_memory;
        out.makespan += part.makespan;
    }
    out
}

struct Unit {
    job: usize,
    sm: usize,
    weight: f64,
    members: Vec<(Op, usize)>,
    compute: f64,
    memory: f64,
    stage_compute: f64,
    stage_memory: f64,
    stages_left: usize,
    barrier: f64,
    pending_load: bool,
}

impl Unit {
    fn done(&self) -> bool {
        self.compute == 0.0
            && self.memory == 0.0
            && self.barrier == 0.0
            && self.stages_left == 0
            && !self.pending_load
    }
}

struct SmState {
    resident: usize,
    free_smem: usize,
    prefill_jobs: usize,
    decode_jobs: usize,
    assignments: usize,
}

struct Slot {
    sm: usize,
    units_left: usize,
    shared_mem: usize,
    has_prefill: bool,
    has_decode: bool,
}

fn run(
    gpu: &GpuSpec,
    source: &mut dyn JobSource,
    options: SimOptions,
) -> Result<SimResult, SimError> {
    let n = gpu.num_sms;
    let total_jobs = source.remaining();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut sms: Vec<SmState> = (0..n)
        .map(|_| SmState {
            resident: 0,
            free_smem: gpu.shared_mem_per_sm,
            prefill_jobs: 0,
            decode_jobs: 0,
            assignments: 0,
        })
        .collect();
    let mut slots: Vec<Slot> = Vec::new();
    let mut units: Vec<Unit> = Vec::new();
    let mut colocation: Vec<Vec<Colocation>> = vec![Vec::new(); n];
    let mut second_assignment: Vec<Option<Colocation>> = vec![None; n];
    let mut trace = Vec::new();
    let mut now = 0.0_f64;
    let mut finish = [None::<f64>; 2];
    let mut drained = (0.0_f64, 0.0_f64);
    let mut max_job_smem = 0usize;

    let mut compute_w = vec![0.0_f64; n];
    loop {
        // Retire finished units and free their slots, then refill.
        let mut changed = true;
        while changed {
            changed = false;
            let mut i = 0;
            while i < units.len() {
                if units[i].done() {
                    let u = units.swap_remove(i);
                    for &(op, id) in &u.members {
                        finish[op as usize] = Some(now);
                        if options.record_trace {
                            trace.push(TraceRecord {
                                time: now,
                                sm: u.sm,
                                event: TraceEvent::Complete,
                                task_id: id,
                                op,
                            });
                        }
                    }
                    let slot = &mut slots[u.job];
                    slot.units_left -= 1;
                    if slot.units_left == 0 {
                        let sm = &mut sms[slot.sm];
                        sm.resident -= 1;
                        sm.free_smem += slot.shared_mem;
                        sm.prefill_jobs -= usize::from(slot.has_prefill);
                        sm.decode_jobs -= usize::from(slot.has_decode);
                        colocation[slot.sm].push(Colocation {
                            time: now,
                            prefill: sm.prefill_jobs,
                            decode: sm.decode_jobs,
                        });
                    }
                    changed = true;
                } else {
                    i += 1;
                }
            }
            let mut blocked = vec![false; n];
            while source.remaining() > 0 {
                let Some(sm) = pick_sm(
                    gpu,
                    &sms,
                    &blocked,
                    options.randomize_ties.then_some(&mut rng),
                ) else {
                    break;
                };
                let Some(job) = source.next(sm, sms[sm].free_smem) else {
                    blocked[sm] = true;
                    continue;
                };
                max_job_smem = max_job_smem.max(job.shared_mem);
                let has_prefill = job.has_op(Op::Prefill);
                let has_decode = job.has_op(Op::Decode);
                let state = &mut sms[sm];
                state.resident += 1;
                state.free_smem -= job.shared_mem;
                state.prefill_jobs += usize::from(has_prefill);
                state.decode_jobs += usize::from(has_decode);
                state.assignments += 1;
                let mix = Colocation {
                    time: now,
                    prefill: state.prefill_jobs,
                    decode: state.decode_jobs,
                };
                colocation[sm].push(mix);
                if state.assignments == 2 {
                    second_assignment[sm] = Some(mix);
                }
                let size = gpu.cta_size_factor(job.shared_mem);
                let job_id = slots.len();
                slots.push(Slot {
                    sm,
                    units_left: job.units.len(),
                    shared_mem: job.shared_mem,
                    has_prefill,
                    has_decode,
                });
                for spec in job.units {
                    if options.record_trace {
                        for &(op, id) in &spec.members {
                            trace.push(TraceRecord {
                                time: now,
                                sm,
                                event: TraceEvent::Dispatch,
                                task_id: id,
                                op,
                            });
                        }
                    }
                    units.push(Unit {
                        job: job_id,
                        sm,
                        weight: spec.weight * size,
                        members: spec.members,
                        compute: spec.stage_compute,
                        memory: spec.stage_memory,
                        stage_compute: spec.stage_compute,
                        stage_memory: spec.stage_memory,
                        stages_left: spec.stages - 1,
                        barrier: 0.0,
                        pending_load: false,
                    });
                }
                if slots[job_id].units_left == 0 {
                    // An empty job frees its slot right away.
                    slots[job_id].units_left = 1;
                    units.push(Unit {
                        job: job_id,
                        sm,
                        weight: 0.0,
                        members: Vec::new(),
                        compute: 0.0,
                        memory: 0.0,
                        stage_compute: 0.0,
                        stage_memory: 0.0,
                        stages_left: 0,
                        barrier: 0.0,
                        pending_load: false,
                    });
                }
                changed = true;
            }
            for u in units.iter_mut() {
                advance_stage(u, gpu.barrier_latency);
            }
            changed |= units.iter().any(Unit::done);
        }

        if units.is_empty() {
            if source.remaining() > 0 {
                return Err(SimError::Stalled(source.remaining()));
            }
            break;
        }

        // Fluid rates.
        compute_w.iter_mut().for_each(|w| *w = 0.0);
        let mut memory_w = 0.0;
        for u in &units {
            if u.barrier == 0.0 {
                if u.compute > 0.0 {
                    compute_w[u.sm] += u.weight;
                }
                if u.memory > 0.0 {
                    memory_w += u.weight;
                }
            }
        }
        let c_full = gpu.unit_compute_cap(1.0);
        let m_full = gpu.unit_bandwidth_cap(1.0);
        let rates: Vec<(f64, f64)> = units
            .iter()
            .map(|u| {
                if u.barrier > 0.0 {
                    return (0.0, 0.0);
                }
                let rc = if u.compute > 0.0 {
                    u.weight * c_full.min(gpu.compute_rate_per_sm / compute_w[u.sm])
                } else {
                    0.0
                };
                let rm = if u.memory > 0.0 {
                    u.weight * m_full.min(gpu.mem_bandwidth_total / memory_w)
                } else {
                    0.0
                };
                (rc, rm)
            })
            .collect();
        let mut dt = f64::INFINITY;
        for (u, &(rc, rm)) in units.iter().zip(&rates) {
            if u.barrier > 0.0 {
                dt = dt.min(u.barrier);
            }
            if rc > 0.0 {
                dt = dt.min(u.compute / rc);
            }
            if rm > 0.0 {
                dt = dt.min(u.memory / rm);
            }
        }
        if !dt.is_finite() {
            return Err(SimError::Stalled(source.remaining()));
        }
        let horizon = dt * (1.0 + SNAP);
        for (u, &(rc, rm)) in units.iter_mut().zip(&rates) {
            if u.barrier > 0.0 {
                u.barrier = if u.barrier <= horizon {
                    0.0
                } else {
                    u.barrier - dt
                };
            }
            if rc > 0.0 {
                let before = u.compute;
                u.compute = if u.compute <= rc * horizon {
                    0.0
                } else {
                    u.compute - rc * dt
                };
                drained.0 += before - u.compute;
            }
            if rm > 0.0 {
                let before = u.memory;
                u.memory = if u.memory <= rm * horizon {
                    0.0
                } else {
                    u.memory - rm * dt
                };
                drained.1 += before - u.memory;
            }
        }
        now += dt;
    }

    let capacity_per_sm = if max_job_smem == 0 {
        gpu.max_ctas_per_sm
    } else {
        gpu.max_ctas_per_sm
            .min(gpu.shared_mem_per_sm / max_job_smem)
    };
    let capacity = (capacity_per_sm * n).max(1);
    Ok(SimResult {
        makespan: now,
        prefill_finish: finish[Op::Prefill as usize],
        decode_finish: finish[Op::Decode as usize],
        compute_utilization: 0.0,
        bandwidth_utilization: 0.0,
        waves_used: total_jobs.div_ceil(capacity),
        quantized_ctas: total_jobs % capacity,
        colocation,
        second_assignment,
        trace,
        drained_compute: drained.0,
        drained_memory: drained.1,
    })
}

/// Moves a unit past finished stages: barrier first, then the next slice.
fn advance_stage(u: &mut Unit, barrier_latency: f64) {
    while u.compute == 0.0 && u.memory == 0.0 && u.barrier == 0.0 {
        if u.pending_load {
            u.pending_load = false;
            u.compute = u.stage_compute;
            u.memory = u.stage_memory;
        } else if u.stages_left > 0 {
            u.stages_left -= 1;
            if barrier_latency > 0.0 {
                u.barrier = barrier_latency;
            }
            u.pending_load = true;
        } else {
            return;
        }
    }
}

fn pick_sm(
    gpu: &GpuSpec,
    sms: &[SmState],
    blocked: &[bool],
    rng: Option<&mut ChaCha8Rng>,
) -> Option<usize> {
    let open =
        |i: usize| !blocked[i] && sms[i].resident < gpu.max_ctas_per_sm && sms[i].free_smem > 0;
    let least = (0..sms.len())
        .filter(|&i| open(i))
        .map(|i| sms[i].resident)
        .min()?;
    match rng {
        None => (0..sms.len()).find(|&i| open(i) && sms[i].resident == least),
        Some(rng) => {
            let ties: Vec<usize> = (0..sms.len())
                .filter(|&i| open(i) && sms[i].resident == least)
                .collect();
            Some(ties[rng.random_range(0..ties.len())])
        }
    }
}
