use super::spec::{GpuSpec, KernelLaunch};
use crate::decomp::{CtaTask, Op};

/// Iteration count at which the two kernels take equal standalone time.
pub const MICROBENCH_BALANCED_ITERS: usize = 100;

/// CTAs per kernel, in units of `num_sms`.
const CTAS_PER_SM: usize = 6;

/// A compute-only kernel (`compute_iters` scalar multiplies per element) and a
/// memory-only kernel (three-array add over `array_len` elements per CTA).
///
/// Both launch `6 * num_sms` CTAs at a quarter of SM shared memory each, so
/// their standalone runtimes scale identically with residency; the compute
/// cost per iteration is chosen to make them equal at the balanced point.
pub fn make_microbench(
    compute_iters: usize,
    array_len: usize,
    gpu: &GpuSpec,
) -> (KernelLaunch, KernelLaunch) {
    let n = CTAS_PER_SM * gpu.num_sms;
    let memory = 3.0 * array_len as f64;
    let per_iter = memory * gpu.compute_rate_per_sm * gpu.num_sms as f64
        / (gpu.mem_bandwidth_total * MICROBENCH_BALANCED_ITERS as f64);
    let compute = per_iter * compute_iters as f64;
    let task =
        |id: usize, op: Op, compute_work: f64, memory_work: f64, barrier_segments: usize| CtaTask {
            id,
            op,
            request_id: 0,
            q_head: 0,
            kv_head: 0,
            q_tile: id,
            kv_split: 0..array_len,
            is_virtual: false,
            compute_work,
            memory_work,
            barrier_segments,
            weight: 1.0,
        };
    let smem = gpu.shared_mem_per_sm / 4;
    let compute_kernel = KernelLaunch::new(
        (0..n)
            .map(|i| task(i, Op::Prefill, compute, 0.0, compute_iters.max(1)))
            .collect(),
        smem,
        0,
    );
    let memory_kernel = KernelLaunch::new(
        (0..n)
            .map(|i| task(i, Op::Decode, 0.0, memory, 1))
            .collect(),
        smem,
        1,
    );
    (compute_kernel, memory_kernel)
}
