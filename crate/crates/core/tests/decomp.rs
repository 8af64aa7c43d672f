use hybridsim_core::decomp::{
    decompose_decode, decompose_hybrid, decompose_prefill, decompose_with, limit_prefill_splits,
    prefill_q_tiles, DecodeRequest, HybridBatchSpec, PrefillChunk, SplitPolicy, TileConfig,
};
use hybridsim_core::{GpuSpec, ModelShape};
use proptest::prelude::*;

fn llama_like() -> ModelShape {
    ModelShape::with_default_scale(32, 8, 128).unwrap()
}

#[test]
fn balanced_table_row_scaled_down_recount() {
    // 1.5K prefill over a 1.5K prompt with 27 decodes at 1.5K context.
    let gpu = GpuSpec::a100_like();
    let batch = HybridBatchSpec {
        prefill: Some(PrefillChunk {
            chunk_size: 1536,
            context_len: 1536,
            position_offset: 0,
        }),
        decodes: vec![DecodeRequest { context_len: 1536 }; 27],
        shape: llama_like(),
    };
    let d = decompose_hybrid(&batch, &gpu).unwrap();
    assert_eq!(d.config.ctas_per_sm, 4);
    assert_eq!(d.prefill_splits, 1);
    assert_eq!(d.prefill_tasks.len(), 24 * 32);
    assert_eq!(d.decode_cta_count(), 216);
    assert_eq!(d.decode_tasks.len(), 864);
    assert_eq!(d.total_tasks(), 1632);
}

#[test]
fn hybrid_is_the_sum_of_standalone_decompositions() {
    let gpu = GpuSpec::a100_like();
    let batch = HybridBatchSpec {
        prefill: Some(PrefillChunk {
            chunk_size: 1000,
            context_len: 5000,
            position_offset: 3000,
        }),
        decodes: (1..=9)
            .map(|i| DecodeRequest {
                context_len: 300 * i,
            })
            .collect(),
        shape: llama_like(),
    };
    let d = decompose_hybrid(&batch, &gpu).unwrap();
    assert_eq!(d.prefill_tasks, decompose_prefill(&batch, &d.config, &gpu));
    assert_eq!(d.decode_tasks, decompose_decode(&batch, &d.config));
    let prefill_only = HybridBatchSpec {
        decodes: vec![],
        ..batch
    };
    assert!(decompose_hybrid(&prefill_only, &gpu)
        .unwrap()
        .decode_tasks
        .is_empty());
}

#[test]
fn late_chunk_kv_bytes_do_not_depend_on_splits() {
    let gpu = GpuSpec::a100_like();
    let batch = HybridBatchSpec {
        prefill: Some(PrefillChunk {
            chunk_size: 1024,
            context_len: 16384,
            position_offset: 15360,
        }),
        decodes: vec![],
        shape: llama_like(),
    };
    let kv_bytes = |splits: usize| -> f64 {
        let cfg = TileConfig {
            split_policy: SplitPolicy::Fixed(splits),
            ..TileConfig::fused(2, &gpu)
        };
        let group = batch.shape.group_size() as f64;
        decompose_prefill(&batch, &cfg, &gpu)
            .iter()
            .map(|t| 2.0 * 128.0 * t.kv_split.len() as f64 / group)
            .sum()
    };
    let one = kv_bytes(1);
    for s in 2..=8 {
        assert!((kv_bytes(s) - one).abs() < 1e-6 * one);
    }
}

fn batch() -> impl Strategy<Value = HybridBatchSpec> {
    let shape = (
        prop_oneof![
            Just((32usize, 8usize)),
            Just((32, 4)),
            Just((8, 8)),
            Just((12, 3))
        ],
        prop_oneof![Just(64usize), Just(128)],
    )
        .prop_map(|((q, kv), d)| ModelShape::with_default_scale(q, kv, d).unwrap());
    let prefill =
        prop::option::of(
            (1usize..3000, 0usize..6000).prop_map(|(chunk, offset)| PrefillChunk {
                chunk_size: chunk,
                context_len: chunk + offset,
                position_offset: offset,
            }),
        );
    let decodes = prop::collection::vec(
        (1usize..9000).prop_map(|c| DecodeRequest { context_len: c }),
        0..40,
    );
    (shape, prefill, decodes)
        .prop_filter("nonempty", |(_, p, d)| p.is_some() || !d.is_empty())
        .prop_map(|(shape, prefill, decodes)| HybridBatchSpec {
            prefill,
            decodes,
            shape,
        })
}

fn config() -> impl Strategy<Value = TileConfig> {
    let gpu = GpuSpec::a100_like();
    (
        prop_oneof![Just(2usize), Just(4)],
        any::<bool>(),
        prop_oneof![
            Just(SplitPolicy::Limited),
            Just(SplitPolicy::Unlimited),
            (1usize..10).prop_map(SplitPolicy::Fixed)
        ],
    )
        .prop_map(move |(c, virt, policy)| TileConfig {
            virtual_decode: virt,
            split_policy: policy,
            ..TileConfig::fused(c, &gpu)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decode_cta_count_is_requests_times_kv_heads(b in batch(), cfg in config()) {
        let d = decompose_with(&b, &cfg, &GpuSpec::a100_like()).unwrap();
        prop_assert_eq!(d.decode_cta_count(), b.decodes.len() * b.shape.num_kv_heads);
    }

    #[test]
    fn virtual_decode_conserves_work(b in batch()) {
        let gpu = GpuSpec::a100_like();
        let full = TileConfig { virtual_decode: false, ..TileConfig::fused(4, &gpu) };
        let virt = TileConfig { virtual_decode: true, ..full };
        let sum = |cfg: &TileConfig| decompose_decode(&b, cfg).iter().fold((0.0, 0.0), |(c, m), t| (c + t.compute_work, m + t.memory_work));
        let (c0, m0) = sum(&full);
        let (c1, m1) = sum(&virt);
        prop_assert!((c0 - c1).abs() <= 1.0);
        prop_assert!((m0 - m1).abs() <= 1.0);
    }

    #[test]
    fn prefill_compute_is_split_invariant(b in batch(), s in 1usize..12) {
        prop_assume!(b.prefill.is_some());
        let gpu = GpuSpec::a100_like();
        let one = TileConfig { split_policy: SplitPolicy::Fixed(1), ..TileConfig::fused(2, &gpu) };
        let many = TileConfig { split_policy: SplitPolicy::Fixed(s), ..one };
        let total = |cfg: &TileConfig| decompose_prefill(&b, cfg, &gpu).iter().map(|t| t.compute_work).sum::<f64>();
        let p = b.prefill.unwrap();
        let dots: usize = (0..p.chunk_size).map(|i| p.position_offset + i + 1).sum();
        prop_assert_eq!(total(&one), 2.0 * (dots * b.shape.num_q_heads) as f64);
        prop_assert_eq!(total(&many), total(&one));
    }

    #[test]
    fn limited_splits_stay_within_two_waves(b in batch()) {
        prop_assume!(b.prefill.is_some());
        let gpu = GpuSpec::a100_like();
        let cfg = TileConfig::fused(4, &gpu);
        let natural = prefill_q_tiles(b.prefill.unwrap().chunk_size, &cfg) * b.shape.num_q_heads;
        let tasks = decompose_prefill(&b, &cfg, &gpu).len();
        prop_assert!(tasks <= (2 * gpu.num_sms).max(natural));
    }

    #[test]
    fn split_limit_is_monotone(n in 1usize..2000) {
        let gpu = GpuSpec::a100_like();
        let cfg = TileConfig::fused(2, &gpu);
        let s = limit_prefill_splits(n, &gpu, &cfg);
        prop_assert!(s >= 1);
        prop_assert!(limit_prefill_splits(n + 1, &gpu, &cfg) <= s);
        prop_assert!(n * s <= 2 * gpu.num_sms || s == 1);
    }

    #[test]
    fn decode_costs_grow_with_context_and_tile(len in 1usize..20000) {
        let gpu = GpuSpec::a100_like();
        let one = |ctx: usize, tile: usize| {
            let b = HybridBatchSpec { prefill: None, decodes: vec![DecodeRequest { context_len: ctx }], shape: llama_like() };
            let cfg = TileConfig { decode_tile_q: tile, virtual_decode: false, ..TileConfig::fused(4, &gpu) };
            decompose_decode(&b, &cfg)[0].clone()
        };
        prop_assert!(one(len + 1, 16).memory_work > one(len, 16).memory_work);
        prop_assert!(one(len, 64).compute_work >= one(len, 16).compute_work);
    }
}
