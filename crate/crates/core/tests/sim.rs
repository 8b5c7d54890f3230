use mor::kv_cache::KvMode;
use mor::model::{ModelConfig, Sharing};
use mor::sim::{
    check_trace, max_batch_size, relative_max_batch, simulate_depthwise, simulate_sequencewise, DepthSource,
    MemoryModel, Request, SimConfig, Workload, WorkloadSpec,
};
use proptest::prelude::*;

fn spec(n_r: usize, depths: DepthSource, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        requests: 1000,
        recursions: n_r,
        depths,
        seed,
        ..Default::default()
    }
}

fn traced(slots: usize, n_r: usize) -> SimConfig {
    SimConfig {
        record_trace: true,
        ..SimConfig::new(slots, n_r)
    }
}

#[test]
fn relative_batch_sizes() {
    let mem = MemoryModel::default();
    let vanilla = ModelConfig::vanilla_360m();
    let expect = [(2, 42), (3, 48), (4, 51)];
    for (n, paper) in expect {
        let l = if n == 4 { 34 } else { 32 };
        let reference = vanilla.with_recursion(l, 1, Sharing::None);
        let routed = vanilla.with_recursion(l, n, Sharing::MiddleCycle);
        let b = relative_max_batch(32, &reference, &routed, KvMode::RecursionWise, &mem).unwrap();
        assert!(b.abs_diff(paper) <= 2, "MoR-{n}: {b} vs {paper}");
    }
}

#[test]
fn sharing_fits_more_sequences_than_recursion_wise() {
    let mem = MemoryModel::default();
    let routed = ModelConfig::vanilla_360m().with_recursion(32, 3, Sharing::MiddleCycle);
    let rw = max_batch_size(&routed, KvMode::RecursionWise, &mem).unwrap();
    let sh = max_batch_size(&routed, KvMode::RecursiveSharing, &mem).unwrap();
    assert!(sh > rw);
}

#[test]
fn single_recursion_schedulers_agree() {
    let w = spec(1, DepthSource::Fixed(1), 3).generate().unwrap();
    let cfg = SimConfig::new(32, 1);
    let d = simulate_depthwise(&w, &cfg).unwrap();
    let s = simulate_sequencewise(&w, &cfg).unwrap();
    assert_eq!(d.stats.tokens, s.stats.tokens);
    assert_eq!(d.stats.tokens_per_step, s.stats.tokens_per_step);
}

#[test]
fn depthwise_beats_sequencewise() {
    for n in 2..=4 {
        let w = spec(n, DepthSource::Capacity, 7).generate().unwrap();
        let cfg = traced(32, n);
        let d = simulate_depthwise(&w, &cfg).unwrap();
        let s = simulate_sequencewise(&w, &cfg).unwrap();
        check_trace(&w, &cfg, &d).unwrap();
        assert!(d.stats.tokens_per_step >= s.stats.tokens_per_step, "N_r={n}");
        assert_eq!(d.stats.tokens, w.total_tokens());
    }
}

#[test]
fn throughput_rises_with_early_exits() {
    for n in 2..=4 {
        let mut last = 0.0;
        for f in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let w = spec(n, DepthSource::EarlyExit { fraction: f }, 11).generate().unwrap();
            let r = simulate_depthwise(&w, &SimConfig::new(32, n)).unwrap();
            assert!(r.stats.tokens_per_step >= last, "N_r={n} f={f}");
            last = r.stats.tokens_per_step;
        }
    }
}

#[test]
fn routed_cache_peak_is_below_full_depth() {
    let n = 3;
    let routed = spec(n, DepthSource::Capacity, 5).generate().unwrap();
    let full = Workload {
        requests: routed
            .requests
            .iter()
            .map(|r| Request {
                id: r.id,
                depths: vec![n; r.depths.len()],
            })
            .collect(),
    };
    let cfg = SimConfig::new(32, n);
    let a = simulate_depthwise(&routed, &cfg).unwrap();
    let b = simulate_depthwise(&full, &cfg).unwrap();
    assert!(a.stats.peak_kv_entries < b.stats.peak_kv_entries);
    let shared = SimConfig {
        kv_mode: KvMode::RecursiveSharing,
        ..cfg
    };
    let c = simulate_depthwise(&routed, &shared).unwrap();
    assert!(c.stats.peak_kv_entries < a.stats.peak_kv_entries);
}

#[test]
fn invalid_depths_are_rejected() {
    let w = Workload {
        requests: vec![Request { id: 0, depths: vec![1, 4] }],
    };
    assert!(simulate_depthwise(&w, &SimConfig::new(4, 3)).is_err());
}

fn small_workload() -> impl Strategy<Value = (usize, Workload)> {
    (1usize..=4).prop_flat_map(|n| {
        let req = prop::collection::vec(1usize..=n, 1..12);
        (Just(n), prop::collection::vec(req, 1..10)).prop_map(|(n, reqs)| {
            let requests = reqs.into_iter().enumerate().map(|(id, depths)| Request { id, depths }).collect();
            (n, Workload { requests })
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn traces_conserve_tokens_and_fill_slots(
        (n, w) in small_workload(),
        slots in 1usize..8,
        drain in 1usize..4,
        active in prop::option::of(1usize..8),
        mode in prop_oneof![Just(KvMode::RecursionWise), Just(KvMode::RecursiveSharing), Just(KvMode::Hybrid)],
    ) {
        let cfg = SimConfig {
            kv_mode: mode,
            drain_threshold: drain,
            max_active: active,
            ..traced(slots, n)
        };
        let d = simulate_depthwise(&w, &cfg).unwrap();
        prop_assert!(check_trace(&w, &cfg, &d).is_ok());
        prop_assert_eq!(d.stats.tokens, w.total_tokens());
        let work: usize = w.requests.iter().flat_map(|r| &r.depths).sum();
        prop_assert_eq!(d.stats.block_work, work);
        let s = simulate_sequencewise(&w, &traced(slots, n)).unwrap();
        prop_assert_eq!(s.stats.tokens, w.total_tokens());
    }
}
