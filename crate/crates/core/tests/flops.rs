use mor::flops::{forward_flops_per_token, mor_flops_per_token};
use mor::kv_cache::KvMode;
use mor::model::{ModelConfig, Sharing};
use mor::routing::{capacity_schedule, RouterConfig};
use num_rational::Ratio;
use proptest::prelude::*;

const BUDGET: f64 = 16.5e18;

/// Hand count for the 360M vanilla model at T = 2048:
/// per layer q,o 960² each, k,v 960·320 each, SwiGLU 3·960·2560, two norms;
/// 32 layers plus the final norm; attention 4·960·(2049/2) per layer;
/// LM head 2·960·49152.
const VANILLA_360M_PER_TOKEN: f64 = 849_532_800.0;

fn mor_360m(n_r: usize) -> ModelConfig {
    let l = if n_r == 4 { 34 } else { 32 };
    ModelConfig::vanilla_360m().with_recursion(l, n_r, Sharing::MiddleCycle)
}

fn mor_report(n_r: usize, mode: KvMode) -> mor::flops::FlopsReport {
    let caps = capacity_schedule(n_r).unwrap();
    mor_flops_per_token(&mor_360m(n_r), &caps, mode, Some(&RouterConfig::expert_choice()), 2048).unwrap()
}

#[test]
fn vanilla_360m_matches_hand_count() {
    let r = forward_flops_per_token(&ModelConfig::vanilla_360m(), 2048).unwrap();
    assert_eq!(r.per_token_forward, VANILLA_360M_PER_TOKEN);
    assert_eq!(r.lm_head_part, 94_371_840.0);
    assert_eq!(r.attention_part, 125_890_560.0);
}

#[test]
fn vanilla_360m_token_budget_band() {
    let r = forward_flops_per_token(&ModelConfig::vanilla_360m(), 2048).unwrap();
    for per_token in [r.per_token_forward, r.without_lm_head()] {
        let tokens = BUDGET / per_token;
        assert!((18e9..=22e9).contains(&tokens), "{tokens:e}");
    }
}

#[test]
fn mor_two_budget_bands() {
    let r = mor_report(2, KvMode::RecursionWise);
    let tokens = r.tokens_for_budget(BUDGET);
    assert!((23e9..=31e9).contains(&tokens), "{tokens:e}");
    let budget = r.budget_for_tokens(20e9);
    assert!((10.5e18..=14.1e18).contains(&budget), "{budget:e}");
}

#[test]
fn more_recursions_mean_fewer_flops_per_token() {
    let per: Vec<f64> = (2..=4).map(|n| mor_report(n, KvMode::RecursionWise).per_token_forward).collect();
    assert!(per[0] > per[1] && per[1] > per[2], "{per:?}");
    let vanilla = forward_flops_per_token(&ModelConfig::vanilla_360m(), 2048).unwrap();
    assert!(per[0] < vanilla.per_token_forward);
}

#[test]
fn full_capacity_recursive_model_matches_unrolled_vanilla() {
    let cfg = mor_360m(2);
    let caps = vec![Ratio::from_integer(1); 2];
    let m = mor_flops_per_token(&cfg, &caps, KvMode::RecursionWise, None, 2048).unwrap();
    let v = forward_flops_per_token(&ModelConfig::vanilla_360m(), 2048).unwrap();
    assert!((m.per_token_forward - v.per_token_forward).abs() < 1e-9 * v.per_token_forward);
}

#[test]
fn capacity_count_mismatch_is_rejected() {
    let caps = capacity_schedule(3).unwrap();
    assert!(mor_flops_per_token(&mor_360m(2), &caps, KvMode::RecursionWise, None, 2048).is_err());
}

fn caps_strategy() -> impl Strategy<Value = (usize, Vec<Ratio<usize>>)> {
    prop_oneof![Just(2usize), Just(3), Just(4), Just(5)].prop_flat_map(|n| {
        (Just(n), prop::collection::vec(1usize..=16, n)).prop_map(|(n, mut nums)| {
            nums.sort_unstable_by(|a, b| b.cmp(a));
            (n, nums.into_iter().map(|k| Ratio::new(k, 16)).collect())
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn recursion_wise_attention_never_exceeds_sharing(
        (n, caps) in caps_strategy(),
        t in 1usize..8192,
    ) {
        let cfg = ModelConfig::vanilla_360m().with_recursion(2 + 2 * n, n, Sharing::MiddleCycle);
        let rw = mor_flops_per_token(&cfg, &caps, KvMode::RecursionWise, None, t).unwrap();
        let sh = mor_flops_per_token(&cfg, &caps, KvMode::RecursiveSharing, None, t).unwrap();
        let hy = mor_flops_per_token(&cfg, &caps, KvMode::Hybrid, None, t).unwrap();
        prop_assert!(rw.attention_part <= sh.attention_part * (1.0 + 1e-12));
        prop_assert_eq!(sh.attention_part, hy.attention_part);
        // sharing skips the K/V projection beyond depth one
        prop_assert!(sh.linear_part <= rw.linear_part);
    }

    #[test]
    fn flops_grow_with_context_and_capacity(
        (n, caps) in caps_strategy(),
        t in 1usize..8192,
        dt in 1usize..1024,
    ) {
        let cfg = ModelConfig::vanilla_360m().with_recursion(2 + 2 * n, n, Sharing::MiddleCycle);
        for mode in [KvMode::RecursionWise, KvMode::RecursiveSharing, KvMode::Hybrid] {
            let a = mor_flops_per_token(&cfg, &caps, mode, None, t).unwrap();
            let b = mor_flops_per_token(&cfg, &caps, mode, None, t + dt).unwrap();
            prop_assert!(b.per_token_forward > a.per_token_forward);
            let full = vec![Ratio::from_integer(1); n];
            let c = mor_flops_per_token(&cfg, &full, mode, None, t).unwrap();
            prop_assert!(c.per_token_forward >= a.per_token_forward);
        }
    }
}
