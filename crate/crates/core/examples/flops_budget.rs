//! Per-token forward FLOPs and the token count a fixed budget buys, for the
//! vanilla bases and their expert-choice MoR counterparts.
//!
//! cargo run --example flops_budget -- [budget]

use mor::flops::{forward_flops_per_token, mor_flops_per_token};
use mor::kv_cache::KvMode;
use mor::model::{ModelConfig, Sharing};
use mor::routing::{capacity_schedule, RouterConfig};

fn main() -> mor::Result<()> {
    let budget: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16.5e18);
    let bases = [
        ("135m", ModelConfig::vanilla_135m()),
        ("360m", ModelConfig::vanilla_360m()),
        ("730m", ModelConfig::vanilla_730m()),
        ("1.7b", ModelConfig::vanilla_1_7b()),
    ];
    println!("{:<12} {:>14} {:>14} {:>12}", "model", "FLOPs/token", "no LM head", "tokens (B)");
    for (name, base) in bases {
        let v = forward_flops_per_token(&base, 2048)?;
        println!("{:<12} {:>14.4e} {:>14.4e} {:>12.2}", format!("vanilla-{name}"), v.per_token_forward, v.without_lm_head(), v.tokens_for_budget(budget) / 1e9);
        for n in 2..=4 {
            let l = (base.total_layers..).find(|&x| (x - 2) % n == 0).unwrap();
            let cfg = base.with_recursion(l, n, Sharing::MiddleCycle);
            let r = mor_flops_per_token(&cfg, &capacity_schedule(n)?, KvMode::RecursionWise, Some(&RouterConfig::expert_choice()), 2048)?;
            println!("{:<12} {:>14.4e} {:>14.4e} {:>12.2}", format!("mor-{name}-{n}"), r.per_token_forward, r.without_lm_head(), r.tokens_for_budget(budget) / 1e9);
        }
    }
    Ok(())
}
