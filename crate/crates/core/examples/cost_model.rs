//! Closed-form KV memory, KV IO and attention FLOPs ratios of each caching
//! mode against a vanilla transformer, as exact fractions.
//!
//! cargo run --example cost_model -- [k] [n_ctx]

use mor::kv_cache::{cost_model, KvMode};

fn main() -> mor::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().ok());
    let k = args.next().flatten().unwrap_or(1024);
    let n_ctx = args.next().flatten().unwrap_or(2048);
    println!("k = {k}, N_ctx = {n_ctx}");
    println!("{:>4} {:<18} {:>10} {:>10} {:>10}", "N_r", "mode", "memory", "io", "attn");
    for n in 1..=8 {
        for mode in [KvMode::RecursionWise, KvMode::RecursiveSharing, KvMode::Hybrid] {
            let c = cost_model(n, k, n_ctx, mode)?;
            println!("{n:>4} {:<18} {:>10} {:>10} {:>10}", mode.to_string(), c.kv_memory.to_string(), c.kv_io.to_string(), c.attn_flops.to_string());
        }
    }
    Ok(())
}
