//! Continuous depth-wise batching against the sequence-wise baseline on a
//! proxy workload, plus a sweep over the early-exit fraction.
//!
//! cargo run --example depthwise_batching -- [slots]

use mor::sim::{check_trace, simulate_depthwise, simulate_sequencewise, DepthSource, SimConfig, WorkloadSpec};

fn main() -> mor::Result<()> {
    let slots: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    for n in 2..=4 {
        let spec = WorkloadSpec {
            recursions: n,
            ..Default::default()
        };
        let w = spec.generate()?;
        let cfg = SimConfig {
            record_trace: true,
            ..SimConfig::new(slots, n)
        };
        let d = simulate_depthwise(&w, &cfg)?;
        check_trace(&w, &cfg, &d)?;
        let s = simulate_sequencewise(&w, &cfg)?;
        println!(
            "N_r={n}: depth-wise {:.3} tokens/step (occupancy {:.3}), sequence-wise {:.3}, speedup {:.3}",
            d.stats.tokens_per_step,
            d.stats.occupancy,
            s.stats.tokens_per_step,
            d.stats.tokens_per_step / s.stats.tokens_per_step
        );
        let sweep: Vec<String> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&f| {
                let w = WorkloadSpec {
                    depths: DepthSource::EarlyExit { fraction: f },
                    ..spec.clone()
                }
                .generate()?;
                Ok(format!("{f}: {:.3}", simulate_depthwise(&w, &cfg)?.stats.tokens_per_step))
            })
            .collect::<mor::Result<_>>()?;
        println!("    early-exit sweep {}", sweep.join(", "));
    }
    Ok(())
}
