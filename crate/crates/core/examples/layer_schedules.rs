//! Unrolled block ids of every parameter-sharing strategy.
//!
//! cargo run --example layer_schedules -- [layers] [recursions]

use mor::model::{build_layer_schedule, ModelConfig, Sharing};

fn main() {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().ok());
    let l = args.next().flatten().unwrap_or(9);
    let n = args.next().flatten().unwrap_or(3);
    for sharing in Sharing::ALL {
        let recursions = if sharing == Sharing::None { 1 } else { n };
        let cfg = ModelConfig::toy().with_recursion(l, recursions, sharing);
        match build_layer_schedule(&cfg) {
            Ok(s) => println!("{:<16} {:?} ({} distinct)", sharing.to_string(), s.blocks, s.distinct()),
            Err(e) => println!("{:<16} {e}", sharing.to_string()),
        }
    }
}
