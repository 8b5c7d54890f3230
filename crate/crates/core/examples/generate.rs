//! Trains a toy expert-choice model briefly, then decodes greedily with each
//! KV caching mode and prints the continuation, depths and cache sizes.
//!
//! cargo run --example generate -- [steps] [prompt]

use mor::config::RunConfig;
use mor::kv_cache::KvMode;
use mor::model::Model;
use mor::train::tokenizer::{decode, encode};
use mor::train::{TrainConfig, Trainer};

fn main() -> mor::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let prompt = std::env::args().nth(2).unwrap_or_else(|| "4 plus 5 is".into());
    let cfg = RunConfig::toy();
    let model = Model::new(cfg.model.clone(), cfg.router.clone(), 0)?;
    let mut trainer = Trainer::new(model, TrainConfig {
        steps,
        ..cfg.train.clone()
    })?;
    trainer.fit(0, &mut std::io::sink())?;
    let model = trainer.model;
    for mode in [KvMode::RecursionWise, KvMode::RecursiveSharing, KvMode::Hybrid] {
        let (tokens, depths) = model.generate(&encode(&prompt), 48, mode)?;
        let (state, _) = model.prefill(&encode(&prompt), mode)?;
        println!("{mode}: {prompt}{}", decode(&tokens));
        println!("  depths {depths:?}");
        println!("  prompt cache layer 1: {}", state.caches[1].stats_json());
    }
    Ok(())
}
