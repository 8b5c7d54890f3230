//! Trains the byte-level toy model with expert-choice routing and prints
//! the metrics CSV followed by the final evaluation.
//!
//! cargo run --example train_toy -- [steps] [aux_coeff]

use mor::model::{Model, ModelConfig};
use mor::routing::{AuxScheme, RouterConfig};
use mor::train::{TrainConfig, Trainer};

fn main() -> mor::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut router = RouterConfig::expert_choice();
    if let Some(c) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        router.aux = AuxScheme::AuxLoss(c);
    }
    let model = Model::new(ModelConfig::toy(), Some(router), 0)?;
    let mut trainer = Trainer::new(model, TrainConfig::toy(steps))?;
    let t0 = std::time::Instant::now();
    let (first, last) = trainer.fit(0, &mut std::io::stdout())?;
    eprintln!("{:.3} s/step", t0.elapsed().as_secs_f64() / steps as f64);
    println!("step-0 nll {:.4}", first.nll);
    println!("{}", serde_json::to_string_pretty(&last)?);
    Ok(())
}
