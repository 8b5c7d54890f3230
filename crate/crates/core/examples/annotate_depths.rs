//! Trains a toy expert-choice model and shows how many recursion steps
//! the router gives each byte of a sentence.
//!
//! cargo run --example annotate_depths -- [steps] [text]

use mor::config::RunConfig;
use mor::model::Model;
use mor::train::eval::{depth_annotation, render_annotation};
use mor::train::{TrainConfig, Trainer};

fn main() -> mor::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let text = std::env::args()
        .nth(2)
        .unwrap_or_else(|| "the small dog sees a red ball. 12 plus 9 is 21.".into());
    let cfg = RunConfig::toy();
    let model = Model::new(cfg.model.clone(), cfg.router.clone(), 0)?;
    let mut trainer = Trainer::new(model, TrainConfig { steps, ..cfg.train })?;
    trainer.fit(0, &mut std::io::sink())?;
    let ann = depth_annotation(&trainer.model, &text)?;
    println!("{}", render_annotation(&ann));
    let mut hist = vec![0; trainer.model.cfg.recursions];
    for (_, d) in &ann {
        hist[d - 1] += 1;
    }
    println!("depth histogram {hist:?}");
    Ok(())
}
