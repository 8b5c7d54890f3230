//! Saves a model in both precisions, reloads it and reports file sizes and
//! the largest parameter change.

use mor::model::{Model, ModelConfig};
use mor::routing::RouterConfig;
use mor::train::checkpoint::{load, save, Precision};

fn main() -> mor::Result<()> {
    let model = Model::new(ModelConfig::toy(), Some(RouterConfig::expert_choice()), 0)?;
    let dir = std::env::temp_dir().join("mor-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    for (precision, name) in [(Precision::F64, "model-f64.ckpt"), (Precision::F32, "model-f32.ckpt")] {
        let path = dir.join(name);
        save(&model, &path, precision)?;
        let back = load(&path)?;
        let worst = model
            .params
            .iter()
            .zip(back.params.iter())
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        println!("{precision:?}: {} bytes, max |Δparam| {worst:.3e}", std::fs::metadata(&path)?.len());
    }
    Ok(())
}
