//! Maximum batch sizes under the accelerator memory model and the relative
//! batch obtained by scaling a base of 32 slots.

use mor::kv_cache::KvMode;
use mor::model::{ModelConfig, Sharing};
use mor::sim::{max_batch_size, relative_max_batch, MemoryModel};

fn main() -> mor::Result<()> {
    let mem = MemoryModel::default();
    let base = ModelConfig::vanilla_360m();
    for n in 2..=4 {
        let l = if n == 4 { 34 } else { 32 };
        let vanilla = base.with_recursion(l, 1, Sharing::None);
        let routed = base.with_recursion(l, n, Sharing::MiddleCycle);
        print!("MoR-{n} (L={l}): vanilla max {}", max_batch_size(&vanilla, KvMode::RecursionWise, &mem)?);
        for mode in [KvMode::RecursionWise, KvMode::RecursiveSharing] {
            print!(
                ", {mode} max {} relative {}",
                max_batch_size(&routed, mode, &mem)?,
                relative_max_batch(32, &vanilla, &routed, mode, &mem)?
            );
        }
        println!();
    }
    Ok(())
}
