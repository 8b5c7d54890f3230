use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{cost_model, KvMode};
use crate::model::{count_parameters, ModelConfig};

/// Device memory available to weights and caches. Hidden states are not counted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub vram_bytes: f64,
    pub bytes_per_value: f64,
    /// Cache length reserved per sequence.
    pub seq_len: usize,
}

impl Default for MemoryModel {
    /// One 80 GB accelerator holding bf16 weights and a static 2048-position cache.
    fn default() -> Self {
        Self {
            vram_bytes: 80e9,
            bytes_per_value: 2.0,
            seq_len: 2048,
        }
    }
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Sequences that fit next to the unique parameters, with the per-sequence
/// cache scaled by the mode's memory ratio (exactly one for `N_r = 1`).
pub fn max_batch_size(cfg: &ModelConfig, kv_mode: KvMode, mem: &MemoryModel) -> Result<usize> {
    let p = count_parameters(cfg)?;
    let param_bytes = (p.unique_non_embedding + p.embedding) as f64 * mem.bytes_per_value;
    let n = cfg.recursions as u64;
    let ratio = ratio_f64(cost_model(n, 0, 1, kv_mode)?.kv_memory);
    let per_seq = (cfg.total_layers * 2 * cfg.kv_width() * mem.seq_len) as f64 * mem.bytes_per_value * ratio;
    slots_for(mem.vram_bytes, param_bytes, per_seq)
}

/// `⌊(budget − params) / per_sequence⌋`.
pub fn slots_for(budget: f64, param_bytes: f64, per_sequence: f64) -> Result<usize> {
    if budget <= param_bytes || per_sequence <= 0.0 {
        return Err(Error::Infeasible(format!(
            "budget {budget:.3e} with {param_bytes:.3e} bytes of parameters and {per_sequence:.3e} per sequence"
        )));
    }
    Ok(((budget - param_bytes) / per_sequence).floor() as usize)
}

/// `base` slots scaled by the ratio of the routed model's maximum batch to
/// the reference model's, floored.
pub fn relative_max_batch(
    base: usize,
    reference: &ModelConfig,
    routed: &ModelConfig,
    kv_mode: KvMode,
    mem: &MemoryModel,
) -> Result<usize> {
    let r = max_batch_size(reference, KvMode::RecursionWise, mem)?;
    let m = max_batch_size(routed, kv_mode, mem)?;
    Ok((base as f64 * m as f64 / r as f64).floor() as usize)
}
