//! Forward-pass FLOPs per token: two FLOPs per parameter for every linear
//! map, causal-only attention products, and the LM head. Normalisation,
//! nonlinearities and the embedding gather cost nothing.

use num_rational::Ratio;
use serde::Serialize;

use crate::kv_cache::KvMode;
use crate::model::{count_parameters, BlockParams, ModelConfig};
use crate::routing::{AuxScheme, Family, HeadArch, RouterConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub per_token_forward: f64,
    pub linear_part: f64,
    pub attention_part: f64,
    pub lm_head_part: f64,
    pub router_part: f64,
}

impl FlopsReport {
    pub fn without_lm_head(&self) -> f64 {
        self.per_token_forward - self.lm_head_part
    }

    /// Forward plus a backward costed at twice the forward.
    pub fn per_token_training(&self) -> f64 {
        3.0 * self.per_token_forward
    }

    pub fn tokens_for_budget(&self, budget: f64) -> f64 {
        budget / self.per_token_forward
    }

    pub fn budget_for_tokens(&self, tokens: f64) -> f64 {
        tokens * self.per_token_forward
    }

    fn build(linear: f64, attention: f64, lm_head: f64, router: f64) -> Self {
        Self {
            per_token_forward: linear + attention + lm_head + router,
            linear_part: linear,
            attention_part: attention,
            lm_head_part: lm_head,
            router_part: router,
        }
    }
}

/// Attention FLOPs of one layer for one query that sees `keys` keys:
/// `QKᵀ` and the value mix, each `2·n_heads·d_head` per key.
fn attention_per_query(cfg: &ModelConfig, keys: f64) -> f64 {
    2.0 * 2.0 * (cfg.n_heads * cfg.d_head) as f64 * keys
}

pub fn forward_flops_per_token(cfg: &ModelConfig, seq_len: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    let p = count_parameters(cfg)?;
    let linear = 2.0 * p.non_embedding as f64;
    let attention = cfg.total_layers as f64 * attention_per_query(cfg, (seq_len as f64 + 1.0) / 2.0);
    let lm_head = 2.0 * (cfg.d_model * cfg.vocab_size) as f64;
    Ok(FlopsReport::build(linear, attention, lm_head, 0.0))
}

fn head_params(d: usize, out: usize, arch: HeadArch) -> usize {
    let hidden = match arch {
        HeadArch::Linear => return d * out + out,
        HeadArch::Mlp => d,
        HeadArch::WideMlp => 4 * d,
    };
    d * hidden + hidden + hidden * out + out
}

/// Per-token FLOPs of a routed model whose depth `r` processes the fraction
/// `capacities[r-1]` of tokens. Token-choice models are costed under
/// perfect balancing, which gives the same fractions as the linear schedule.
pub fn mor_flops_per_token(
    cfg: &ModelConfig,
    capacities: &[Ratio<usize>],
    kv_mode: KvMode,
    router: Option<&RouterConfig>,
    seq_len: usize,
) -> Result<FlopsReport> {
    cfg.validate()?;
    if capacities.len() != cfg.recursions {
        return Err(Error::Config(format!(
            "{} capacities for {} recursions",
            capacities.len(),
            cfg.recursions
        )));
    }
    let t = seq_len as f64;
    let per_block = BlockParams::count(cfg) as f64;
    let kv_proj = (2 * cfg.d_model * cfg.kv_width()) as f64;
    let unique = (cfg.prefix_layers() + cfg.suffix_layers()) as f64;
    let chunk = cfg.layers_per_step() as f64;

    let mut linear = 2.0 * (unique * per_block + cfg.d_model as f64);
    let mut attention = unique * attention_per_query(cfg, (t + 1.0) / 2.0);
    for (r, cap) in capacities.iter().enumerate() {
        let c = *cap.numer() as f64 / *cap.denom() as f64;
        let mut block = per_block;
        if r > 0 && !kv_mode.projects_at(r + 1) {
            block -= kv_proj;
        }
        linear += 2.0 * chunk * block * c;
        let keys = match kv_mode {
            KvMode::RecursionWise => (c * t + 1.0) / 2.0,
            KvMode::RecursiveSharing | KvMode::Hybrid if r == 0 => (c * t + 1.0) / 2.0,
            KvMode::RecursiveSharing | KvMode::Hybrid => (t + 1.0) / 2.0,
        };
        attention += chunk * c * attention_per_query(cfg, keys);
    }

    let mut router_flops = 0.0;
    if let Some(rc) = router {
        match rc.family {
            Family::ExpertChoice => {
                let per = head_params(cfg.d_model, 1, rc.head) as f64;
                let heads = if rc.aux == AuxScheme::AuxRouter { 2.0 } else { 1.0 };
                let mut live = 1.0;
                for cap in capacities {
                    router_flops += 2.0 * heads * per * live;
                    live = *cap.numer() as f64 / *cap.denom() as f64;
                }
            }
            Family::TokenChoice => {
                router_flops = 2.0 * head_params(cfg.d_model, cfg.recursions, rc.head) as f64;
            }
        }
    }
    let lm_head = 2.0 * (cfg.d_model * cfg.vocab_size) as f64;
    Ok(FlopsReport::build(linear, attention, lm_head, router_flops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::capacity_schedule;

    #[test]
    fn single_key_attention() {
        let cfg = ModelConfig::vanilla_360m();
        let r = forward_flops_per_token(&cfg, 1).unwrap();
        assert_eq!(r.attention_part, 32.0 * 4.0 * 960.0);
    }

    #[test]
    fn doubling_depth_doubles_linear_and_attention() {
        let a = ModelConfig::vanilla_360m();
        let b = ModelConfig {
            total_layers: 64,
            ..a.clone()
        };
        let (ra, rb) = (forward_flops_per_token(&a, 2048).unwrap(), forward_flops_per_token(&b, 2048).unwrap());
        // the final norm is the only non-per-layer linear term
        let fin = 2.0 * 960.0;
        assert_eq!(rb.linear_part - fin, 2.0 * (ra.linear_part - fin));
        assert_eq!(rb.attention_part, 2.0 * ra.attention_part);
    }

    #[test]
    fn degenerate_mor_equals_vanilla() {
        let cfg = ModelConfig::vanilla_360m();
        let caps = capacity_schedule(1).unwrap();
        let m = mor_flops_per_token(&cfg, &caps, KvMode::RecursionWise, None, 2048).unwrap();
        let v = forward_flops_per_token(&cfg, 2048).unwrap();
        assert!((m.per_token_forward - v.per_token_forward).abs() < 1e-6 * v.per_token_forward);
    }
}
