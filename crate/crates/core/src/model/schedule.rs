use std::collections::BTreeSet;

use super::config::{ModelConfig, Sharing};
use crate::error::Result;

/// Parameter-block id of every unrolled layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSchedule {
    pub blocks: Vec<usize>,
}

impl LayerSchedule {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn distinct(&self) -> usize {
        self.blocks.iter().collect::<BTreeSet<_>>().len()
    }
}

pub fn build_layer_schedule(cfg: &ModelConfig) -> Result<LayerSchedule> {
    cfg.validate()?;
    let (l, n) = (cfg.total_layers, cfg.recursions);
    let blocks = match cfg.sharing {
        Sharing::None => (0..l).collect(),
        Sharing::Cycle => (0..l).map(|i| i % (l / n)).collect(),
        Sharing::Sequence => (0..l).map(|i| i / n).collect(),
        Sharing::MiddleCycle | Sharing::MiddleSequence => {
            let m = (l - 2) / n;
            (0..l)
                .map(|i| match i {
                    0 => 0,
                    _ if i == l - 1 => m + 1,
                    _ if cfg.sharing == Sharing::MiddleCycle => (i - 1) % m + 1,
                    _ => (i - 1) / n + 1,
                })
                .collect()
        }
    };
    Ok(LayerSchedule { blocks })
}

/// Distinct block count implied by the sharing formulas.
pub fn expected_distinct(cfg: &ModelConfig) -> usize {
    let (l, n) = (cfg.total_layers, cfg.recursions);
    match cfg.sharing {
        Sharing::None => l,
        Sharing::Cycle | Sharing::Sequence => l / n,
        Sharing::MiddleCycle | Sharing::MiddleSequence => (l - 2) / n + 2,
    }
}
