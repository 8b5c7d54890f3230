use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How unrolled layers map onto parameter blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sharing {
    Cycle,
    Sequence,
    MiddleCycle,
    MiddleSequence,
    /// Every layer owns its parameters. Requires one recursion.
    None,
}

impl Sharing {
    pub fn is_middle(self) -> bool {
        matches!(self, Sharing::MiddleCycle | Sharing::MiddleSequence)
    }

    pub const ALL: [Sharing; 5] = [
        Sharing::Cycle,
        Sharing::Sequence,
        Sharing::MiddleCycle,
        Sharing::MiddleSequence,
        Sharing::None,
    ];
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sharing::Cycle => "cycle",
            Sharing::Sequence => "sequence",
            Sharing::MiddleCycle => "middle-cycle",
            Sharing::MiddleSequence => "middle-sequence",
            Sharing::None => "none",
        })
    }
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cycle" => Sharing::Cycle,
            "sequence" => Sharing::Sequence,
            "middle-cycle" => Sharing::MiddleCycle,
            "middle-sequence" => Sharing::MiddleSequence,
            "none" => Sharing::None,
            other => return Err(Error::Config(format!("unknown sharing strategy `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Unrolled depth L.
    pub total_layers: usize,
    /// Recursion count N_r.
    pub recursions: usize,
    pub sharing: Sharing,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_inter: usize,
    pub vocab_size: usize,
    pub ctx_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (l, n) = (self.total_layers, self.recursions);
        let bad = |m: String| Err(Error::Config(m));
        if l == 0 || n == 0 {
            return bad(format!("total_layers ({l}) and recursions ({n}) must be positive"));
        }
        match self.sharing {
            Sharing::Cycle | Sharing::Sequence if l % n != 0 => {
                return bad(format!("recursions {n} must divide total_layers {l}"));
            }
            Sharing::MiddleCycle | Sharing::MiddleSequence if l < 3 || (l - 2) % n != 0 => {
                return bad(format!("recursions {n} must divide total_layers - 2 = {}", l as i64 - 2));
            }
            Sharing::None if n != 1 => return bad("sharing `none` requires recursions = 1".into()),
            _ => {}
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "n_heads {} must be a positive multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_head % 2 != 0 {
            return bad(format!("d_head {} must be even for rotary encoding", self.d_head));
        }
        if self.vocab_size == 0 || self.ctx_len == 0 || self.d_inter == 0 {
            return bad("vocab_size, ctx_len and d_inter must be positive".into());
        }
        Ok(())
    }

    /// Unique layers before the recursion region.
    pub fn prefix_layers(&self) -> usize {
        usize::from(self.sharing.is_middle())
    }

    /// Unique layers after the recursion region.
    pub fn suffix_layers(&self) -> usize {
        usize::from(self.sharing.is_middle())
    }

    /// Unrolled layers executed by one recursion step.
    pub fn layers_per_step(&self) -> usize {
        (self.total_layers - self.prefix_layers() - self.suffix_layers()) / self.recursions
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Copy with a different unrolled depth, recursion count and sharing.
    pub fn with_recursion(&self, total_layers: usize, recursions: usize, sharing: Sharing) -> Self {
        Self {
            total_layers,
            recursions,
            sharing,
            ..self.clone()
        }
    }

    fn base(
        total_layers: usize,
        d_model: usize,
        n_heads: usize,
        n_kv_heads: usize,
        d_inter: usize,
    ) -> Self {
        Self {
            total_layers,
            recursions: 1,
            sharing: Sharing::None,
            d_model,
            n_heads,
            n_kv_heads,
            d_head: d_model / n_heads,
            d_inter,
            vocab_size: 49_152,
            ctx_len: 2048,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    pub fn vanilla_135m() -> Self {
        Self::base(30, 576, 9, 3, 1536)
    }

    pub fn vanilla_360m() -> Self {
        Self::base(32, 960, 15, 5, 2560)
    }

    pub fn vanilla_730m() -> Self {
        Self::base(26, 1536, 24, 8, 4096)
    }

    pub fn vanilla_1_7b() -> Self {
        Self::base(24, 2048, 32, 32, 8192)
    }

    /// Byte-level model small enough to train on one CPU core.
    pub fn toy() -> Self {
        Self {
            total_layers: 8,
            recursions: 3,
            sharing: Sharing::MiddleCycle,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            d_inter: 128,
            vocab_size: crate::train::tokenizer::VOCAB_SIZE,
            ctx_len: 256,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }
}
