//! Recursion routing: expert-choice selection, token-choice assignment,
//! router heads and every router loss.

mod head;
mod loss;
mod mask;

pub use head::RouterHead;
pub use loss::{
    aux_loss, aux_router_loss, balancing_loss, balancing_loss_value, bce_value, z_loss,
    z_loss_value,
};
pub use mask::SelectionMask;

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    ExpertChoice,
    TokenChoice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadArch {
    Linear,
    /// Two layers with GELU, hidden width d_model.
    Mlp,
    /// Two layers with GELU, hidden width 4·d_model.
    WideMlp,
}

/// How expert-choice routing stays causal at inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AuxScheme {
    /// BCE on the router's own scores with this coefficient.
    AuxLoss(f64),
    /// A separate head trained on detached inputs.
    AuxRouter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub family: Family,
    pub activation: Activation,
    pub head: HeadArch,
    /// Scale applied to activated scores before they gate the update.
    pub alpha: f64,
    pub aux: AuxScheme,
    pub balance_coeff: f64,
    pub zloss_coeff: f64,
    /// Loss-free bias update rate u; zero disables the bias.
    pub lossfree_rate: f64,
    pub inference_threshold: f64,
}

impl RouterConfig {
    pub fn expert_choice() -> Self {
        Self {
            family: Family::ExpertChoice,
            activation: Activation::Sigmoid,
            head: HeadArch::Linear,
            alpha: 0.1,
            aux: AuxScheme::AuxLoss(0.001),
            balance_coeff: 0.0,
            zloss_coeff: 0.0,
            lossfree_rate: 0.0,
            inference_threshold: 0.5,
        }
    }

    pub fn token_choice() -> Self {
        Self {
            family: Family::TokenChoice,
            activation: Activation::Softmax,
            head: HeadArch::Linear,
            alpha: 1.0,
            aux: AuxScheme::AuxLoss(0.0),
            balance_coeff: 0.1,
            zloss_coeff: 1e-3,
            lossfree_rate: 0.0,
            inference_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.family, self.activation) {
            (Family::ExpertChoice, Activation::Softmax) => {
                return Err(Error::Config(
                    "expert-choice routers produce one score per token; use sigmoid or tanh".into(),
                ))
            }
            (Family::TokenChoice, Activation::Tanh) => {
                return Err(Error::Config(
                    "token-choice routers need softmax or sigmoid scores".into(),
                ))
            }
            _ => {}
        }
        let aux = match self.aux {
            AuxScheme::AuxLoss(c) => c,
            AuxScheme::AuxRouter => 0.0,
        };
        for (name, v) in [
            ("aux coefficient", aux),
            ("balance_coeff", self.balance_coeff),
            ("zloss_coeff", self.zloss_coeff),
            ("lossfree_rate", self.lossfree_rate),
            ("alpha", self.alpha),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

macro_rules! text_enum {
    ($ty:ty, $($variant:path => $s:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $s),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "`{other}` is not one of: {}",
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(Family, Family::ExpertChoice => "expert-choice", Family::TokenChoice => "token-choice");
text_enum!(Activation, Activation::Sigmoid => "sigmoid", Activation::Tanh => "tanh", Activation::Softmax => "softmax");
text_enum!(HeadArch, HeadArch::Linear => "linear", HeadArch::Mlp => "mlp", HeadArch::WideMlp => "wide-mlp");

/// Linear capacity schedule `[N_r/N_r, …, 1/N_r]`.
pub fn capacity_schedule(recursions: usize) -> Result<Vec<Ratio<usize>>> {
    if recursions == 0 {
        return Err(Error::Config("capacity schedule needs at least one recursion".into()));
    }
    Ok((0..recursions)
        .map(|r| Ratio::new(recursions - r, recursions))
        .collect())
}

/// Tokens a depth may take out of `t`: `⌊capacity · t⌋`.
pub fn capacity_k(capacity: Ratio<usize>, t: usize) -> usize {
    capacity.numer() * t / capacity.denom()
}

/// Result of one expert-choice selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selected {
    pub selected: Vec<bool>,
    /// Fewer live tokens than the capacity allowed.
    pub shortfall: bool,
}

/// Top-k over live tokens with `k = ⌊capacity · T⌋`; ties go to the lower index.
pub fn expert_choice_select(scores: &[f64], live: &[bool], capacity: Ratio<usize>) -> Selected {
    assert_eq!(scores.len(), live.len());
    let k = capacity_k(capacity, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).filter(|&t| live[t]).collect();
    let shortfall = order.len() < k;
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected = vec![false; scores.len()];
    for &t in order.iter().take(k) {
        selected[t] = true;
    }
    Selected {
        selected,
        shortfall,
    }
}

/// Assigned depth (1-based) per token from its `N_r` scores. The bias shifts
/// only the arg-max.
pub fn token_choice_assign(scores: &[f64], recursions: usize, bias: Option<&[f64]>) -> Vec<usize> {
    scores
        .chunks(recursions)
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &g) in row.iter().enumerate() {
                let v = g + bias.map_or(0.0, |b| b[j]);
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best + 1
        })
        .collect()
}

/// `b_i ← b_i + u · sign(c̄ − c_i)` with `sign(0) = 0`.
pub fn lossfree_bias_update(counts: &[usize], bias: &mut [f64], rate: f64) {
    if counts.is_empty() {
        return;
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    for (b, &c) in bias.iter_mut().zip(counts) {
        let e = mean - c as f64;
        if e != 0.0 {
            *b += rate * e.signum();
        }
    }
}
