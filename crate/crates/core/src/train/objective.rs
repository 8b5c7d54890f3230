use crate::error::Result;
use crate::model::{ForwardOutput, Model};
use crate::routing::{self, AuxScheme, Family};
use crate::tensor::{Tape, Var};

/// Loss terms of one forward, each already multiplied by its coefficient.
pub struct LossParts {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

impl LossParts {
    pub fn values(&self, tape: &Tape) -> Vec<(&'static str, f64)> {
        self.terms.iter().map(|&(n, v)| (n, tape.value(v).item())).collect()
    }
}

pub const TERM_NAMES: [&str; 5] = ["lm", "aux", "aux_router", "balance", "z"];

/// LM cross-entropy plus every router term the model's config enables.
pub fn objective(tape: &mut Tape, model: &Model, out: &ForwardOutput, targets: &[usize]) -> Result<LossParts> {
    let lm = tape.cross_entropy(out.logits, targets)?;
    let mut terms = vec![("lm", lm)];
    if let Some(rc) = &model.router {
        let mut aux = Vec::new();
        let mut aux_router = Vec::new();
        let mut z = Vec::new();
        let mut balance = Vec::new();
        match rc.family {
            Family::ExpertChoice => {
                for d in &out.expert {
                    match rc.aux {
                        AuxScheme::AuxLoss(c) if c > 0.0 => aux.push((routing::aux_loss(tape, d.probs, &d.topk)?, c)),
                        AuxScheme::AuxRouter => {
                            if let Some(p) = d.aux_probs {
                                aux_router.push((routing::aux_router_loss(tape, p, &d.topk)?, 1.0));
                            }
                        }
                        _ => {}
                    }
                    if rc.zloss_coeff > 0.0 {
                        z.push((routing::z_loss(tape, d.logits)?, rc.zloss_coeff));
                    }
                }
            }
            Family::TokenChoice => {
                let tc = out.token.as_ref().expect("token-choice trace");
                if rc.balance_coeff > 0.0 {
                    let a: Vec<usize> = tc.assignment.iter().map(|&d| d - 1).collect();
                    balance.push((routing::balancing_loss(tape, tc.probs, &a, rc.balance_coeff)?, 1.0));
                }
                if rc.zloss_coeff > 0.0 {
                    z.push((routing::z_loss(tape, tc.logits)?, rc.zloss_coeff));
                }
            }
        }
        for (name, parts) in [("aux", aux), ("aux_router", aux_router), ("balance", balance), ("z", z)] {
            if parts.is_empty() {
                continue;
            }
            let mut acc: Option<Var> = None;
            for (v, c) in parts {
                let s = if c == 1.0 { v } else { tape.scale(v, c)? };
                acc = Some(match acc {
                    Some(a) => tape.add(a, s)?,
                    None => s,
                });
            }
            terms.push((name, acc.unwrap()));
        }
    }
    let mut total = terms[0].1;
    for &(_, v) in &terms[1..] {
        total = tape.add(total, v)?;
    }
    Ok(LossParts { total, terms })
}
