use std::rc::Rc;

use super::Model;
use crate::error::{Error, Result};
use crate::kv_cache::{KvCache, KvMode};
use crate::routing::{token_choice_assign, Activation, AuxScheme, Family};
use crate::tensor::{AttnLayout, Tape, Tensor};

/// Caches and position of one sequence being decoded.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub caches: Vec<KvCache>,
    pub position: usize,
    pub mode: KvMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStep {
    pub logits: Vec<f64>,
    /// Depths the token ran.
    pub depth: usize,
    /// Gate applied at each depth the token ran.
    pub gates: Vec<f64>,
}

impl Model {
    pub fn decode_state(&self, mode: KvMode) -> DecodeState {
        DecodeState {
            caches: self.new_caches(mode),
            position: 0,
            mode,
        }
    }

    /// Continues decoding after a teacher-forced prefill of `prompt`.
    pub fn prefill(&self, prompt: &[usize], mode: KvMode) -> Result<(DecodeState, Vec<f64>)> {
        let mut tape = Tape::new();
        let opts = super::ForwardOptions {
            selection: super::Selection::Threshold,
            kv_mode: mode,
            prefill: true,
            ..Default::default()
        };
        let out = self.forward(&mut tape, prompt, prompt.len(), &opts)?;
        let last = tape.value(out.logits).row(prompt.len() - 1).to_vec();
        Ok((
            DecodeState {
                caches: out.caches,
                position: prompt.len(),
                mode,
            },
            last,
        ))
    }

    /// Runs one token through the model using and extending the caches.
    /// `fixed_depth` overrides the routing decision when given.
    pub fn decode_step(&self, state: &mut DecodeState, token: usize, fixed_depth: Option<usize>) -> Result<DecodeStep> {
        let cfg = &self.cfg;
        let pos = state.position;
        if pos >= cfg.ctx_len {
            return Err(Error::Range {
                position: pos,
                ctx_len: cfg.ctx_len,
            });
        }
        let mut tape = Tape::new();
        let embed = tape.param(&self.params, self.embed);
        let mut x = tape.embedding(embed, &[token])?;
        let pre = cfg.prefix_layers();
        for l in 0..pre {
            x = self.decode_layer(&mut tape, state, l, x)?;
        }
        let h1 = x;
        let n_r = cfg.recursions;
        let family = self.router.as_ref().map(|r| r.family);
        let rc = self.router.as_ref();

        let mut tc_gates = None;
        let mut tc_depth = n_r;
        if family == Some(Family::TokenChoice) {
            let rc = rc.unwrap();
            let logits = self.routers[0].forward(&mut tape, &self.params, h1)?;
            let probs = self.activate(&mut tape, logits)?;
            let bias = (rc.lossfree_rate > 0.0).then_some(&self.lossfree_bias[..]);
            tc_depth = match fixed_depth {
                Some(d) => d.max(1),
                None => token_choice_assign(tape.value(probs).data(), n_r, bias)[0],
            };
            tc_gates = Some(tape.scale(probs, rc.alpha)?);
        }

        let mut gates = Vec::new();
        let mut depth = 0;
        for r in 1..=n_r {
            let (go, gate) = match family {
                None => (fixed_depth.is_none_or(|d| r <= d), None),
                Some(Family::TokenChoice) => {
                    let col = tape.slice_cols(tc_gates.unwrap(), r - 1, r)?;
                    (r <= tc_depth, Some(col))
                }
                Some(Family::ExpertChoice) => {
                    let rc = rc.unwrap();
                    let logits = self.routers[r - 1].forward(&mut tape, &self.params, x)?;
                    let act = self.activate(&mut tape, logits)?;
                    let g = tape.scale(act, rc.alpha)?;
                    let routed = self.capacities[r - 1] < num_rational::Ratio::from_integer(1);
                    let go = match fixed_depth {
                        Some(d) => r <= d,
                        None if !routed => true,
                        None => {
                            let p = if rc.aux == AuxScheme::AuxRouter {
                                let xd = tape.detach(x);
                                let al = self.aux_routers[r - 1].forward(&mut tape, &self.params, xd)?;
                                tape.sigmoid(al)?
                            } else if rc.activation == Activation::Sigmoid {
                                act
                            } else {
                                tape.sigmoid(logits)?
                            };
                            tape.value(p).item() > rc.inference_threshold
                        }
                    };
                    (go, Some(g))
                }
            };
            if !go {
                break;
            }
            depth = r;
            let chunk = cfg.layers_per_step();
            let first = pre + (r - 1) * chunk;
            let mut f = x;
            for l in first..first + chunk {
                f = self.decode_layer(&mut tape, state, l, f)?;
            }
            x = match family {
                None => f,
                Some(Family::ExpertChoice) => {
                    let g = gate.unwrap();
                    gates.push(tape.value(g).item());
                    let upd = tape.scale_rows(f, g)?;
                    tape.index_add_rows(x, upd, &[0])?
                }
                Some(Family::TokenChoice) => {
                    let g = gate.unwrap();
                    gates.push(tape.value(g).item());
                    let scaled = tape.scale_rows(f, g)?;
                    let new = if r == tc_depth {
                        let e = tape.constant(Tensor::full(&[1, 1], 1.0));
                        let res = tape.scale_rows(h1, e)?;
                        tape.add(scaled, res)?
                    } else {
                        scaled
                    };
                    let d = tape.sub(new, x)?;
                    tape.index_add_rows(x, d, &[0])?
                }
            };
            if family == Some(Family::TokenChoice) && r == tc_depth {
                break;
            }
        }

        let region = cfg.layers_per_step() * n_r;
        for l in pre + region..cfg.total_layers {
            x = self.decode_layer(&mut tape, state, l, x)?;
        }
        let logits = self.final_logits(&mut tape, x)?;
        state.position += 1;
        Ok(DecodeStep {
            logits: tape.value(logits).data().to_vec(),
            depth,
            gates,
        })
    }

    fn decode_layer(&self, tape: &mut Tape, state: &mut DecodeState, layer: usize, x: crate::tensor::Var) -> Result<crate::tensor::Var> {
        let ops = self.ops(layer);
        let (slot, depth) = self.cache_slot(layer);
        let pos = state.position;
        let xn = ops.normed(tape, x)?;
        let q = ops.query(tape, xn, &[pos])?;
        let cache = &mut state.caches[slot];
        if cache.mode().projects_at(depth) {
            let (k, v) = ops.key_value(tape, xn, &[pos])?;
            cache.append(depth, pos, tape.value(k).data(), tape.value(v).data())?;
        }
        let view = cache.attend_view(depth, pos)?;
        let keys: Vec<(usize, usize)> = view.tokens.iter().map(|&t| (0, t)).collect();
        let layout = Rc::new(AttnLayout::causal(&[(0, pos)], &keys)?);
        let k = tape.constant(view.keys);
        let v = tape.constant(view.values);
        ops.finish(tape, x, q, k, v, layout)
    }

    /// Greedy continuation of `prompt`; returns new tokens and their depths.
    pub fn generate(&self, prompt: &[usize], n_new: usize, mode: KvMode) -> Result<(Vec<usize>, Vec<usize>)> {
        if prompt.is_empty() {
            return Err(Error::Config("generation needs a non-empty prompt".into()));
        }
        let mut state = self.decode_state(mode);
        let mut last = Vec::new();
        for &t in prompt {
            last = self.decode_step(&mut state, t, None)?.logits;
        }
        let (mut out, mut depths) = (Vec::new(), Vec::new());
        for _ in 0..n_new {
            let next = argmax(&last);
            let step = self.decode_step(&mut state, next, None)?;
            out.push(next);
            depths.push(step.depth);
            last = step.logits;
        }
        Ok((out, depths))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
