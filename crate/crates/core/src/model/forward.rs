use std::collections::HashMap;
use std::rc::Rc;

use num_rational::Ratio;

use super::Model;
use crate::error::{Error, Result};
use crate::kv_cache::{KvCache, KvMode};
use crate::routing::{expert_choice_select, token_choice_assign, AuxScheme, Family, SelectionMask};
use crate::tensor::{AttnLayout, Tape, Tensor, Var};

/// How expert-choice depths pick their tokens.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    /// Per-sequence top-k over live tokens (training).
    TopK,
    /// Per-token threshold rule, causal (inference).
    Threshold,
    /// Replay a recorded mask. Also fixes token-choice depths.
    Fixed(SelectionMask),
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub selection: Selection,
    pub kv_mode: KvMode,
    /// Stop every token after this many depths.
    pub max_depth: Option<usize>,
    /// Keep per-layer key/value tensors in the output.
    pub record_kv: bool,
    /// Fill decode caches; single sequence only.
    pub prefill: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            selection: Selection::TopK,
            kv_mode: KvMode::RecursionWise,
            max_depth: None,
            record_kv: false,
            prefill: false,
        }
    }
}

/// Expert-choice router state at one depth.
#[derive(Clone, Debug)]
pub struct DepthTrace {
    pub depth: usize,
    /// Rows scored at this depth.
    pub live: Vec<usize>,
    /// Raw router logits, `live × 1`.
    pub logits: Var,
    /// Selection probability `sigmoid(logit)`, `live × 1`.
    pub probs: Var,
    pub aux_probs: Option<Var>,
    /// Per live row.
    pub selected: Vec<bool>,
    /// Teacher-forced top-k membership per live row.
    pub topk: Vec<bool>,
    /// False when capacity is one and every live token passes.
    pub routed: bool,
}

#[derive(Clone, Debug)]
pub struct TokenChoiceTrace {
    /// `n × N_r` router logits.
    pub logits: Var,
    /// Activated scores before α scaling.
    pub probs: Var,
    /// Arg-max depth per row, 1-based, before any clamp.
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LayerKv {
    pub layer: usize,
    pub depth: usize,
    pub rows: Vec<usize>,
    pub keys: Tensor,
    pub values: Tensor,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub mask: SelectionMask,
    pub expert: Vec<DepthTrace>,
    pub token: Option<TokenChoiceTrace>,
    pub kv: Vec<LayerKv>,
    pub caches: Vec<KvCache>,
    pub shortfall: bool,
}

struct SharedKv {
    k: Var,
    v: Var,
}

struct Run<'a> {
    seq_len: usize,
    positions: Vec<usize>,
    opts: &'a ForwardOptions,
    shared: HashMap<usize, SharedKv>,
    depth1_rows: Vec<usize>,
    kv: Vec<LayerKv>,
    caches: Vec<KvCache>,
}

impl Run<'_> {
    fn keys(&self, rows: &[usize]) -> Vec<(usize, usize)> {
        rows.iter().map(|&r| (r / self.seq_len, r % self.seq_len)).collect()
    }

    fn layout(&self, queries: &[usize], keys: &[usize]) -> Result<Rc<AttnLayout>> {
        Ok(Rc::new(AttnLayout::causal(&self.keys(queries), &self.keys(keys))?))
    }
}

impl Model {
    /// Teacher-forced forward over `tokens.len() / seq_len` sequences.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize], seq_len: usize, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            return Err(Error::shape(
                "forward",
                format!("{} tokens do not split into sequences of {seq_len}", tokens.len()),
            ));
        }
        if seq_len > cfg.ctx_len {
            return Err(Error::Range {
                position: seq_len - 1,
                ctx_len: cfg.ctx_len,
            });
        }
        let n = tokens.len();
        if opts.prefill && n != seq_len {
            return Err(Error::Config("prefill takes a single sequence".into()));
        }
        let n_r = cfg.recursions;
        let max_depth = opts.max_depth.unwrap_or(n_r).min(n_r);
        let mut run = Run {
            seq_len,
            positions: (0..n).map(|i| i % seq_len).collect(),
            opts,
            shared: HashMap::new(),
            depth1_rows: Vec::new(),
            kv: Vec::new(),
            caches: if opts.prefill { self.new_caches(opts.kv_mode) } else { Vec::new() },
        };
        let all: Vec<usize> = (0..n).collect();
        let full_layout = run.layout(&all, &all)?;

        let embed = tape.param(&self.params, self.embed);
        let mut x = tape.embedding(embed, tokens)?;
        let pre = cfg.prefix_layers();
        for l in 0..pre {
            x = self.layer(tape, &mut run, l, x, &all, &full_layout)?;
        }
        let h1 = x;

        let mut mask = SelectionMask::new(n, n_r);
        let mut expert = Vec::new();
        let mut shortfall = false;
        let family = self.router.as_ref().map(|r| r.family);

        let token = if family == Some(Family::TokenChoice) {
            let logits = self.routers[0].forward(tape, &self.params, h1)?;
            let probs = self.activate(tape, logits)?;
            let bias = (self.router.as_ref().unwrap().lossfree_rate > 0.0).then_some(&self.lossfree_bias[..]);
            let assignment = match &opts.selection {
                Selection::Fixed(m) => (0..n).map(|t| m.depth(t).max(1)).collect(),
                _ => token_choice_assign(tape.value(probs).data(), n_r, bias),
            };
            Some(TokenChoiceTrace {
                logits,
                probs,
                assignment,
            })
        } else {
            None
        };
        let tc_gates = match &token {
            Some(tc) => Some(tape.scale(tc.probs, self.router.as_ref().unwrap().alpha)?),
            None => None,
        };

        let mut live = all.clone();
        for r in 1..=max_depth {
            if live.is_empty() {
                break;
            }
            let cap = self.capacities[r - 1];
            let (selected, gate): (Vec<usize>, Option<Var>) = match family {
                None => (live.clone(), None),
                Some(Family::TokenChoice) => {
                    let tc = token.as_ref().unwrap();
                    let sel: Vec<usize> = live
                        .iter()
                        .copied()
                        .filter(|&t| tc.assignment[t].min(max_depth) >= r)
                        .collect();
                    let col = tape.slice_cols(tc_gates.unwrap(), r - 1, r)?;
                    let g = tape.gather_rows(col, &sel)?;
                    for &t in &sel {
                        mask.set_score(t, r - 1, tape.value(col).data()[t]);
                    }
                    (sel, Some(g))
                }
                Some(Family::ExpertChoice) => {
                    let (trace, g_live, short) = self.expert_depth(tape, &run, x, &live, r, cap)?;
                    shortfall |= short;
                    let mut sel = Vec::new();
                    let mut pick = Vec::new();
                    for (i, &t) in live.iter().enumerate() {
                        mask.set_score(t, r - 1, tape.value(g_live).data()[i]);
                        if trace.selected[i] {
                            sel.push(t);
                            pick.push(i);
                        }
                    }
                    let g = tape.gather_rows(g_live, &pick)?;
                    expert.push(trace);
                    (sel, Some(g))
                }
            };
            for &t in &selected {
                mask.set(t, r - 1, true);
            }
            if selected.is_empty() {
                break;
            }
            if r == 1 {
                run.depth1_rows = selected.clone();
            }
            let xs = if selected.len() == n { x } else { tape.gather_rows(x, &selected)? };
            let f = self.recursion_step(tape, &mut run, r, xs, &selected)?;
            x = match family {
                None => {
                    if selected.len() == n {
                        f
                    } else {
                        let d = tape.sub(f, xs)?;
                        tape.index_add_rows(x, d, &selected)?
                    }
                }
                Some(Family::ExpertChoice) => {
                    let upd = tape.scale_rows(f, gate.unwrap())?;
                    tape.index_add_rows(x, upd, &selected)?
                }
                Some(Family::TokenChoice) => {
                    let tc = token.as_ref().unwrap();
                    let scaled = tape.scale_rows(f, gate.unwrap())?;
                    let exits: Vec<f64> = selected
                        .iter()
                        .map(|&t| f64::from(u8::from(tc.assignment[t].min(max_depth) == r)))
                        .collect();
                    let new = if exits.iter().any(|&e| e > 0.0) {
                        let e = tape.constant(Tensor::new(vec![selected.len(), 1], exits)?);
                        let h1s = tape.gather_rows(h1, &selected)?;
                        let res = tape.scale_rows(h1s, e)?;
                        tape.add(scaled, res)?
                    } else {
                        scaled
                    };
                    let d = tape.sub(new, xs)?;
                    tape.index_add_rows(x, d, &selected)?
                }
            };
            live = selected;
        }

        let region = cfg.layers_per_step() * n_r;
        for l in pre + region..cfg.total_layers {
            x = self.layer(tape, &mut run, l, x, &all, &full_layout)?;
        }
        let logits = self.final_logits(tape, x)?;
        Ok(ForwardOutput {
            logits,
            mask,
            expert,
            token,
            kv: run.kv,
            caches: run.caches,
            shortfall,
        })
    }

    /// Scores live rows at depth `r` and decides who continues.
    fn expert_depth(
        &self,
        tape: &mut Tape,
        run: &Run<'_>,
        x: Var,
        live: &[usize],
        r: usize,
        cap: Ratio<usize>,
    ) -> Result<(DepthTrace, Var, bool)> {
        let rc = self.router.as_ref().unwrap();
        let h = if live.len() == tape.value(x).rows() { x } else { tape.gather_rows(x, live)? };
        let logits = self.routers[r - 1].forward(tape, &self.params, h)?;
        let act = self.activate(tape, logits)?;
        let probs = if rc.activation == crate::routing::Activation::Sigmoid { act } else { tape.sigmoid(logits)? };
        let g = tape.scale(act, rc.alpha)?;
        let aux_probs = if rc.aux == AuxScheme::AuxRouter {
            let hd = tape.detach(h);
            let al = self.aux_routers[r - 1].forward(tape, &self.params, hd)?;
            Some(tape.sigmoid(al)?)
        } else {
            None
        };
        let routed = cap < Ratio::from_integer(1);

        // top-k membership, computed per sequence over full-length arrays
        let mut topk = vec![true; live.len()];
        let mut shortfall = false;
        if routed {
            let gv = tape.value(g).data();
            let t = run.seq_len;
            let mut i = 0;
            while i < live.len() {
                let seq = live[i] / t;
                let start = i;
                while i < live.len() && live[i] / t == seq {
                    i += 1;
                }
                let mut scores = vec![f64::NEG_INFINITY; t];
                let mut alive = vec![false; t];
                for j in start..i {
                    scores[live[j] % t] = gv[j];
                    alive[live[j] % t] = true;
                }
                let s = expert_choice_select(&scores, &alive, cap);
                shortfall |= s.shortfall;
                for j in start..i {
                    topk[j] = s.selected[live[j] % t];
                }
            }
        }
        let selected = if !routed {
            vec![true; live.len()]
        } else {
            match &run.opts.selection {
                Selection::TopK => topk.clone(),
                Selection::Threshold => {
                    let p = aux_probs.unwrap_or(probs);
                    tape.value(p).data().iter().map(|&v| v > rc.inference_threshold).collect()
                }
                Selection::Fixed(m) => live.iter().map(|&t| m.get(t, r - 1)).collect(),
            }
        };
        Ok((
            DepthTrace {
                depth: r,
                live: live.to_vec(),
                logits,
                probs,
                aux_probs,
                selected,
                topk,
                routed,
            },
            g,
            shortfall,
        ))
    }

    /// Runs the layers of recursion step `r` on the rows `rows` (values `xs`).
    fn recursion_step(&self, tape: &mut Tape, run: &mut Run<'_>, r: usize, xs: Var, rows: &[usize]) -> Result<Var> {
        let chunk = self.cfg.layers_per_step();
        let first = self.cfg.prefix_layers() + (r - 1) * chunk;
        let mode = run.opts.kv_mode;
        let layout = if r == 1 || mode == KvMode::RecursionWise {
            run.layout(rows, rows)?
        } else {
            let d1 = run.depth1_rows.clone();
            run.layout(rows, &d1)?
        };
        let mut h = xs;
        for l in first..first + chunk {
            h = self.layer(tape, run, l, h, rows, &layout)?;
        }
        Ok(h)
    }

    /// One unrolled layer over `rows`, attending according to the cache mode.
    fn layer(&self, tape: &mut Tape, run: &mut Run<'_>, layer: usize, x: Var, rows: &[usize], layout: &Rc<AttnLayout>) -> Result<Var> {
        let ops = self.ops(layer);
        let (slot, depth) = self.cache_slot(layer);
        let mode = run.opts.kv_mode;
        let pos: Vec<usize> = rows.iter().map(|&r| run.positions[r]).collect();
        let xn = ops.normed(tape, x)?;
        let q = ops.query(tape, xn, &pos)?;
        let (k, v) = if mode.projects_at(depth) {
            let (k, v) = ops.key_value(tape, xn, &pos)?;
            if run.opts.record_kv {
                run.kv.push(LayerKv {
                    layer,
                    depth,
                    rows: rows.to_vec(),
                    keys: tape.value(k).clone(),
                    values: tape.value(v).clone(),
                });
            }
            if run.opts.prefill {
                let cache = &mut run.caches[slot];
                for (i, &p) in pos.iter().enumerate() {
                    cache.append(depth, p, tape.value(k).row(i), tape.value(v).row(i))?;
                }
            }
            if depth == 1 {
                run.shared.insert(slot, SharedKv { k, v });
                (k, v)
            } else if mode == KvMode::Hybrid {
                let base = &run.shared[&slot];
                let (bk, bv) = (base.k, base.v);
                let d1 = &run.depth1_rows;
                let at: HashMap<usize, usize> = rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
                let idx: Vec<usize> = d1
                    .iter()
                    .enumerate()
                    .map(|(i, r)| at.get(r).map_or(i, |&j| d1.len() + j))
                    .collect();
                let kc = tape.concat_rows(&[bk, k])?;
                let vc = tape.concat_rows(&[bv, v])?;
                (tape.gather_rows(kc, &idx)?, tape.gather_rows(vc, &idx)?)
            } else {
                (k, v)
            }
        } else {
            let base = &run.shared[&slot];
            (base.k, base.v)
        };
        ops.finish(tape, x, q, k, v, layout.clone())
    }
}
