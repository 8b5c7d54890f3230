use std::rc::Rc;

use rand::Rng;

use super::config::ModelConfig;
use crate::error::Result;
use crate::tensor::{AttnLayout, ParamId, ParamStore, Tape, Tensor, Var};

/// Parameters of one pre-norm transformer block. Weights are `in × out`.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

impl BlockParams {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let qw = cfg.n_heads * cfg.d_head;
        let kw = cfg.kv_width();
        let mut w = |store: &mut ParamStore, part: &str, r: usize, c: usize| {
            store.add(format!("{name}.{part}"), Tensor::trunc_normal(&[r, c], 0.02, rng))
        };
        let attn_norm = store.add(format!("{name}.attn_norm"), Tensor::full(&[d], 1.0));
        let wq = w(store, "wq", d, qw);
        let wk = w(store, "wk", d, kw);
        let wv = w(store, "wv", d, kw);
        let wo = w(store, "wo", qw, d);
        let ffn_norm = store.add(format!("{name}.ffn_norm"), Tensor::full(&[d], 1.0));
        let w_gate = w(store, "w_gate", d, cfg.d_inter);
        let w_up = w(store, "w_up", d, cfg.d_inter);
        let w_down = w(store, "w_down", cfg.d_inter, d);
        Self {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            w_gate,
            w_up,
            w_down,
        }
    }

    /// Copies every tensor of `self` into `store` under a new name.
    pub fn duplicate(&self, src: &ParamStore, store: &mut ParamStore, name: &str) -> Self {
        let mut c = |id: ParamId| {
            let part = src.name(id).rsplit('.').next().unwrap_or("w").to_string();
            store.add(format!("{name}.{part}"), src.get(id).clone())
        };
        Self {
            attn_norm: c(self.attn_norm),
            wq: c(self.wq),
            wk: c(self.wk),
            wv: c(self.wv),
            wo: c(self.wo),
            ffn_norm: c(self.ffn_norm),
            w_gate: c(self.w_gate),
            w_up: c(self.w_up),
            w_down: c(self.w_down),
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }

    pub fn count(cfg: &ModelConfig) -> usize {
        let d = cfg.d_model;
        let qw = cfg.n_heads * cfg.d_head;
        2 * d * qw + 2 * d * cfg.kv_width() + 3 * d * cfg.d_inter + 2 * d
    }
}

/// One block split into the pieces the cache modes need.
pub(crate) struct BlockOps<'a> {
    pub p: &'a BlockParams,
    pub store: &'a ParamStore,
    pub cfg: &'a ModelConfig,
}

impl BlockOps<'_> {
    pub fn normed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.store, self.p.attn_norm);
        tape.rms_norm(x, w, self.cfg.norm_eps)
    }

    pub fn query(&self, tape: &mut Tape, xn: Var, positions: &[usize]) -> Result<Var> {
        let wq = tape.param(self.store, self.p.wq);
        let q = tape.matmul(xn, wq)?;
        tape.rope(q, positions, self.cfg.d_head, self.cfg.rope_base)
    }

    pub fn key_value(&self, tape: &mut Tape, xn: Var, positions: &[usize]) -> Result<(Var, Var)> {
        let wk = tape.param(self.store, self.p.wk);
        let wv = tape.param(self.store, self.p.wv);
        let k = tape.matmul(xn, wk)?;
        let k = tape.rope(k, positions, self.cfg.d_head, self.cfg.rope_base)?;
        let v = tape.matmul(xn, wv)?;
        Ok((k, v))
    }

    /// Attention, output projection, residual, then the gated feed-forward.
    pub fn finish(&self, tape: &mut Tape, x: Var, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>) -> Result<Var> {
        let a = tape.attention(q, k, v, layout, self.cfg.n_heads, self.cfg.n_kv_heads)?;
        let wo = tape.param(self.store, self.p.wo);
        let o = tape.matmul(a, wo)?;
        let h = tape.add(x, o)?;
        let fnw = tape.param(self.store, self.p.ffn_norm);
        let hn = tape.rms_norm(h, fnw, self.cfg.norm_eps)?;
        let wg = tape.param(self.store, self.p.w_gate);
        let wu = tape.param(self.store, self.p.w_up);
        let wd = tape.param(self.store, self.p.w_down);
        let gate = tape.matmul(hn, wg)?;
        let gate = tape.silu(gate)?;
        let up = tape.matmul(hn, wu)?;
        let inner = tape.mul(gate, up)?;
        let down = tape.matmul(inner, wd)?;
        tape.add(h, down)
    }
}
