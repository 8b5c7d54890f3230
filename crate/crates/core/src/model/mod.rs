//! The recursive transformer: configuration, layer schedules, parameters,
//! the routed teacher-forced forward and incremental decoding.

mod block;
pub mod config;
mod decode;
mod forward;
pub mod schedule;

pub use block::BlockParams;
pub use config::{ModelConfig, Sharing};
pub use decode::{DecodeState, DecodeStep};
pub(crate) use decode::argmax;
pub use forward::{DepthTrace, ForwardOptions, ForwardOutput, LayerKv, Selection, TokenChoiceTrace};
pub use schedule::{build_layer_schedule, expected_distinct, LayerSchedule};

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv_cache::{KvCache, KvMode};
use crate::routing::{capacity_schedule, Family, RouterConfig, RouterHead};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use block::BlockOps;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Non-embedding parameters over the unrolled depth.
    pub non_embedding: usize,
    /// Tied input/output embedding, counted once.
    pub embedding: usize,
    /// Non-embedding parameters actually stored.
    pub unique_non_embedding: usize,
}

pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamCount> {
    let per_block = BlockParams::count(cfg);
    Ok(ParamCount {
        non_embedding: cfg.total_layers * per_block + cfg.d_model,
        embedding: cfg.vocab_size * cfg.d_model,
        unique_non_embedding: expected_distinct(cfg) * per_block + cfg.d_model,
    })
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub router: Option<RouterConfig>,
    pub params: ParamStore,
    embed: ParamId,
    final_norm: ParamId,
    blocks: Vec<BlockParams>,
    schedule: LayerSchedule,
    routers: Vec<RouterHead>,
    aux_routers: Vec<RouterHead>,
    capacities: Vec<Ratio<usize>>,
    /// Loss-free balancing bias, one entry per depth (token-choice only).
    pub lossfree_bias: Vec<f64>,
}

impl Model {
    pub fn new(cfg: ModelConfig, router: Option<RouterConfig>, seed: u64) -> Result<Self> {
        let schedule = build_layer_schedule(&cfg)?;
        if let Some(r) = &router {
            r.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embed = params.add(
            "embed",
            Tensor::trunc_normal(&[cfg.vocab_size, cfg.d_model], 0.02, &mut rng),
        );
        let blocks = (0..schedule.distinct())
            .map(|b| BlockParams::new(&mut params, &format!("block.{b}"), &cfg, &mut rng))
            .collect();
        let final_norm = params.add("final_norm", Tensor::full(&[cfg.d_model], 1.0));
        let n = cfg.recursions;
        let (mut routers, mut aux_routers) = (Vec::new(), Vec::new());
        if let Some(r) = &router {
            match r.family {
                Family::ExpertChoice => {
                    for d in 0..n {
                        routers.push(RouterHead::new(&mut params, &format!("router.{d}"), cfg.d_model, 1, r.head, &mut rng));
                    }
                    if r.aux == crate::routing::AuxScheme::AuxRouter {
                        for d in 0..n {
                            aux_routers.push(RouterHead::new(
                                &mut params,
                                &format!("aux_router.{d}"),
                                cfg.d_model,
                                1,
                                r.head,
                                &mut rng,
                            ));
                        }
                    }
                }
                Family::TokenChoice => {
                    routers.push(RouterHead::new(&mut params, "router", cfg.d_model, n, r.head, &mut rng));
                }
            }
        }
        Ok(Self {
            capacities: capacity_schedule(n)?,
            lossfree_bias: vec![0.0; n],
            cfg,
            router,
            params,
            embed,
            final_norm,
            blocks,
            schedule,
            routers,
            aux_routers,
        })
    }

    pub fn schedule(&self) -> &LayerSchedule {
        &self.schedule
    }

    pub fn capacities(&self) -> &[Ratio<usize>] {
        &self.capacities
    }

    /// Replaces the capacity schedule used by expert-choice selection.
    pub fn set_capacities(&mut self, caps: Vec<Ratio<usize>>) -> Result<()> {
        if caps.len() != self.cfg.recursions || caps.iter().any(|c| *c > Ratio::from_integer(1)) {
            return Err(Error::Config(format!(
                "need {} capacities in [0, 1], got {caps:?}",
                self.cfg.recursions
            )));
        }
        self.capacities = caps;
        Ok(())
    }

    pub fn block(&self, id: usize) -> &BlockParams {
        &self.blocks[id]
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    /// Parameters of the router heads (main and auxiliary).
    pub fn router_param_ids(&self) -> Vec<ParamId> {
        self.routers
            .iter()
            .chain(&self.aux_routers)
            .flat_map(|h| h.param_ids().collect::<Vec<_>>())
            .collect()
    }

    pub fn aux_router_param_ids(&self) -> Vec<ParamId> {
        self.aux_routers.iter().flat_map(|h| h.param_ids().collect::<Vec<_>>()).collect()
    }

    /// Same function with a private parameter copy for every unrolled layer.
    pub fn untied(&self) -> Self {
        let mut params = self.params.clone();
        let blocks: Vec<BlockParams> = self
            .schedule
            .blocks
            .iter()
            .enumerate()
            .map(|(l, &b)| self.blocks[b].duplicate(&self.params, &mut params, &format!("layer.{l}")))
            .collect();
        Self {
            params,
            blocks,
            schedule: LayerSchedule {
                blocks: (0..self.cfg.total_layers).collect(),
            },
            ..self.clone()
        }
    }

    fn ops(&self, layer: usize) -> BlockOps<'_> {
        BlockOps {
            p: &self.blocks[self.schedule.blocks[layer]],
            store: &self.params,
            cfg: &self.cfg,
        }
    }

    /// Cache slot of an unrolled layer and the depth it runs at.
    pub fn cache_slot(&self, layer: usize) -> (usize, usize) {
        let pre = self.cfg.prefix_layers();
        let chunk = self.cfg.layers_per_step();
        let region = chunk * self.cfg.recursions;
        if layer < pre {
            (layer, 1)
        } else if layer < pre + region {
            (pre + (layer - pre) % chunk, (layer - pre) / chunk + 1)
        } else {
            (pre + chunk + layer - pre - region, 1)
        }
    }

    /// Empty caches, one per slot.
    pub fn new_caches(&self, mode: KvMode) -> Vec<KvCache> {
        let pre = self.cfg.prefix_layers();
        let chunk = self.cfg.layers_per_step();
        let slots = pre + chunk + self.cfg.suffix_layers();
        (0..slots)
            .map(|s| {
                let depths = if s >= pre && s < pre + chunk { self.cfg.recursions } else { 1 };
                KvCache::new(mode, depths, self.cfg.kv_width())
            })
            .collect()
    }

    /// One block over a single sequence with plain causal self-attention.
    pub fn block_forward(&self, tape: &mut Tape, block: usize, x: Var, positions: &[usize]) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.cfg.ctx_len) {
            return Err(Error::Range {
                position: p,
                ctx_len: self.cfg.ctx_len,
            });
        }
        let ops = BlockOps {
            p: &self.blocks[block],
            store: &self.params,
            cfg: &self.cfg,
        };
        let keys: Vec<(usize, usize)> = positions.iter().map(|&p| (0, p)).collect();
        let layout = std::rc::Rc::new(crate::tensor::AttnLayout::causal(&keys, &keys)?);
        let xn = ops.normed(tape, x)?;
        let q = ops.query(tape, xn, positions)?;
        let (k, v) = ops.key_value(tape, xn, positions)?;
        ops.finish(tape, x, q, k, v, layout)
    }

    fn final_logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.params, self.final_norm);
        let xn = tape.rms_norm(x, w, self.cfg.norm_eps)?;
        let e = tape.param(&self.params, self.embed);
        tape.matmul_nt(xn, e)
    }

    fn activate(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        let r = self.router.as_ref().expect("router configured");
        match r.activation {
            crate::routing::Activation::Sigmoid => tape.sigmoid(logits),
            crate::routing::Activation::Tanh => tape.tanh(logits),
            crate::routing::Activation::Softmax => tape.softmax(logits),
        }
    }
}
