//! Run configuration and its canonical text form: one `key = value` per
//! line, `#` comments, keys grouped under `model.`, `router.`, `train.` and
//! `sim.`. Keys are applied in [`KEYS`] order regardless of their order in
//! the file, so `router.family` always resets the router before the other
//! router keys refine it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv_cache::KvMode;
use crate::model::{ModelConfig, Sharing};
use crate::routing::{AuxScheme, Family, RouterConfig};
use crate::sim::{DepthSource, SimConfig, WorkloadSpec};
use crate::train::schedule::ScheduleKind;
use crate::train::{CorpusSource, TrainConfig};

/// Where the simulator takes per-token depths from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum SimDepths {
    Proxy(DepthSource),
    /// Decode with the configured model and record its routing.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimSection {
    pub slots: usize,
    pub drain_threshold: usize,
    pub max_active: Option<usize>,
    pub kv_mode: KvMode,
    pub requests: usize,
    pub mean_len: f64,
    pub std_len: f64,
    pub depths: SimDepths,
    pub temperature: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            slots: 32,
            drain_threshold: 1,
            max_active: None,
            kv_mode: KvMode::RecursionWise,
            requests: 1000,
            mean_len: 256.0,
            std_len: 64.0,
            depths: SimDepths::Proxy(DepthSource::Capacity),
            temperature: 1.0,
        }
    }
}

impl SimSection {
    pub fn sim_config(&self, recursions: usize) -> SimConfig {
        SimConfig {
            slots: self.slots,
            recursions,
            kv_mode: self.kv_mode,
            drain_threshold: self.drain_threshold,
            max_active: self.max_active,
            record_trace: false,
        }
    }

    pub fn workload_spec(&self, recursions: usize, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            requests: self.requests,
            mean_len: self.mean_len,
            std_len: self.std_len,
            recursions,
            depths: match self.depths {
                SimDepths::Proxy(d) => d,
                SimDepths::Model => DepthSource::Capacity,
            },
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub router: Option<RouterConfig>,
    pub train: TrainConfig,
    pub sim: SimSection,
}

pub const KEYS: &[&str] = &[
    "seed",
    "model.total_layers",
    "model.recursions",
    "model.sharing",
    "model.d_model",
    "model.n_heads",
    "model.n_kv_heads",
    "model.d_head",
    "model.d_inter",
    "model.vocab_size",
    "model.ctx_len",
    "model.rope_base",
    "model.norm_eps",
    "router.family",
    "router.activation",
    "router.head",
    "router.alpha",
    "router.aux",
    "router.aux_coeff",
    "router.balance_coeff",
    "router.zloss_coeff",
    "router.lossfree_rate",
    "router.inference_threshold",
    "train.steps",
    "train.batch_size",
    "train.seq_len",
    "train.schedule",
    "train.lr",
    "train.min_lr",
    "train.warmup",
    "train.cooldown",
    "train.schedule_len",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.weight_decay",
    "train.grad_clip",
    "train.kv_mode",
    "train.corpus",
    "train.corpus_bytes",
    "train.eval_fraction",
    "train.eval_batches",
    "train.log_every",
    "train.eval_every",
    "sim.slots",
    "sim.drain_threshold",
    "sim.max_active",
    "sim.kv_mode",
    "sim.requests",
    "sim.mean_len",
    "sim.std_len",
    "sim.depths",
    "sim.temperature",
];

pub const PRESETS: &[&str] = &[
    "toy",
    "toy-tc",
    "toy-recursive",
    "toy-vanilla",
    "vanilla-135m",
    "vanilla-360m",
    "vanilla-730m",
    "vanilla-1.7b",
    "recursive-<base>-<n>",
    "mor-<base>-<n>",
    "mor-tc-<base>-<n>",
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_auto(v: &str) -> std::result::Result<Option<usize>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

fn auto(v: Option<usize>) -> String {
    v.map_or("auto".into(), |x| x.to_string())
}

fn depths_text(d: SimDepths) -> String {
    match d {
        SimDepths::Model => "model".into(),
        SimDepths::Proxy(DepthSource::Fixed(n)) => format!("fixed:{n}"),
        SimDepths::Proxy(DepthSource::Uniform) => "uniform".into(),
        SimDepths::Proxy(DepthSource::Capacity) => "capacity".into(),
        SimDepths::Proxy(DepthSource::EarlyExit { fraction }) => format!("early-exit:{fraction}"),
    }
}

fn parse_depths(v: &str) -> std::result::Result<SimDepths, String> {
    Ok(match v.split_once(':') {
        None if v == "model" => SimDepths::Model,
        None if v == "uniform" => SimDepths::Proxy(DepthSource::Uniform),
        None if v == "capacity" => SimDepths::Proxy(DepthSource::Capacity),
        Some(("fixed", n)) => SimDepths::Proxy(DepthSource::Fixed(parse(n)?)),
        Some(("early-exit", f)) => SimDepths::Proxy(DepthSource::EarlyExit { fraction: parse(f)? }),
        _ => {
            return Err(format!(
                "`{v}` is not one of: model, uniform, capacity, fixed:<depth>, early-exit:<fraction>"
            ))
        }
    })
}

/// Smallest unrolled depth at least `l` that Middle-Cycle can split into `n` steps.
fn middle_cycle_depth(l: usize, n: usize) -> usize {
    (l..).find(|&x| x >= 3 && (x - 2) % n == 0).unwrap()
}

impl RunConfig {
    pub fn toy() -> Self {
        let mut router = RouterConfig::expert_choice();
        router.aux = AuxScheme::AuxLoss(0.01);
        Self {
            seed: 0,
            model: ModelConfig::toy(),
            router: Some(router),
            train: TrainConfig::toy(1500),
            sim: SimSection::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")));
        let mut cfg = Self::toy();
        match name {
            "toy" => return Ok(cfg),
            "toy-tc" => {
                cfg.router = Some(RouterConfig::token_choice());
                return Ok(cfg);
            }
            "toy-recursive" => {
                cfg.router = None;
                return Ok(cfg);
            }
            "toy-vanilla" => {
                cfg.router = None;
                cfg.model = cfg.model.with_recursion(cfg.model.total_layers, 1, Sharing::None);
                return Ok(cfg);
            }
            _ => {}
        }
        let base = |b: &str| -> Option<ModelConfig> {
            Some(match b {
                "135m" => ModelConfig::vanilla_135m(),
                "360m" => ModelConfig::vanilla_360m(),
                "730m" => ModelConfig::vanilla_730m(),
                "1.7b" => ModelConfig::vanilla_1_7b(),
                _ => return None,
            })
        };
        cfg.train.seq_len = 2048;
        cfg.sim.kv_mode = KvMode::RecursionWise;
        if let Some(b) = name.strip_prefix("vanilla-") {
            cfg.model = base(b).ok_or_else(unknown)?;
            cfg.router = None;
            return Ok(cfg);
        }
        let (kind, rest) = name.rsplit_once('-').ok_or_else(unknown)?;
        let n: usize = rest.parse().map_err(|_| unknown())?;
        let (family, b) = if let Some(b) = kind.strip_prefix("mor-tc-") {
            (Some(Family::TokenChoice), b)
        } else if let Some(b) = kind.strip_prefix("mor-") {
            (Some(Family::ExpertChoice), b)
        } else if let Some(b) = kind.strip_prefix("recursive-") {
            (None, b)
        } else {
            return Err(unknown());
        };
        let m = base(b).ok_or_else(unknown)?;
        if n == 0 {
            return Err(unknown());
        }
        cfg.model = m.with_recursion(middle_cycle_depth(m.total_layers, n), n, Sharing::MiddleCycle);
        cfg.router = family.map(|f| match f {
            Family::ExpertChoice => RouterConfig::expert_choice(),
            Family::TokenChoice => RouterConfig::token_choice(),
        });
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(r) = &self.router {
            r.validate()?;
        }
        self.train.validate()?;
        if self.train.seq_len > self.model.ctx_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.ctx_len {}",
                self.train.seq_len, self.model.ctx_len
            )));
        }
        Ok(())
    }

    fn router_mut(&mut self, key: &str) -> std::result::Result<&mut RouterConfig, String> {
        self.router.as_mut().ok_or_else(|| format!("{key} needs router.family to name a router"))
    }

    /// Current value of `key`, or `None` when it does not apply.
    pub fn get(&self, key: &str) -> Result<Option<String>> {
        let m = &self.model;
        let t = &self.train;
        let s = &self.sim;
        let r = self.router.as_ref();
        let rk = |f: &dyn Fn(&RouterConfig) -> Option<String>| r.and_then(f);
        Ok(Some(match key {
            "seed" => self.seed.to_string(),
            "model.total_layers" => m.total_layers.to_string(),
            "model.recursions" => m.recursions.to_string(),
            "model.sharing" => m.sharing.to_string(),
            "model.d_model" => m.d_model.to_string(),
            "model.n_heads" => m.n_heads.to_string(),
            "model.n_kv_heads" => m.n_kv_heads.to_string(),
            "model.d_head" => m.d_head.to_string(),
            "model.d_inter" => m.d_inter.to_string(),
            "model.vocab_size" => m.vocab_size.to_string(),
            "model.ctx_len" => m.ctx_len.to_string(),
            "model.rope_base" => m.rope_base.to_string(),
            "model.norm_eps" => m.norm_eps.to_string(),
            "router.family" => r.map_or("none".into(), |r| r.family.to_string()),
            "router.activation" => return Ok(rk(&|r| Some(r.activation.to_string()))),
            "router.head" => return Ok(rk(&|r| Some(r.head.to_string()))),
            "router.alpha" => return Ok(rk(&|r| Some(r.alpha.to_string()))),
            "router.aux" => {
                return Ok(rk(&|r| {
                    Some(match r.aux {
                        AuxScheme::AuxLoss(_) => "loss".into(),
                        AuxScheme::AuxRouter => "router".into(),
                    })
                }))
            }
            "router.aux_coeff" => {
                return Ok(rk(&|r| match r.aux {
                    AuxScheme::AuxLoss(c) => Some(c.to_string()),
                    AuxScheme::AuxRouter => None,
                }))
            }
            "router.balance_coeff" => return Ok(rk(&|r| Some(r.balance_coeff.to_string()))),
            "router.zloss_coeff" => return Ok(rk(&|r| Some(r.zloss_coeff.to_string()))),
            "router.lossfree_rate" => return Ok(rk(&|r| Some(r.lossfree_rate.to_string()))),
            "router.inference_threshold" => return Ok(rk(&|r| Some(r.inference_threshold.to_string()))),
            "train.steps" => t.steps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.seq_len" => t.seq_len.to_string(),
            "train.schedule" => match t.schedule {
                ScheduleKind::Trapezoid => "trapezoid".into(),
                ScheduleKind::Cosine => "cosine".into(),
            },
            "train.lr" => t.lr.to_string(),
            "train.min_lr" => t.min_lr.to_string(),
            "train.warmup" => auto(t.warmup),
            "train.cooldown" => auto(t.cooldown),
            "train.schedule_len" => auto(t.schedule_len),
            "train.beta1" => t.optimizer.beta1.to_string(),
            "train.beta2" => t.optimizer.beta2.to_string(),
            "train.adam_eps" => t.optimizer.eps.to_string(),
            "train.weight_decay" => t.optimizer.weight_decay.to_string(),
            "train.grad_clip" => t.optimizer.grad_clip.to_string(),
            "train.kv_mode" => t.kv_mode.to_string(),
            "train.corpus" => match &t.corpus {
                CorpusSource::Synthetic { .. } => "synthetic".into(),
                CorpusSource::File(p) => p.display().to_string(),
            },
            "train.corpus_bytes" => match &t.corpus {
                CorpusSource::Synthetic { bytes } => bytes.to_string(),
                CorpusSource::File(_) => return Ok(None),
            },
            "train.eval_fraction" => t.eval_fraction.to_string(),
            "train.eval_batches" => t.eval_batches.to_string(),
            "train.log_every" => t.log_every.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "sim.slots" => s.slots.to_string(),
            "sim.drain_threshold" => s.drain_threshold.to_string(),
            "sim.max_active" => auto(s.max_active),
            "sim.kv_mode" => s.kv_mode.to_string(),
            "sim.requests" => s.requests.to_string(),
            "sim.mean_len" => s.mean_len.to_string(),
            "sim.std_len" => s.std_len.to_string(),
            "sim.depths" => depths_text(s.depths),
            "sim.temperature" => s.temperature.to_string(),
            other => return Err(Error::UnknownKey(other.to_string())),
        }))
    }

    /// Sets one key. Errors other than unknown keys are plain messages.
    fn set_value(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.sim;
        match key {
            "seed" => self.seed = parse(v)?,
            "model.total_layers" => m.total_layers = parse(v)?,
            "model.recursions" => m.recursions = parse(v)?,
            "model.sharing" => m.sharing = parse(v)?,
            "model.d_model" => m.d_model = parse(v)?,
            "model.n_heads" => m.n_heads = parse(v)?,
            "model.n_kv_heads" => m.n_kv_heads = parse(v)?,
            "model.d_head" => m.d_head = parse(v)?,
            "model.d_inter" => m.d_inter = parse(v)?,
            "model.vocab_size" => m.vocab_size = parse(v)?,
            "model.ctx_len" => m.ctx_len = parse(v)?,
            "model.rope_base" => m.rope_base = parse(v)?,
            "model.norm_eps" => m.norm_eps = parse(v)?,
            "router.family" => {
                self.router = match v {
                    "none" => None,
                    f => Some(match parse::<Family>(f)? {
                        Family::ExpertChoice => RouterConfig::expert_choice(),
                        Family::TokenChoice => RouterConfig::token_choice(),
                    }),
                }
            }
            "router.activation" => self.router_mut(key)?.activation = parse(v)?,
            "router.head" => self.router_mut(key)?.head = parse(v)?,
            "router.alpha" => self.router_mut(key)?.alpha = parse(v)?,
            "router.aux" => {
                let r = self.router_mut(key)?;
                r.aux = match (v, r.aux) {
                    ("loss", AuxScheme::AuxLoss(c)) => AuxScheme::AuxLoss(c),
                    ("loss", AuxScheme::AuxRouter) => AuxScheme::AuxLoss(0.001),
                    ("router", _) => AuxScheme::AuxRouter,
                    _ => return Err(format!("`{v}` is not one of: loss, router")),
                }
            }
            "router.aux_coeff" => {
                let r = self.router_mut(key)?;
                match r.aux {
                    AuxScheme::AuxLoss(_) => r.aux = AuxScheme::AuxLoss(parse(v)?),
                    AuxScheme::AuxRouter => return Err("router.aux_coeff applies only with router.aux = loss".into()),
                }
            }
            "router.balance_coeff" => self.router_mut(key)?.balance_coeff = parse(v)?,
            "router.zloss_coeff" => self.router_mut(key)?.zloss_coeff = parse(v)?,
            "router.lossfree_rate" => self.router_mut(key)?.lossfree_rate = parse(v)?,
            "router.inference_threshold" => self.router_mut(key)?.inference_threshold = parse(v)?,
            "train.steps" => t.steps = parse(v)?,
            "train.batch_size" => t.batch_size = parse(v)?,
            "train.seq_len" => t.seq_len = parse(v)?,
            "train.schedule" => {
                t.schedule = match v {
                    "trapezoid" => ScheduleKind::Trapezoid,
                    "cosine" => ScheduleKind::Cosine,
                    _ => return Err(format!("`{v}` is not one of: trapezoid, cosine")),
                }
            }
            "train.lr" => t.lr = parse(v)?,
            "train.min_lr" => t.min_lr = parse(v)?,
            "train.warmup" => t.warmup = parse_auto(v)?,
            "train.cooldown" => t.cooldown = parse_auto(v)?,
            "train.schedule_len" => t.schedule_len = parse_auto(v)?,
            "train.beta1" => t.optimizer.beta1 = parse(v)?,
            "train.beta2" => t.optimizer.beta2 = parse(v)?,
            "train.adam_eps" => t.optimizer.eps = parse(v)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(v)?,
            "train.grad_clip" => t.optimizer.grad_clip = parse(v)?,
            "train.kv_mode" => t.kv_mode = parse(v)?,
            "train.corpus" => {
                t.corpus = match v {
                    "synthetic" => CorpusSource::Synthetic { bytes: 1 << 20 },
                    path => CorpusSource::File(PathBuf::from(path)),
                }
            }
            "train.corpus_bytes" => match &mut t.corpus {
                CorpusSource::Synthetic { bytes } => *bytes = parse(v)?,
                CorpusSource::File(_) => return Err("train.corpus_bytes applies only to the synthetic corpus".into()),
            },
            "train.eval_fraction" => t.eval_fraction = parse(v)?,
            "train.eval_batches" => t.eval_batches = parse(v)?,
            "train.log_every" => t.log_every = parse(v)?,
            "train.eval_every" => t.eval_every = parse(v)?,
            "sim.slots" => s.slots = parse(v)?,
            "sim.drain_threshold" => s.drain_threshold = parse(v)?,
            "sim.max_active" => s.max_active = parse_auto(v)?,
            "sim.kv_mode" => s.kv_mode = parse(v)?,
            "sim.requests" => s.requests = parse(v)?,
            "sim.mean_len" => s.mean_len = parse(v)?,
            "sim.std_len" => s.std_len = parse(v)?,
            "sim.depths" => s.depths = parse_depths(v)?,
            "sim.temperature" => s.temperature = parse(v)?,
            _ => unreachable!("keys are checked against KEYS"),
        }
        Ok(())
    }

    /// Applies `(line, key, value)` assignments on top of `self`; a later
    /// assignment to the same key wins.
    pub fn apply(&mut self, entries: &[(usize, String, String)]) -> Result<()> {
        let mut latest: BTreeMap<usize, (usize, &str)> = BTreeMap::new();
        for (line, key, value) in entries {
            let idx = KEYS
                .iter()
                .position(|k| k == key)
                .ok_or_else(|| Error::UnknownKey(key.clone()))?;
            latest.insert(idx, (*line, value));
        }
        for (idx, (line, value)) in latest {
            let key = KEYS[idx];
            self.set_value(key, value).map_err(|message| Error::Schema {
                line,
                message: format!("{key}: {message}"),
            })?;
        }
        Ok(())
    }

    /// Parses config text into assignments, checking syntax and keys.
    pub fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Schema {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::UnknownKey(k.to_string()));
            }
            out.push((i + 1, k.to_string(), v.to_string()));
        }
        Ok(out)
    }

    /// `base` with the assignments of `text` applied, validated.
    pub fn from_text(text: &str, base: RunConfig) -> Result<Self> {
        let mut cfg = base;
        cfg.apply(&Self::parse_entries(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every applicable key in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Ok(Some(v)) = self.get(key) {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for name in ["toy", "toy-tc", "toy-vanilla", "mor-360m-4", "recursive-135m-3"] {
            let cfg = RunConfig::preset(name).unwrap();
            let back = RunConfig::from_text(&cfg.to_text(), RunConfig::toy()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("model.d_modle = 3", RunConfig::toy()).unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "model.d_modle"));
        assert!(err.is_schema());
    }

    #[test]
    fn bad_value_reports_line() {
        let err = RunConfig::from_text("# c\nseed = 1\ntrain.lr = fast\n", RunConfig::toy()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 3, .. }));
    }

    #[test]
    fn family_applies_before_router_fields() {
        let cfg = RunConfig::from_text("router.alpha = 0.5\nrouter.family = token-choice\n", RunConfig::toy()).unwrap();
        let r = cfg.router.unwrap();
        assert_eq!(r.family, Family::TokenChoice);
        assert_eq!(r.alpha, 0.5);
    }

    #[test]
    fn mor4_uses_34_layers() {
        assert_eq!(RunConfig::preset("mor-360m-4").unwrap().model.total_layers, 34);
        assert_eq!(RunConfig::preset("mor-360m-2").unwrap().model.total_layers, 32);
    }
}
