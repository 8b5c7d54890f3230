#![allow(dead_code)]

pub mod grad;
pub mod props;

use mor::kv_cache::KvMode;
use mor::model::{ForwardOptions, Model, ModelConfig, Selection, Sharing};
use mor::routing::{RouterConfig, SelectionMask};
use mor::tensor::{ParamStore, Tape};
use mor::train::objective::objective;

pub const MODES: [KvMode; 3] = [KvMode::RecursionWise, KvMode::RecursiveSharing, KvMode::Hybrid];

pub fn tiny(l: usize, n_r: usize, sharing: Sharing) -> ModelConfig {
    ModelConfig {
        total_layers: l,
        recursions: n_r,
        sharing,
        d_model: 8,
        n_heads: 2,
        n_kv_heads: 1,
        d_head: 4,
        d_inter: 16,
        vocab_size: 11,
        ctx_len: 96,
        rope_base: 10_000.0,
        norm_eps: 1e-5,
    }
}

pub fn tokens(n: usize, seed: u64) -> Vec<usize> {
    (0..n).map(|i| ((i as u64 * 7 + seed * 13 + (i as u64 * i as u64) % 5) % 11) as usize).collect()
}

/// Scales weights up so random routers produce well-separated scores.
pub fn spread(model: &mut Model, factor: f64) {
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.get(id).rank() == 2 {
            let t = model.params.get(id).map(|x| x * factor);
            *model.params.get_mut(id) = t;
        }
    }
}

/// Relative error of the full objective's parameter gradient against
/// central differences, with the routing decisions held fixed.
pub fn full_loss_check(router: Option<RouterConfig>, sharing: Sharing, aux_only: bool) -> f64 {
    let mut model = Model::new(tiny(6, 2, sharing), router, 21).unwrap();
    spread(&mut model, 10.0);
    let toks = tokens(26, 4);
    let mut inp = Vec::new();
    let mut tgt = Vec::new();
    for s in 0..2 {
        inp.extend_from_slice(&toks[s * 13..s * 13 + 12]);
        tgt.extend_from_slice(&toks[s * 13 + 1..s * 13 + 13]);
    }
    let opts = ForwardOptions::default();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &inp, 12, &opts).unwrap();
    let mask = out.mask.depths();
    let loss = objective(&mut tape, &model, &out, &tgt).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    // the auxiliary head sees detached inputs, so finite differences through
    // the main parameters would include a path backward blocks on purpose
    let ids: Vec<_> = if aux_only { model.aux_router_param_ids() } else { model.params.ids().collect() };
    let mut probe = model.clone();
    let mut store: ParamStore = model.params.clone();
    mor::tensor::check::param_gradcheck(&mut store, &ids, &grads, 6, 1e-5, |s| {
        probe.params = s.clone();
        let mut tape = Tape::new();
        let out = probe.forward(&mut tape, &inp, 12, &opts)?;
        assert_eq!(out.mask.depths(), mask, "selection flipped under perturbation");
        let l = objective(&mut tape, &probe, &out, &tgt)?;
        Ok(tape.value(l.total).item())
    })
    .unwrap()
}

/// Router configurations exercised by the model-level gradient check.
pub fn loss_check_cases() -> Vec<(&'static str, Option<RouterConfig>, Sharing, bool)> {
    let ec = RouterConfig {
        zloss_coeff: 1e-2,
        aux: mor::routing::AuxScheme::AuxLoss(0.1),
        ..RouterConfig::expert_choice()
    };
    let aux_router = RouterConfig {
        aux: mor::routing::AuxScheme::AuxRouter,
        head: mor::routing::HeadArch::Mlp,
        ..RouterConfig::expert_choice()
    };
    vec![
        ("recursive", None, Sharing::Cycle, false),
        ("expert-choice", Some(ec), Sharing::MiddleCycle, false),
        ("token-choice", Some(RouterConfig::token_choice()), Sharing::MiddleCycle, false),
        ("aux-router", Some(aux_router), Sharing::Cycle, true),
    ]
}

/// Largest logit gap between stepwise decoding of `toks` and one
/// teacher-forced pass over the same tokens. The teacher pass reuses the
/// decoded depths and, separately, recomputes them with the inference rule;
/// both must reproduce the decoded depths.
pub fn decode_vs_teacher(model: &Model, mode: KvMode, toks: &[usize]) -> f64 {
    let n = toks.len();
    let mut state = model.decode_state(mode);
    let mut depths = Vec::new();
    let mut dec = Vec::new();
    for &t in toks {
        let s = model.decode_step(&mut state, t, None).unwrap();
        depths.push(s.depth);
        dec.push(s.logits);
    }
    let mut worst: f64 = 0.0;
    for sel in [
        Selection::Fixed(SelectionMask::from_depths(&depths, model.cfg.recursions)),
        Selection::Threshold,
    ] {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            selection: sel,
            kv_mode: mode,
            ..Default::default()
        };
        let out = model.forward(&mut tape, toks, n, &opts).unwrap();
        if out.mask.depths() != depths {
            return f64::INFINITY;
        }
        for (i, row) in dec.iter().enumerate() {
            for (a, b) in tape.value(out.logits).row(i).iter().zip(row) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}
