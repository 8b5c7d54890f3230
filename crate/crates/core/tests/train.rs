use mor::kv_cache::KvMode;
use mor::model::{ForwardOptions, Model, ModelConfig, Selection, Sharing};
use mor::routing::{AuxScheme, RouterConfig};
use mor::tensor::{Tape, Tensor};
use mor::train::checkpoint::{self, Precision};
use mor::train::data::{Batch, Corpus};
use mor::train::eval::{depth_annotation, evaluate, kv_similarity_report, EvalOptions};
use mor::train::metrics::{dead_token_ratio, maxvio, selection_entropy};
use mor::train::objective::{objective, TERM_NAMES};
use mor::train::schedule::LrSchedule;
use mor::train::{CorpusSource, TrainConfig, Trainer};
use mor::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(n_r: usize) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        n_kv_heads: 1,
        d_head: 16,
        d_inter: 64,
        ctx_len: 64,
        ..ModelConfig::toy().with_recursion(2 + 2 * n_r, n_r, Sharing::MiddleCycle)
    }
}

fn quiet_ec() -> RouterConfig {
    RouterConfig {
        aux: AuxScheme::AuxLoss(0.0),
        zloss_coeff: 0.0,
        ..RouterConfig::expert_choice()
    }
}

fn batch_of(text: &str, n_seqs: usize, seq_len: usize) -> Batch {
    Corpus::from_text(text).fixed_batches(1, n_seqs, seq_len).unwrap().remove(0)
}

fn text_batch() -> Batch {
    let text = mor::train::data::synthetic_corpus(4096, 3);
    batch_of(&text, 2, 24)
}

/// Mean next-token cross-entropy computed from raw logits.
fn reference_ce(logits: &Tensor, targets: &[usize]) -> f64 {
    let mut sum = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        sum += lse - row[y];
    }
    sum / targets.len() as f64
}

#[test]
fn zero_router_coefficients_leave_plain_cross_entropy() {
    let tc = RouterConfig {
        balance_coeff: 0.0,
        zloss_coeff: 0.0,
        ..RouterConfig::token_choice()
    };
    let b = text_batch();
    for router in [Some(quiet_ec()), Some(tc), None] {
        let model = Model::new(small(3), router, 5).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &b.inputs, b.seq_len, &ForwardOptions::default()).unwrap();
        let loss = objective(&mut tape, &model, &out, &b.targets).unwrap();
        let total = tape.value(loss.total).item();
        let ce = reference_ce(tape.value(out.logits), &b.targets);
        assert!((total - ce).abs() < 1e-12, "{total} vs {ce}");
        assert_eq!(loss.terms.len(), 1);
    }
}

#[test]
fn logged_terms_sum_to_total() {
    let ec = RouterConfig {
        zloss_coeff: 1e-3,
        ..RouterConfig::expert_choice()
    };
    let tc = RouterConfig {
        zloss_coeff: 1e-3,
        lossfree_rate: 1e-3,
        ..RouterConfig::token_choice()
    };
    let b = text_batch();
    for router in [ec, tc] {
        let model = Model::new(small(3), Some(router), 6).unwrap();
        let mut trainer = Trainer::new(model, TrainConfig::toy(10)).unwrap();
        for _ in 0..3 {
            let rec = trainer.train_step(&b).unwrap();
            assert_eq!(rec.terms.len(), TERM_NAMES.len());
            let sum: f64 = rec.terms.iter().map(|(_, v)| v).sum();
            assert!((sum - rec.total).abs() < 1e-6, "{sum} vs {}", rec.total);
        }
    }
}

#[test]
fn two_token_corpus_is_learned_within_fifty_steps() {
    let text = "ab".repeat(2000);
    let b = batch_of(&text, 4, 32);
    let model = Model::new(small(2), Some(RouterConfig::expert_choice()), 7).unwrap();
    let cfg = TrainConfig {
        lr: 3e-2,
        ..TrainConfig::toy(50)
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let nll = |m: &Model| evaluate(m, std::slice::from_ref(&b), &EvalOptions::default()).unwrap().nll;
    let start = nll(&trainer.model);
    for _ in 0..50 {
        trainer.train_step(&b).unwrap();
    }
    let end = nll(&trainer.model);
    assert!(end < 0.1 * start, "{start} -> {end}");
}

#[test]
fn nan_parameters_surface_as_divergence() {
    let mut model = Model::new(small(2), Some(quiet_ec()), 8).unwrap();
    let id = model.embed_id();
    model.params.get_mut(id).data_mut()[0] = f64::NAN;
    let mut trainer = Trainer::new(model, TrainConfig::toy(10)).unwrap();
    let b = batch_of(&"\0xyz ".repeat(200), 1, 16);
    match trainer.train_step(&b) {
        Err(Error::Divergence { step: 0, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn trapezoid_from_train_config() {
    let cfg = TrainConfig {
        lr: 1e-3,
        warmup: Some(10),
        cooldown: Some(20),
        ..TrainConfig::toy(100)
    };
    let s = cfg.lr_schedule();
    assert_eq!(
        s,
        LrSchedule::Trapezoid {
            warmup: 10,
            plateau_end: 80,
            cooldown: 20,
            peak: 1e-3
        }
    );
    assert_eq!(s.rate(0).unwrap(), 0.0);
    assert_eq!(s.rate(10).unwrap(), 1e-3);
    assert_eq!(s.rate(90).unwrap(), 5e-4);
    assert!(matches!(s.rate(100), Err(Error::ScheduleExhausted { .. })));
    let short = TrainConfig {
        schedule_len: Some(50),
        ..cfg
    };
    assert!(short.validate().is_err());
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rc = RouterConfig {
        lossfree_rate: 1e-3,
        ..RouterConfig::token_choice()
    };
    let mut model = Model::new(small(3), Some(rc), 9).unwrap();
    model.lossfree_bias = vec![0.25, -0.5, 0.125];
    let b = text_batch();
    let logits = |m: &Model| {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &b.inputs, b.seq_len, &ForwardOptions::default()).unwrap();
        tape.value(out.logits).clone()
    };
    let reference = logits(&model);

    let p64 = dir.path().join("a.ckpt");
    checkpoint::save(&model, &p64, Precision::F64).unwrap();
    let back = checkpoint::load(&p64).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(back.router, model.router);
    assert_eq!(back.lossfree_bias, model.lossfree_bias);
    for ((na, ta), (nb, tb)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb);
    }
    assert_eq!(logits(&back), reference);

    let p32 = dir.path().join("b.ckpt");
    checkpoint::save(&model, &p32, Precision::F32).unwrap();
    let back = checkpoint::load(&p32).unwrap();
    for ((_, ta), (_, tb)) in model.params.iter().zip(back.params.iter()) {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-30));
        }
    }

    std::fs::write(dir.path().join("bad.ckpt"), b"NOTACKPT").unwrap();
    assert!(checkpoint::load(&dir.path().join("bad.ckpt")).is_err());
}

#[test]
fn dead_ratio_of_random_selection_vanishes() {
    // 500 sequences of 2048 positions, each picking a random third
    let (s, t) = (500, 2048);
    let k = t / 3;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut idx: Vec<usize> = (0..t).collect();
    let masks: Vec<Vec<bool>> = (0..s)
        .map(|_| {
            idx.shuffle(&mut rng);
            let mut m = vec![false; t];
            for &i in &idx[..k] {
                m[i] = true;
            }
            m
        })
        .collect();
    // P(a position is never picked) = (1 - k/t)^S, about 1e-88
    assert_eq!(dead_token_ratio(&masks, false).unwrap(), 0.0);
    let per_seq = dead_token_ratio(&masks, true).unwrap();
    assert!((per_seq - (1.0 - k as f64 / t as f64)).abs() < 1e-12);
}

#[test]
fn router_metric_edge_cases() {
    assert_eq!(maxvio(&[30.0, 20.0, 10.0]).unwrap(), 0.5);
    assert!(matches!(maxvio(&[0.0, 0.0]), Err(Error::UndefinedMetric(_))));
    assert!((selection_entropy(&[1.0 / 3.0; 3]).unwrap() - 3f64.ln()).abs() < 1e-12);
    assert!(matches!(selection_entropy(&[0.5, 0.6]), Err(Error::Domain(_))));
}

#[test]
fn evaluation_reports_are_consistent() {
    let b = text_batch();
    let mut model = Model::new(small(3), Some(RouterConfig::expert_choice()), 10).unwrap();
    let r = evaluate(&model, std::slice::from_ref(&b), &EvalOptions::default()).unwrap();
    assert_eq!(r.per_depth_nll.len(), 3);
    assert_eq!(*r.per_depth_nll.last().unwrap(), r.nll);
    assert_eq!(r.depth_histogram.iter().sum::<usize>(), r.tokens);
    assert_eq!(r.depth_histogram, [16, 16, 16]);
    assert!(r.router.samp_acc.is_some() && r.router.auc.is_some() && r.router.dead_ratio.is_some());

    model.router = None;
    let plain = Model::new(small(1), None, 10).unwrap();
    let r = evaluate(&plain, std::slice::from_ref(&b), &EvalOptions::default()).unwrap();
    assert_eq!(r.per_depth_nll, [r.nll]);
    assert_eq!(r.router.samp_acc, None);
}

#[test]
fn annotation_is_deterministic_and_matches_routing() {
    let model = Model::new(small(3), Some(RouterConfig::expert_choice()), 11).unwrap();
    let text = "the cat sat on the mat. 3 plus 4 is 7.";
    let a = depth_annotation(&model, text).unwrap();
    assert_eq!(a, depth_annotation(&model, text).unwrap());
    let toks = mor::train::tokenizer::encode(text);
    assert_eq!(a.len(), toks.len());
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        selection: Selection::TopK,
        ..Default::default()
    };
    let out = model.forward(&mut tape, &toks, toks.len(), &opts).unwrap();
    let depths: Vec<usize> = a.iter().map(|(_, d)| *d).collect();
    assert_eq!(depths, out.mask.depths());
    let mut hist = [0usize; 3];
    for d in depths {
        hist[d - 1] += 1;
    }
    assert_eq!(hist.iter().sum::<usize>(), toks.len());
}

#[test]
fn identical_recursions_give_unit_key_cosine() {
    let cfg = ModelConfig {
        total_layers: 3,
        ..small(3).with_recursion(3, 3, Sharing::Cycle)
    };
    let mut model = Model::new(cfg, None, 12).unwrap();
    let blk = model.block(0).clone();
    for id in [blk.wo, blk.w_down] {
        let z = Tensor::zeros(model.params.get(id).shape());
        *model.params.get_mut(id) = z;
    }
    let r = kv_similarity_report(&model, &text_batch()).unwrap();
    assert_eq!(r.layers, [0, 1, 2]);
    assert_eq!(r.blocks, [0, 0, 0]);
    assert!((r.within_block_cosine.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(r.across_block_cosine, None);
}

#[test]
fn fit_writes_one_row_per_log_step_and_is_reproducible() {
    let run = || {
        let model = Model::new(small(2), Some(RouterConfig::expert_choice()), 13).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            seq_len: 16,
            corpus: CorpusSource::Synthetic { bytes: 8192 },
            eval_batches: 1,
            log_every: 5,
            kv_mode: KvMode::RecursionWise,
            ..TrainConfig::toy(12)
        };
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let mut csv = Vec::new();
        let (first, last) = trainer.fit(1, &mut csv).unwrap();
        (String::from_utf8(csv).unwrap(), first, last)
    };
    let (csv, first, last) = run();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], mor::train::csv_header());
    // steps 0, 5, 10 and the final step 11
    assert_eq!(lines.len(), 5);
    assert!(last.nll < first.nll);
    assert_eq!(run().0, csv);
}
