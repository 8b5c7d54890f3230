use mor::model::{ForwardOptions, Model, Selection, Sharing};
use mor::routing::{
    capacity_k, capacity_schedule, expert_choice_select, lossfree_bias_update, token_choice_assign, RouterConfig,
    SelectionMask,
};
use mor::tensor::{Tape, Tensor};
use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::{spread, tiny};

pub type Outcome = Result<(), TestCaseError>;

pub fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 1000,
        ..ProptestConfig::default()
    }
}

/// Hierarchical expert-choice over `depth_scores`, one score vector per depth.
fn hierarchical(depth_scores: &[Vec<f64>]) -> SelectionMask {
    let t = depth_scores[0].len();
    let n = depth_scores.len();
    let caps = capacity_schedule(n).unwrap();
    let mut mask = SelectionMask::new(t, n);
    let mut live = vec![true; t];
    for (r, scores) in depth_scores.iter().enumerate() {
        let sel = expert_choice_select(scores, &live, caps[r]);
        for (i, &s) in sel.selected.iter().enumerate() {
            mask.set(i, r, s);
        }
        live = sel.selected;
    }
    mask
}

fn softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![logits.len() / width, width], logits.to_vec()).unwrap());
    let p = tape.softmax(x).unwrap();
    tape.value(p).data().to_vec()
}

pub fn depth_scores() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=4, 1usize..=64).prop_flat_map(|(n, t)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, t), n))
}

pub fn nested(scores: Vec<Vec<f64>>) -> Outcome {
    let mask = hierarchical(&scores);
    prop_assert!(mask.is_nested());
    for t in 0..mask.n_tokens() {
        for r in 1..mask.n_depths() {
            prop_assert!(!mask.get(t, r) || mask.get(t, r - 1));
        }
    }
    Ok(())
}

pub fn exact_capacity(scores: Vec<Vec<f64>>) -> Outcome {
    let mask = hierarchical(&scores);
    let t = mask.n_tokens();
    for (r, cap) in capacity_schedule(mask.n_depths()).unwrap().into_iter().enumerate() {
        prop_assert_eq!(mask.count(r), cap.numer() * t / cap.denom());
        prop_assert_eq!(mask.count(r), capacity_k(cap, t));
    }
    Ok(())
}

pub fn model_case() -> impl Strategy<Value = (u64, usize)> {
    (0u64..1_000_000, 2usize..=3)
}

pub fn model_masks((seed, n_r): (u64, usize)) -> Outcome {
    let l = 2 + 2 * n_r;
    let mut model = Model::new(tiny(l, n_r, Sharing::MiddleCycle), Some(RouterConfig::expert_choice()), seed).unwrap();
    spread(&mut model, 5.0);
    let toks: Vec<usize> = (0..24).map(|i| ((seed as usize).wrapping_mul(31) + i * 7) % 11).collect();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &toks, 12, &ForwardOptions::default()).unwrap();
    prop_assert!(out.mask.is_nested());
    let caps = capacity_schedule(n_r).unwrap();
    for s in 0..2 {
        let m = out.mask.slice(s * 12, s * 12 + 12);
        for (r, &cap) in caps.iter().enumerate() {
            prop_assert_eq!(m.count(r), capacity_k(cap, 12));
        }
    }
    Ok(())
}

pub type TieCase = (Vec<u8>, Vec<bool>, (usize, usize));

pub fn tie_case() -> impl Strategy<Value = TieCase> {
    (
        prop::collection::vec(0u8..4, 1..64),
        prop::collection::vec(any::<bool>(), 64),
        (1usize..=4).prop_flat_map(|d| (1..=d, Just(d))),
    )
}

pub fn ties((raw, live_bits, (num, den)): TieCase) -> Outcome {
    let scores: Vec<f64> = raw.iter().map(|&s| s as f64).collect();
    let live = &live_bits[..scores.len()];
    let cap = Ratio::new(num, den);
    let a = expert_choice_select(&scores, live, cap);
    let b = expert_choice_select(&scores, live, cap);
    prop_assert_eq!(&a, &b);
    // oracle: stable sort by descending score keeps index order within ties
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| live[i]).collect();
    order.sort_by(|&x, &y| scores[y].partial_cmp(&scores[x]).unwrap());
    let k = capacity_k(cap, scores.len());
    let mut expect = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        expect[i] = true;
    }
    prop_assert_eq!(a.selected, expect);
    prop_assert_eq!(a.shortfall, order.len() < k);
    Ok(())
}

pub fn shift_case() -> impl Strategy<Value = (usize, Vec<f64>, f64)> {
    (1usize..=4, 1usize..=16)
        .prop_flat_map(|(n, rows)| (Just(n), prop::collection::vec(-5.0f64..5.0, n * rows), -50.0f64..50.0))
}

pub fn shift_invariance((n_r, logits, shift): (usize, Vec<f64>, f64)) -> Outcome {
    let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
    let a = token_choice_assign(&softmax_rows(&logits, n_r), n_r, None);
    let b = token_choice_assign(&softmax_rows(&shifted, n_r), n_r, None);
    prop_assert_eq!(a, b);
    Ok(())
}

pub fn bias_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1usize..=4).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(0.0f64..1.0, 16 * n),
            prop::collection::vec(-0.5f64..0.5, n),
        )
    })
}

pub fn bias_argmax_only((n_r, scores, bias): (usize, Vec<f64>, Vec<f64>)) -> Outcome {
    let before = scores.clone();
    let got = token_choice_assign(&scores, n_r, Some(&bias));
    prop_assert_eq!(&scores, &before);
    for (row, &d) in scores.chunks(n_r).zip(&got) {
        let biased: Vec<f64> = row.iter().zip(&bias).map(|(g, b)| g + b).collect();
        let best = biased.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(biased[d - 1], best);
        prop_assert!(biased[..d - 1].iter().all(|&v| v < best));
    }
    let mut b = vec![0.0; n_r];
    lossfree_bias_update(&vec![3; n_r], &mut b, 0.1);
    prop_assert!(b.iter().all(|&x| x == 0.0));
    Ok(())
}

pub fn biased_model_case() -> impl Strategy<Value = (u64, f64, f64)> {
    (0u64..1_000_000, -1.0f64..1.0, -1.0f64..1.0)
}

pub fn bias_leaves_outputs((seed, b0, b1): (u64, f64, f64)) -> Outcome {
    let rc = RouterConfig {
        lossfree_rate: 1e-3,
        ..RouterConfig::token_choice()
    };
    let model = Model::new(tiny(6, 2, Sharing::MiddleCycle), Some(rc), seed).unwrap();
    let mut biased = model.clone();
    biased.lossfree_bias = vec![b0, b1];
    let toks: Vec<usize> = (0..10).map(|i| ((seed as usize) + i * 3) % 11).collect();
    let mut tape = Tape::new();
    let free = biased.forward(&mut tape, &toks, 10, &ForwardOptions::default()).unwrap();
    let fixed = ForwardOptions {
        selection: Selection::Fixed(free.mask.clone()),
        ..Default::default()
    };
    let mut t1 = Tape::new();
    let a = model.forward(&mut t1, &toks, 10, &fixed).unwrap();
    let mut t2 = Tape::new();
    let b = biased.forward(&mut t2, &toks, 10, &fixed).unwrap();
    prop_assert_eq!(t1.value(a.logits).data(), t2.value(b.logits).data());
    let (ta, tb) = (a.token.unwrap(), b.token.unwrap());
    prop_assert_eq!(t1.value(ta.probs).data(), t2.value(tb.probs).data());
    Ok(())
}
