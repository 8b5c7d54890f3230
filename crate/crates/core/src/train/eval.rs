use serde::Serialize;

use super::data::Batch;
use super::metrics::{auc, dead_token_ratio, maxvio, sampling_accuracy, selection_entropy};
use super::tokenizer::{encode, token_str};
use crate::error::{Error, Result};
use crate::kv_cache::KvMode;
use crate::model::{ForwardOptions, Model, Selection};
use crate::routing::Family;
use crate::tensor::Tape;

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub kv_mode: KvMode,
    /// Count dead tokens per (sequence, position) instead of per position.
    pub per_sequence_dead: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            kv_mode: KvMode::RecursionWise,
            per_sequence_dead: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RouterMetrics {
    pub dead_ratio: Option<f64>,
    pub samp_acc: Option<f64>,
    /// Selection-score AUC over every routed decision, pooled over depths.
    pub auc: Option<f64>,
    pub maxvio: Option<f64>,
    pub entropy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub nll: f64,
    /// NLL with routing truncated at depth `c`, for `c` in `1..=N_r`.
    pub per_depth_nll: Vec<f64>,
    pub router: RouterMetrics,
    /// Tokens ending at each depth.
    pub depth_histogram: Vec<usize>,
    pub tokens: usize,
}

struct Pass {
    nll_sum: f64,
    tokens: usize,
}

fn nll_pass(model: &Model, batches: &[Batch], opts: &EvalOptions, max_depth: Option<usize>) -> Result<Pass> {
    let mut pass = Pass { nll_sum: 0.0, tokens: 0 };
    let fo = ForwardOptions {
        selection: Selection::TopK,
        kv_mode: opts.kv_mode,
        max_depth,
        ..Default::default()
    };
    for b in batches {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &b.inputs, b.seq_len, &fo)?;
        let ce = tape.cross_entropy(out.logits, &b.targets)?;
        pass.nll_sum += tape.value(ce).item() * b.targets.len() as f64;
        pass.tokens += b.targets.len();
    }
    Ok(pass)
}

pub fn evaluate(model: &Model, batches: &[Batch], opts: &EvalOptions) -> Result<EvalReport> {
    if batches.is_empty() {
        return Err(Error::Config("evaluation needs at least one batch".into()));
    }
    let n_r = model.cfg.recursions;
    let fo = ForwardOptions {
        selection: Selection::TopK,
        kv_mode: opts.kv_mode,
        ..Default::default()
    };
    let mut nll_sum = 0.0;
    let mut tokens = 0;
    let mut hist = vec![0; n_r + 1];
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut predicted = Vec::new();
    let mut final_masks = Vec::new();
    let mut loads = vec![0.0; n_r];
    let mut prob_sum = vec![0.0; n_r];
    let threshold = model.router.as_ref().map_or(0.5, |r| r.inference_threshold);

    for b in batches {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &b.inputs, b.seq_len, &fo)?;
        let ce = tape.cross_entropy(out.logits, &b.targets)?;
        nll_sum += tape.value(ce).item() * b.targets.len() as f64;
        tokens += b.targets.len();
        for (d, c) in out.mask.depth_histogram().into_iter().enumerate() {
            hist[d] += c;
        }
        for d in out.expert.iter().filter(|d| d.routed) {
            let p = tape.value(d.aux_probs.unwrap_or(d.probs)).data();
            scores.extend_from_slice(p);
            labels.extend_from_slice(&d.topk);
            predicted.extend(p.iter().map(|&v| v > threshold));
        }
        if out.expert.len() == n_r && out.expert[n_r - 1].routed {
            let col = out.mask.column(n_r - 1);
            final_masks.extend(col.chunks(b.seq_len).map(<[bool]>::to_vec));
        }
        if let Some(tc) = &out.token {
            for &a in &tc.assignment {
                loads[a - 1] += 1.0;
            }
            let probs = tape.value(tc.probs);
            for row in 0..probs.rows() {
                for (s, &p) in prob_sum.iter_mut().zip(probs.row(row)) {
                    *s += p;
                }
            }
        }
    }
    let nll = nll_sum / tokens as f64;

    let mut per_depth_nll = Vec::with_capacity(n_r);
    for c in 1..n_r {
        let p = nll_pass(model, batches, opts, Some(c))?;
        per_depth_nll.push(p.nll_sum / p.tokens as f64);
    }
    per_depth_nll.push(nll);

    let mut router = RouterMetrics::default();
    match model.router.as_ref().map(|r| r.family) {
        Some(Family::ExpertChoice) => {
            router.auc = auc(&scores, &labels).ok();
            router.samp_acc = sampling_accuracy(&predicted, &labels).ok();
            router.dead_ratio = dead_token_ratio(&final_masks, opts.per_sequence_dead).ok();
        }
        Some(Family::TokenChoice) => {
            router.maxvio = maxvio(&loads).ok();
            let total: f64 = prob_sum.iter().sum();
            let mean: Vec<f64> = prob_sum.iter().map(|p| p / total).collect();
            router.entropy = selection_entropy(&mean).ok();
        }
        None => {}
    }
    Ok(EvalReport {
        nll,
        per_depth_nll,
        router,
        depth_histogram: hist[1..].to_vec(),
        tokens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KvReport {
    /// Unrolled layers with recorded keys, ascending.
    pub layers: Vec<usize>,
    pub blocks: Vec<usize>,
    pub key_norms: Vec<f64>,
    pub value_norms: Vec<f64>,
    pub key_cosine: Vec<Vec<f64>>,
    pub value_cosine: Vec<Vec<f64>>,
    /// Mean key cosine over layer pairs that share a block.
    pub within_block_cosine: Option<f64>,
    pub across_block_cosine: Option<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-layer key/value magnitudes and cosine similarity of layer-mean states.
pub fn kv_similarity_report(model: &Model, batch: &Batch) -> Result<KvReport> {
    let mut tape = Tape::new();
    let fo = ForwardOptions {
        selection: Selection::TopK,
        kv_mode: KvMode::RecursionWise,
        record_kv: true,
        ..Default::default()
    };
    let out = model.forward(&mut tape, &batch.inputs, batch.seq_len, &fo)?;
    let mut kv = out.kv;
    kv.sort_by_key(|k| k.layer);
    let stats = |t: &crate::tensor::Tensor| {
        let (rows, cols) = (t.rows(), t.cols());
        let mut mean = vec![0.0; cols];
        let mut norm = 0.0;
        for r in 0..rows {
            let row = t.row(r);
            norm += row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x / rows as f64;
            }
        }
        (norm / rows.max(1) as f64, mean)
    };
    let (mut key_norms, mut value_norms, mut key_means, mut value_means) = (vec![], vec![], vec![], vec![]);
    for l in &kv {
        let (kn, km) = stats(&l.keys);
        let (vn, vm) = stats(&l.values);
        key_norms.push(kn);
        value_norms.push(vn);
        key_means.push(km);
        value_means.push(vm);
    }
    let matrix = |means: &[Vec<f64>]| -> Vec<Vec<f64>> {
        means.iter().map(|a| means.iter().map(|b| cosine(a, b)).collect()).collect()
    };
    let key_cosine = matrix(&key_means);
    let value_cosine = matrix(&value_means);
    let layers: Vec<usize> = kv.iter().map(|l| l.layer).collect();
    let blocks: Vec<usize> = layers.iter().map(|&l| model.schedule().blocks[l]).collect();
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for i in 0..layers.len() {
        for j in i + 1..layers.len() {
            if blocks[i] == blocks[j] {
                within.push(key_cosine[i][j]);
            } else {
                across.push(key_cosine[i][j]);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(KvReport {
        within_block_cosine: mean(&within),
        across_block_cosine: mean(&across),
        layers,
        blocks,
        key_norms,
        value_norms,
        key_cosine,
        value_cosine,
    })
}

/// Each token of `text` with the number of recursion steps it received
/// under teacher-forced routing. Text longer than the context is routed
/// window by window.
pub fn depth_annotation(model: &Model, text: &str) -> Result<Vec<(String, usize)>> {
    let tokens = encode(text);
    let fo = ForwardOptions {
        selection: Selection::TopK,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(tokens.len());
    for window in tokens.chunks(model.cfg.ctx_len) {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, window, window.len(), &fo)?;
        for (i, &t) in window.iter().enumerate() {
            out.push((token_str(t), f.mask.depth(i)));
        }
    }
    Ok(out)
}

/// Renders an annotation as text with each token followed by its depth.
pub fn render_annotation(ann: &[(String, usize)]) -> String {
    ann.iter().map(|(t, d)| format!("{t}[{d}]")).collect()
}
