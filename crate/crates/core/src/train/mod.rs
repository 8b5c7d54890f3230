//! Toy-scale training and evaluation.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod schedule;
pub mod tokenizer;

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::KvMode;
use crate::model::{ForwardOptions, Model, Selection};
use crate::routing::{lossfree_bias_update, Family};
use crate::tensor::Tape;
use data::{Batch, Batcher, Corpus};
use eval::{evaluate, EvalOptions, EvalReport};
use objective::{objective, TERM_NAMES};
use optim::{AdamW, AdamWConfig};
use schedule::{LrSchedule, ScheduleKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CorpusSource {
    Synthetic { bytes: usize },
    File(PathBuf),
}

impl CorpusSource {
    pub fn load(&self, seed: u64) -> Result<Corpus> {
        let text = match self {
            CorpusSource::Synthetic { bytes } => data::synthetic_corpus(*bytes, seed),
            CorpusSource::File(p) => std::fs::read_to_string(p)?,
        };
        Ok(Corpus::from_text(&text))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub schedule: ScheduleKind,
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    /// Trapezoid warm-up; `None` is 5% of the schedule length.
    pub warmup: Option<usize>,
    /// Trapezoid cool-down; `None` is 20% of the schedule length.
    pub cooldown: Option<usize>,
    /// Schedule length when it differs from `steps`.
    pub schedule_len: Option<usize>,
    pub optimizer: AdamWConfig,
    pub kv_mode: KvMode,
    pub corpus: CorpusSource,
    /// Share of the corpus held out for evaluation.
    pub eval_fraction: f64,
    pub eval_batches: usize,
    pub log_every: usize,
    /// Zero evaluates only at the first and last step.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn toy(steps: usize) -> Self {
        Self {
            steps,
            batch_size: 8,
            seq_len: 64,
            schedule: ScheduleKind::Trapezoid,
            lr: 3e-3,
            min_lr: 3e-4,
            warmup: None,
            cooldown: None,
            schedule_len: None,
            optimizer: AdamWConfig::default(),
            kv_mode: KvMode::RecursionWise,
            corpus: CorpusSource::Synthetic { bytes: 1 << 20 },
            eval_fraction: 0.05,
            eval_batches: 4,
            log_every: 10,
            eval_every: 0,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        let len = self.schedule_len.unwrap_or(self.steps);
        match self.schedule {
            ScheduleKind::Trapezoid => {
                let cooldown = self.cooldown.unwrap_or((len / 5).max(1));
                LrSchedule::Trapezoid {
                    warmup: self.warmup.unwrap_or(len / 20),
                    plateau_end: len.saturating_sub(cooldown),
                    cooldown,
                    peak: self.lr,
                }
            }
            ScheduleKind::Cosine => LrSchedule::Cosine {
                peak: self.lr,
                min: self.min_lr,
                steps: len,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.lr_schedule();
        schedule.validate()?;
        if self.steps > schedule.len() {
            return Err(Error::Config(format!(
                "{} steps exceed the schedule length {}",
                self.steps,
                schedule.len()
            )));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size, seq_len and log_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Losses and bookkeeping of one optimizer update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// Every entry of [`TERM_NAMES`], zero when the term is disabled.
    pub terms: Vec<(&'static str, f64)>,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    schedule: LrSchedule,
    pub opt: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.optimizer);
        Ok(Self {
            schedule: cfg.lr_schedule(),
            model,
            cfg,
            opt,
            step: 0,
        })
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.step;
        let lr = self.schedule.rate(step)?;
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            selection: Selection::TopK,
            kv_mode: self.cfg.kv_mode,
            ..Default::default()
        };
        let diverged = |e: Error| match e {
            Error::NonFinite { op, .. } => Error::Divergence {
                step,
                component: op.to_string(),
            },
            other => other,
        };
        let out = self.model.forward(&mut tape, &batch.inputs, batch.seq_len, &opts).map_err(diverged)?;
        let loss = objective(&mut tape, &self.model, &out, &batch.targets).map_err(diverged)?;
        let values = loss.values(&tape);
        let total = tape.value(loss.total).item();
        for &(name, v) in values.iter().chain([("total", total)].iter()) {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step,
                    component: name.to_string(),
                });
            }
        }
        let grads = tape.backward(loss.total).map_err(diverged)?;
        let grad_norm = self.opt.update(&mut self.model.params, &grads, lr);

        if let (Some(rc), Some(tc)) = (&self.model.router, &out.token) {
            if rc.family == Family::TokenChoice && rc.lossfree_rate > 0.0 {
                let mut counts = vec![0; self.model.cfg.recursions];
                for &d in &tc.assignment {
                    counts[d - 1] += 1;
                }
                lossfree_bias_update(&counts, &mut self.model.lossfree_bias, rc.lossfree_rate);
            }
        }
        self.step += 1;
        let terms = TERM_NAMES
            .iter()
            .map(|&n| (n, values.iter().find(|(m, _)| *m == n).map_or(0.0, |&(_, v)| v)))
            .collect();
        Ok(StepRecord {
            step,
            lr,
            total,
            terms,
            grad_norm,
        })
    }

    /// Trains for the configured number of steps, writing one CSV row per
    /// log step to `metrics`. Returns the evaluations taken at step zero
    /// and after the last step.
    pub fn fit(&mut self, seed: u64, metrics: &mut dyn Write) -> Result<(EvalReport, EvalReport)> {
        let corpus = self.cfg.corpus.load(seed)?;
        let (train, held) = corpus.split(self.cfg.eval_fraction);
        let evals = held.fixed_batches(self.cfg.eval_batches, self.cfg.batch_size, self.cfg.seq_len)?;
        let mut batcher = Batcher::new(train, self.cfg.batch_size, self.cfg.seq_len, seed ^ 0x5eed)?;
        let eval_opts = EvalOptions {
            kv_mode: self.cfg.kv_mode,
            ..Default::default()
        };
        writeln!(metrics, "{}", csv_header())?;
        let first = evaluate(&self.model, &evals, &eval_opts)?;
        let mut last = first.clone();
        while self.step < self.cfg.steps {
            let batch = batcher.next_batch();
            let rec = self.train_step(&batch)?;
            let done = self.step == self.cfg.steps;
            let due_eval = done || (self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0);
            let report = if due_eval {
                last = evaluate(&self.model, &evals, &eval_opts)?;
                Some(&last)
            } else {
                None
            };
            if done || due_eval || rec.step % self.cfg.log_every == 0 {
                writeln!(metrics, "{}", csv_row(&rec, report))?;
            }
        }
        Ok((first, last))
    }
}

pub fn csv_header() -> String {
    let mut cols = vec!["step", "lr", "total"];
    cols.extend(TERM_NAMES);
    cols.extend(["grad_norm", "eval_nll", "dead_ratio", "samp_acc", "auc", "maxvio", "entropy"]);
    cols.join(",")
}

pub fn csv_row(rec: &StepRecord, eval: Option<&EvalReport>) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut cells = vec![rec.step.to_string(), rec.lr.to_string(), rec.total.to_string()];
    cells.extend(rec.terms.iter().map(|(_, v)| v.to_string()));
    cells.push(rec.grad_norm.to_string());
    cells.push(opt(eval.map(|e| e.nll)));
    let r = eval.map(|e| &e.router);
    for f in [
        r.and_then(|r| r.dead_ratio),
        r.and_then(|r| r.samp_acc),
        r.and_then(|r| r.auc),
        r.and_then(|r| r.maxvio),
        r.and_then(|r| r.entropy),
    ] {
        cells.push(opt(f));
    }
    cells.join(",")
}
