//! The `mor` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{RunConfig, SimDepths};
use crate::error::{Error, Result};
use crate::flops::{forward_flops_per_token, mor_flops_per_token, FlopsReport};
use crate::kv_cache::{cost_model, KvMode};
use crate::model::Model;
use crate::routing::capacity_schedule;
use crate::sim::{check_trace, simulate_depthwise, simulate_sequencewise, workload_from_model, TraceRow};
use crate::train::checkpoint::{self, Precision};
use crate::train::eval::{depth_annotation, evaluate, kv_similarity_report, render_annotation, EvalOptions};
use crate::train::Trainer;

pub const OUT_DIR_ENV: &str = "MOR_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "mor", version, about = "Mixture-of-Recursions toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Named starting configuration applied before the file.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured model and evaluate it.
    Train {
        /// Store the checkpoint in single precision.
        #[arg(long)]
        f32: bool,
    },
    /// Evaluate a checkpoint on the held-out corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Count dead tokens per (sequence, position).
        #[arg(long)]
        per_sequence_dead: bool,
    },
    /// Per-token FLOPs and budget conversions.
    Flops {
        #[arg(long, default_value_t = 16.5e18)]
        budget: f64,
        /// Also report the budget needed for this many training tokens.
        #[arg(long)]
        tokens: Option<f64>,
    },
    /// Depth-wise against sequence-wise batching.
    Simulate {
        /// Model for `sim.depths = model`; a fresh seeded model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the per-step depth-wise trace as CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Recursion depth assigned to each token of a text.
    Annotate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "text_file")]
        text: Option<String>,
        #[arg(long)]
        text_file: Option<PathBuf>,
    },
    /// Closed-form KV-cache cost ratios.
    CostModel {
        #[arg(long)]
        recursions: Option<u64>,
        #[arg(long, default_value_t = 1024)]
        k: u64,
        #[arg(long, default_value_t = 2048)]
        n_ctx: u64,
    },
    /// Key/value magnitudes and cross-layer similarity.
    KvReport {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Flops { .. } => "flops",
            Command::Simulate { .. } => "simulate",
            Command::Annotate { .. } => "annotate",
            Command::CostModel { .. } => "cost-model",
            Command::KvReport { .. } => "kv-report",
        }
    }

    fn component(&self) -> &'static str {
        match self {
            Command::Train { .. } | Command::Eval { .. } | Command::Annotate { .. } | Command::KvReport { .. } => {
                "train-harness"
            }
            Command::Flops { .. } => "flops-budget",
            Command::Simulate { .. } => "decode-sim",
            Command::CostModel { .. } => "kv-cache",
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: String,
    seed: u64,
    artifacts: Vec<String>,
    version: &'static str,
    started_unix: f64,
    finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

struct Outputs {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.artifacts.push(name.to_string());
        Ok(path)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, &serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(&common.preset)?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)?;
        cfg.apply(&RunConfig::parse_entries(&text)?)?;
    }
    let mut entries = Vec::new();
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Schema {
            line: 0,
            message: format!("--set expects KEY=VALUE, got `{o}`"),
        })?;
        let k = k.trim();
        if !crate::config::KEYS.contains(&k) {
            return Err(Error::UnknownKey(k.to_string()));
        }
        entries.push((0, k.to_string(), v.trim().to_string()));
    }
    cfg.apply(&entries)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_or_checkpoint(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => checkpoint::load(p),
        None => Model::new(cfg.model.clone(), cfg.router.clone(), cfg.seed),
    }
}

fn flops_table(rows: &[(&str, &FlopsReport)]) -> String {
    let mut s = format!(
        "{:<12} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
        "model", "forward", "linear", "attention", "lm_head", "router"
    );
    for (name, r) in rows {
        s.push_str(&format!(
            "{:<12} {:>14.4e} {:>14.4e} {:>14.4e} {:>14.4e} {:>14.4e}\n",
            name, r.per_token_forward, r.linear_part, r.attention_part, r.lm_head_part, r.router_part
        ));
    }
    s
}

fn execute(cli: &Cli, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let seq = cfg.train.seq_len;
    match &cli.command {
        Command::Train { f32 } => {
            let model = Model::new(cfg.model.clone(), cfg.router.clone(), cfg.seed)?;
            let mut trainer = Trainer::new(model, cfg.train.clone())?;
            let mut csv = Vec::new();
            let (first, last) = trainer.fit(cfg.seed, &mut csv)?;
            out.write("metrics.csv", &String::from_utf8_lossy(&csv))?;
            out.json("eval.json", &serde_json::json!({ "initial": first, "final": last }))?;
            let precision = if *f32 { Precision::F32 } else { Precision::F64 };
            checkpoint::save(&trainer.model, &out.dir.join("model.ckpt"), precision)?;
            out.artifacts.push("model.ckpt".into());
            println!("nll {:.4} -> {:.4} over {} steps", first.nll, last.nll, cfg.train.steps);
        }
        Command::Eval {
            checkpoint: path,
            per_sequence_dead,
        } => {
            let model = checkpoint::load(path)?;
            let corpus = cfg.train.corpus.load(cfg.seed)?;
            let (_, held) = corpus.split(cfg.train.eval_fraction);
            let batches = held.fixed_batches(cfg.train.eval_batches, cfg.train.batch_size, seq)?;
            let report = evaluate(
                &model,
                &batches,
                &EvalOptions {
                    kv_mode: cfg.train.kv_mode,
                    per_sequence_dead: *per_sequence_dead,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            out.json("eval.json", &report)?;
        }
        Command::Flops { budget, tokens } => {
            let vanilla_cfg = cfg.model.with_recursion(cfg.model.total_layers, 1, crate::model::Sharing::None);
            let vanilla = forward_flops_per_token(&vanilla_cfg, seq)?;
            let caps = capacity_schedule(cfg.model.recursions)?;
            let routed = mor_flops_per_token(&cfg.model, &caps, cfg.train.kv_mode, cfg.router.as_ref(), seq)?;
            let summary = |r: &FlopsReport| {
                serde_json::json!({
                    "report": r,
                    "without_lm_head": r.without_lm_head(),
                    "per_token_training": r.per_token_training(),
                    "tokens_for_budget": r.tokens_for_budget(*budget),
                    "budget_for_tokens": tokens.map(|t| r.budget_for_tokens(t)),
                })
            };
            print!("{}", flops_table(&[("vanilla", &vanilla), ("configured", &routed)]));
            println!("tokens for {budget:.3e} FLOPs: vanilla {:.4e}, configured {:.4e}",
                vanilla.tokens_for_budget(*budget), routed.tokens_for_budget(*budget));
            let json = serde_json::json!({
                "seq_len": seq,
                "budget": budget,
                "vanilla": summary(&vanilla),
                "configured": summary(&routed),
            });
            println!("{}", serde_json::to_string_pretty(&json)?);
            out.json("flops.json", &json)?;
        }
        Command::Simulate { checkpoint: path, trace } => {
            let n_r = cfg.model.recursions;
            let spec = cfg.sim.workload_spec(n_r, cfg.seed);
            let workload = match cfg.sim.depths {
                SimDepths::Proxy(_) => spec.generate()?,
                SimDepths::Model => {
                    let model = model_or_checkpoint(cfg, path.as_deref())?;
                    workload_from_model(&model, &spec, cfg.sim.kv_mode, cfg.sim.temperature)?
                }
            };
            let mut sc = cfg.sim.sim_config(n_r);
            sc.record_trace = true;
            let depthwise = simulate_depthwise(&workload, &sc)?;
            check_trace(&workload, &sc, &depthwise)?;
            let sequencewise = simulate_sequencewise(&workload, &sc)?;
            let json = serde_json::json!({
                "workload": spec,
                "config": sc,
                "total_tokens": workload.total_tokens(),
                "depthwise": depthwise.stats,
                "sequencewise": sequencewise.stats,
                "speedup": depthwise.stats.tokens_per_step / sequencewise.stats.tokens_per_step,
            });
            println!("{}", serde_json::to_string_pretty(&json)?);
            out.json("sim.json", &json)?;
            if *trace {
                let mut csv = String::from(TraceRow::CSV_HEADER);
                csv.push('\n');
                for row in &depthwise.trace {
                    csv.push_str(&row.csv());
                    csv.push('\n');
                }
                out.write("trace.csv", &csv)?;
            }
        }
        Command::Annotate {
            checkpoint: path,
            text,
            text_file,
        } => {
            let model = checkpoint::load(path)?;
            let text = match (text, text_file) {
                (Some(t), _) => t.clone(),
                (None, Some(p)) => fs::read_to_string(p)?,
                (None, None) => return Err(Error::Config("annotate needs --text or --text-file".into())),
            };
            let ann = depth_annotation(&model, &text)?;
            println!("{}", render_annotation(&ann));
            let rows: Vec<_> = ann.iter().map(|(t, d)| serde_json::json!({ "token": t, "depth": d })).collect();
            out.json("annotation.json", &rows)?;
        }
        Command::CostModel { recursions, k, n_ctx } => {
            let n = recursions.unwrap_or(cfg.model.recursions as u64);
            let mut rows = Vec::new();
            for mode in [KvMode::RecursionWise, KvMode::RecursiveSharing, KvMode::Hybrid] {
                let c = cost_model(n, *k, *n_ctx, mode)?;
                let show = |r: num_rational::Ratio<u64>| format!("{}/{}", r.numer(), r.denom());
                println!(
                    "{:<18} memory {:>8}  io {:>8}  attention {:>12}",
                    mode.to_string(),
                    show(c.kv_memory),
                    show(c.kv_io),
                    show(c.attn_flops)
                );
                rows.push(serde_json::json!({
                    "mode": mode,
                    "kv_memory": show(c.kv_memory),
                    "kv_io": show(c.kv_io),
                    "attn_flops": show(c.attn_flops),
                }));
            }
            out.json("cost_model.json", &serde_json::json!({ "recursions": n, "k": k, "n_ctx": n_ctx, "modes": rows }))?;
        }
        Command::KvReport { checkpoint: path } => {
            let model = model_or_checkpoint(cfg, path.as_deref())?;
            let corpus = cfg.train.corpus.load(cfg.seed)?;
            let (_, held) = corpus.split(cfg.train.eval_fraction);
            let batch = held.fixed_batches(1, cfg.train.batch_size, seq)?.remove(0);
            let report = kv_similarity_report(&model, &batch)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            out.json("kv_report.json", &report)?;
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (program name first) and returns the exit code:
/// 0 on success, 2 for usage or configuration errors, 1 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let started = now();
    let cfg = match load_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return if e.is_schema() { 2 } else { 1 };
        }
    };
    let dir = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("mor-out"));
    let mut out = Outputs { dir, artifacts: Vec::new() };
    let result = fs::create_dir_all(&out.dir)
        .map_err(Error::from)
        .and_then(|_| out.write("config.txt", &cfg.to_text()).map(|_| ()))
        .and_then(|_| execute(&cli, &cfg, &mut out))
        .and_then(|_| {
            let manifest = RunManifest {
                command: cli.command.name().into(),
                config: cfg.to_text(),
                seed: cfg.seed,
                artifacts: out.artifacts.clone(),
                version: env!("CARGO_PKG_VERSION"),
                started_unix: started,
                finished_unix: now(),
            };
            fs::write(out.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            Ok(())
        });
    match result {
        Ok(()) => 0,
        Err(e) if e.is_schema() => {
            eprintln!("config error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error in {}: {e}", cli.command.component());
            1
        }
    }
}
