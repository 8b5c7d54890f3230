//! Step-count simulation of continuous depth-wise batching against a
//! continuous sequence-wise baseline. One step is one invocation of the
//! shared block over the current batch.

mod memory;
mod workload;

pub use memory::{max_batch_size, relative_max_batch, slots_for, MemoryModel};
pub use workload::{workload_from_model, DepthSource, Request, Workload, WorkloadSpec};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::KvMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub slots: usize,
    pub recursions: usize,
    pub kv_mode: KvMode,
    /// Exited tokens wait until this many are buffered before the final
    /// layers run. Always flushed when nothing else is in flight.
    pub drain_threshold: usize,
    /// Requests admitted at once; `None` means one per slot.
    pub max_active: Option<usize>,
    pub record_trace: bool,
}

impl SimConfig {
    pub fn new(slots: usize, recursions: usize) -> Self {
        Self {
            slots,
            recursions,
            kv_mode: KvMode::RecursionWise,
            drain_threshold: 1,
            max_active: None,
            record_trace: false,
        }
    }

    fn validate(&self, workload: &Workload) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::Config("simulation needs at least one slot".into()));
        }
        if self.drain_threshold == 0 || self.max_active == Some(0) {
            return Err(Error::Config("drain_threshold and max_active must be positive".into()));
        }
        if workload.requests.is_empty() {
            return Err(Error::Config("empty workload".into()));
        }
        for r in &workload.requests {
            if r.depths.is_empty() || r.depths.iter().any(|&d| d == 0 || d > self.recursions) {
                return Err(Error::Config(format!(
                    "request {} has a depth outside 1..={} or no tokens",
                    r.id, self.recursions
                )));
            }
        }
        Ok(())
    }

    fn kv_entries_at(&self, depth: usize) -> usize {
        match self.kv_mode {
            KvMode::RecursiveSharing => usize::from(depth == 1),
            KvMode::RecursionWise | KvMode::Hybrid => 1,
        }
    }
}

/// State of one batch slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotState {
    pub request: usize,
    pub position: usize,
    /// Recursion steps already applied to the current token.
    pub depth: usize,
    pub target_len: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub occupied: usize,
    /// Tokens waiting for a slot after this step's refill.
    pub ready: usize,
    pub waiting_requests: usize,
    pub buffered: usize,
    pub emitted: usize,
    pub kv_entries: usize,
    pub active_requests: usize,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str =
        "step,occupied,ready,waiting_requests,buffered,emitted,kv_entries,active_requests";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.occupied,
            self.ready,
            self.waiting_requests,
            self.buffered,
            self.emitted,
            self.kv_entries,
            self.active_requests
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SimStats {
    pub steps: usize,
    pub tokens: usize,
    pub tokens_per_step: f64,
    /// Mean occupied fraction of the slots over all steps.
    pub occupancy: f64,
    pub peak_kv_entries: usize,
    /// Token-depth units of shared-block work.
    pub block_work: usize,
    /// Steps an exited token waited before the final layers, mean and max.
    pub mean_drain_latency: f64,
    pub max_drain_latency: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SimResult {
    pub stats: SimStats,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

struct Progress {
    position: usize,
    kv: usize,
}

/// Continuous depth-wise batching: every occupied slot advances its token
/// one recursion step per step; a token that reaches its depth leaves the
/// slot, waits in the exit buffer, and once drained lets its request queue
/// the next token.
pub fn simulate_depthwise(workload: &Workload, cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate(workload)?;
    let reqs = &workload.requests;
    let max_active = cfg.max_active.unwrap_or(cfg.slots);
    let mut waiting: VecDeque<usize> = (0..reqs.len()).collect();
    let mut ready: VecDeque<usize> = VecDeque::new();
    let mut slots: Vec<Option<SlotState>> = vec![None; cfg.slots];
    let mut buffer: VecDeque<(usize, usize)> = VecDeque::new();
    let mut progress: Vec<Progress> = reqs.iter().map(|_| Progress { position: 0, kv: 0 }).collect();
    let (mut active, mut kv_total) = (0usize, 0usize);
    let mut stats = SimStats::default();
    let mut trace = Vec::new();
    let (mut occupied_sum, mut latency_sum) = (0usize, 0usize);

    loop {
        while active < max_active {
            let Some(r) = waiting.pop_front() else { break };
            ready.push_back(r);
            active += 1;
        }
        for slot in slots.iter_mut().filter(|s| s.is_none()) {
            let Some(r) = ready.pop_front() else { break };
            *slot = Some(SlotState {
                request: r,
                position: progress[r].position,
                depth: 0,
                target_len: reqs[r].depths.len(),
            });
        }
        let occupied = slots.iter().filter(|s| s.is_some()).count();
        let ready_after_fill = ready.len();
        if occupied == 0 && buffer.is_empty() {
            break;
        }
        let mut emitted = 0;
        if occupied > 0 {
            stats.steps += 1;
            occupied_sum += occupied;
            stats.block_work += occupied;
            for slot in slots.iter_mut() {
                let Some(s) = slot.as_mut() else { continue };
                s.depth += 1;
                let add = cfg.kv_entries_at(s.depth);
                progress[s.request].kv += add;
                kv_total += add;
                if s.depth == reqs[s.request].depths[s.position] {
                    buffer.push_back((s.request, stats.steps));
                    *slot = None;
                }
            }
        }
        stats.peak_kv_entries = stats.peak_kv_entries.max(kv_total);
        let in_flight = slots.iter().filter(|s| s.is_some()).count() + ready.len();
        while buffer.len() >= cfg.drain_threshold || (in_flight == 0 && !buffer.is_empty()) {
            for _ in 0..cfg.slots.min(buffer.len()) {
                let (r, at) = buffer.pop_front().unwrap();
                let wait = stats.steps - at;
                latency_sum += wait;
                stats.max_drain_latency = stats.max_drain_latency.max(wait);
                emitted += 1;
                let p = &mut progress[r];
                p.position += 1;
                if p.position < reqs[r].depths.len() {
                    ready.push_back(r);
                } else {
                    kv_total -= p.kv;
                    active -= 1;
                }
            }
            if in_flight > 0 {
                break;
            }
        }
        stats.tokens += emitted;
        if cfg.record_trace {
            trace.push(TraceRow {
                step: stats.steps,
                occupied,
                ready: ready_after_fill,
                waiting_requests: waiting.len(),
                buffered: buffer.len(),
                emitted,
                kv_entries: kv_total,
                active_requests: active,
            });
        }
    }
    finish(&mut stats, occupied_sum, latency_sum, cfg.slots);
    Ok(SimResult { stats, trace })
}

/// Continuous sequence-wise batching: each slot holds one request, and a
/// batch iteration lasts as many steps as the deepest token in it. Finished
/// requests are replaced before the next iteration.
pub fn simulate_sequencewise(workload: &Workload, cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate(workload)?;
    let reqs = &workload.requests;
    let mut waiting: VecDeque<usize> = (0..reqs.len()).collect();
    let mut slots: Vec<Option<(usize, usize)>> = vec![None; cfg.slots];
    let mut kv = vec![0usize; reqs.len()];
    let mut kv_total = 0;
    let mut stats = SimStats::default();
    let mut trace = Vec::new();
    let mut occupied_sum = 0;
    loop {
        for slot in slots.iter_mut().filter(|s| s.is_none()) {
            let Some(r) = waiting.pop_front() else { break };
            *slot = Some((r, 0));
        }
        let live: Vec<(usize, usize)> = slots.iter().flatten().copied().collect();
        if live.is_empty() {
            break;
        }
        let span = live.iter().map(|&(r, p)| reqs[r].depths[p]).max().unwrap();
        for step in 1..=span {
            let working = live.iter().filter(|&&(r, p)| reqs[r].depths[p] >= step).count();
            stats.steps += 1;
            stats.block_work += working;
            occupied_sum += live.len();
            let add: usize = live
                .iter()
                .filter(|&&(r, p)| reqs[r].depths[p] >= step)
                .map(|_| cfg.kv_entries_at(step))
                .sum();
            for &(r, p) in &live {
                if reqs[r].depths[p] >= step {
                    kv[r] += cfg.kv_entries_at(step);
                }
            }
            kv_total += add;
            stats.peak_kv_entries = stats.peak_kv_entries.max(kv_total);
            if cfg.record_trace {
                trace.push(TraceRow {
                    step: stats.steps,
                    occupied: live.len(),
                    ready: 0,
                    waiting_requests: waiting.len(),
                    buffered: 0,
                    emitted: if step == span { live.len() } else { 0 },
                    kv_entries: kv_total,
                    active_requests: live.len(),
                });
            }
        }
        stats.tokens += live.len();
        for slot in slots.iter_mut() {
            if let Some((r, p)) = slot {
                *p += 1;
                if *p == reqs[*r].depths.len() {
                    kv_total -= kv[*r];
                    *slot = None;
                }
            }
        }
    }
    finish(&mut stats, occupied_sum, 0, cfg.slots);
    Ok(SimResult { stats, trace })
}

fn finish(stats: &mut SimStats, occupied_sum: usize, latency_sum: usize, slots: usize) {
    if stats.steps > 0 {
        stats.tokens_per_step = stats.tokens as f64 / stats.steps as f64;
        stats.occupancy = occupied_sum as f64 / (stats.steps * slots) as f64;
    }
    if stats.tokens > 0 {
        stats.mean_drain_latency = latency_sum as f64 / stats.tokens as f64;
    }
}

/// Checks conservation against the workload and, for depth-wise traces,
/// that no slot sat idle while tokens were waiting.
pub fn check_trace(workload: &Workload, cfg: &SimConfig, result: &SimResult) -> Result<()> {
    let expected: usize = workload.requests.iter().map(|r| r.depths.len()).sum();
    let emitted: usize = result.trace.iter().map(|t| t.emitted).sum();
    if result.stats.tokens != expected || (!result.trace.is_empty() && emitted != expected) {
        return Err(Error::Domain(format!(
            "emitted {} (trace {emitted}) of {expected} tokens",
            result.stats.tokens
        )));
    }
    let work: usize = workload.requests.iter().flat_map(|r| &r.depths).sum();
    if result.stats.block_work != work {
        return Err(Error::Domain(format!("block work {} != {work}", result.stats.block_work)));
    }
    for row in &result.trace {
        if row.ready > 0 && row.occupied != cfg.slots {
            return Err(Error::Domain(format!(
                "step {}: {} of {} slots busy with {} tokens ready",
                row.step, row.occupied, cfg.slots, row.ready
            )));
        }
        if row.occupied > cfg.slots {
            return Err(Error::Domain(format!("step {}: over-full batch", row.step)));
        }
    }
    if let Some(last) = result.trace.last() {
        if last.kv_entries != 0 || last.active_requests != 0 {
            return Err(Error::Domain("state left after the final step".into()));
        }
    }
    Ok(())
}
