//! Per-depth key/value stores for incremental decoding and the closed-form
//! memory / IO / attention cost ratios of each caching mode.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KvMode {
    /// Depth r caches and attends over the tokens selected at depth r.
    RecursionWise,
    /// Only depth 1 is cached; deeper depths reuse it and skip the K/V projection.
    RecursiveSharing,
    /// Depth-r entries for tokens active at r, depth-1 entries for the rest.
    Hybrid,
}

impl fmt::Display for KvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KvMode::RecursionWise => "recursion-wise",
            KvMode::RecursiveSharing => "recursive-sharing",
            KvMode::Hybrid => "hybrid",
        })
    }
}

impl FromStr for KvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recursion-wise" => Ok(KvMode::RecursionWise),
            "recursive-sharing" => Ok(KvMode::RecursiveSharing),
            "hybrid" => Ok(KvMode::Hybrid),
            other => Err(Error::Config(format!("unknown kv mode `{other}`"))),
        }
    }
}

impl KvMode {
    /// Depth whose store must hold the query token.
    pub fn governing_depth(self, depth: usize) -> usize {
        match self {
            KvMode::RecursiveSharing => 1,
            _ => depth,
        }
    }

    /// Whether a depth computes its own K/V projections.
    pub fn projects_at(self, depth: usize) -> bool {
        depth == 1 || self != KvMode::RecursiveSharing
    }
}

#[derive(Clone, Debug, Default)]
struct DepthStore {
    tokens: Vec<usize>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl DepthStore {
    fn find(&self, token: usize) -> Option<usize> {
        self.tokens.binary_search(&token).ok()
    }

    fn prefix_len(&self, token: usize) -> usize {
        self.tokens.partition_point(|&t| t <= token)
    }
}

/// Keys and values visible to one query, ordered by token index.
#[derive(Clone, Debug, PartialEq)]
pub struct KvView {
    pub keys: Tensor,
    pub values: Tensor,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    /// Entries appended per depth.
    pub appended: Vec<usize>,
    /// Entries returned by `attend_view` per depth.
    pub reads: Vec<usize>,
}

/// Append-only cache for one layer position of the recursion block.
#[derive(Clone, Debug)]
pub struct KvCache {
    mode: KvMode,
    width: usize,
    stores: Vec<DepthStore>,
    stats: CacheStats,
}

impl KvCache {
    pub fn new(mode: KvMode, depths: usize, width: usize) -> Self {
        Self {
            mode,
            width,
            stores: vec![DepthStore::default(); depths],
            stats: CacheStats {
                appended: vec![0; depths],
                reads: vec![0; depths],
            },
        }
    }

    pub fn mode(&self) -> KvMode {
        self.mode
    }

    pub fn depths(&self) -> usize {
        self.stores.len()
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn tokens(&self, depth: usize) -> &[usize] {
        &self.stores[depth - 1].tokens
    }

    pub fn len(&self, depth: usize) -> usize {
        self.stores[depth - 1].tokens.len()
    }

    pub fn total_entries(&self) -> usize {
        self.stores.iter().map(|s| s.tokens.len()).sum()
    }

    fn check_depth(&self, depth: usize) -> Result<()> {
        if depth == 0 || depth > self.stores.len() {
            return Err(Error::Cache(format!(
                "depth {depth} outside 1..={}",
                self.stores.len()
            )));
        }
        Ok(())
    }

    /// Appends one token's key and value at `depth` (1-based).
    pub fn append(&mut self, depth: usize, token: usize, key: &[f64], value: &[f64]) -> Result<()> {
        self.check_depth(depth)?;
        if !self.mode.projects_at(depth) {
            return Err(Error::Cache(format!(
                "{} caches only depth 1, got an append at depth {depth}",
                self.mode
            )));
        }
        if key.len() != self.width || value.len() != self.width {
            return Err(Error::shape(
                "kv append",
                format!("width {} vs key {} / value {}", self.width, key.len(), value.len()),
            ));
        }
        let store = &mut self.stores[depth - 1];
        if store.tokens.last().is_some_and(|&t| t >= token) {
            return Err(Error::Cache(format!(
                "token {token} appended out of order at depth {depth}"
            )));
        }
        store.tokens.push(token);
        store.keys.extend_from_slice(key);
        store.values.extend_from_slice(value);
        self.stats.appended[depth - 1] += 1;
        Ok(())
    }

    /// Causal view for a query token at `depth`.
    pub fn attend_view(&mut self, depth: usize, query: usize) -> Result<KvView> {
        self.check_depth(depth)?;
        let gov = self.mode.governing_depth(depth);
        if self.stores[gov - 1].find(query).is_none() {
            return Err(Error::Cache(format!(
                "query token {query} missing from the depth-{gov} store"
            )));
        }
        let w = self.width;
        let view = match self.mode {
            KvMode::RecursionWise | KvMode::RecursiveSharing => {
                let s = &self.stores[gov - 1];
                let n = s.prefix_len(query);
                KvView {
                    keys: Tensor::new(vec![n, w], s.keys[..n * w].to_vec())?,
                    values: Tensor::new(vec![n, w], s.values[..n * w].to_vec())?,
                    tokens: s.tokens[..n].to_vec(),
                }
            }
            KvMode::Hybrid => {
                let base = &self.stores[0];
                let own = &self.stores[depth - 1];
                let n = base.prefix_len(query);
                let mut keys = Vec::with_capacity(n * w);
                let mut values = Vec::with_capacity(n * w);
                for (i, &t) in base.tokens[..n].iter().enumerate() {
                    let (src, j) = match own.find(t) {
                        Some(j) => (own, j),
                        None => (base, i),
                    };
                    keys.extend_from_slice(&src.keys[j * w..(j + 1) * w]);
                    values.extend_from_slice(&src.values[j * w..(j + 1) * w]);
                }
                KvView {
                    keys: Tensor::new(vec![n, w], keys)?,
                    values: Tensor::new(vec![n, w], values)?,
                    tokens: base.tokens[..n].to_vec(),
                }
            }
        };
        self.stats.reads[depth - 1] += view.tokens.len();
        Ok(view)
    }

    /// Stored entries relative to a vanilla cache holding every depth-1 token
    /// at every depth.
    pub fn memory_ratio(&self) -> Option<f64> {
        let full = self.stores.first()?.tokens.len() * self.stores.len();
        (full > 0).then(|| self.total_entries() as f64 / full as f64)
    }

    pub fn stats_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode.to_string(),
            "entries": self.stores.iter().map(|s| s.tokens.len()).collect::<Vec<_>>(),
            "appended": self.stats.appended,
            "reads": self.stats.reads,
            "memory_ratio_vs_vanilla": self.memory_ratio(),
        })
    }
}

/// Cost of a caching mode relative to a vanilla transformer of the same depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostRatios {
    pub kv_memory: Ratio<u64>,
    pub kv_io: Ratio<u64>,
    /// Per-layer attention FLOPs with `k` active tokens out of `N_ctx`.
    pub attn_flops: Ratio<u64>,
}

/// Closed-form ratios assuming the linear capacity schedule.
pub fn cost_model(recursions: u64, k: u64, n_ctx: u64, mode: KvMode) -> Result<CostRatios> {
    if recursions == 0 || n_ctx == 0 {
        return Err(Error::Domain("recursions and N_ctx must be positive".into()));
    }
    if k > n_ctx {
        return Err(Error::Domain(format!("k = {k} exceeds N_ctx = {n_ctx}")));
    }
    let linear = Ratio::new(recursions + 1, 2 * recursions);
    let one = Ratio::from_integer(1);
    Ok(match mode {
        KvMode::RecursionWise => CostRatios {
            kv_memory: linear,
            kv_io: linear,
            attn_flops: Ratio::new(k * k, n_ctx * n_ctx),
        },
        KvMode::RecursiveSharing => CostRatios {
            kv_memory: Ratio::new(1, recursions),
            kv_io: one,
            attn_flops: Ratio::new(k, n_ctx),
        },
        KvMode::Hybrid => CostRatios {
            kv_memory: linear,
            kv_io: one,
            attn_flops: Ratio::new(k, n_ctx),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(mode: KvMode, depth_tokens: &[&[usize]]) -> KvCache {
        let mut c = KvCache::new(mode, depth_tokens.len(), 2);
        for (d, toks) in depth_tokens.iter().enumerate() {
            for &t in toks.iter() {
                let v = [t as f64, (d + 1) as f64];
                if mode.projects_at(d + 1) {
                    c.append(d + 1, t, &v, &v).unwrap();
                }
            }
        }
        c
    }

    #[test]
    fn recursion_wise_view_is_selected_prefix() {
        let mut c = filled(KvMode::RecursionWise, &[&[0, 1, 2, 3], &[0, 2]]);
        let v = c.attend_view(2, 2).unwrap();
        assert_eq!(v.tokens, [0, 2]);
        assert_eq!(c.stats().reads, [0, 2]);
        assert!(matches!(c.attend_view(2, 1), Err(Error::Cache(_))));
    }

    #[test]
    fn sharing_view_is_full_depth_one_prefix() {
        let mut c = filled(KvMode::RecursiveSharing, &[&[0, 1, 2, 3], &[], &[]]);
        let v = c.attend_view(3, 3).unwrap();
        assert_eq!(v.tokens, [0, 1, 2, 3]);
        assert!(c.append(2, 4, &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn hybrid_mixes_depths() {
        let mut c = filled(KvMode::Hybrid, &[&[0, 1, 2, 3], &[1, 3]]);
        let v = c.attend_view(2, 3).unwrap();
        assert_eq!(v.tokens, [0, 1, 2, 3]);
        let depth_tags: Vec<f64> = (0..4).map(|i| v.keys.row(i)[1]).collect();
        assert_eq!(depth_tags, [1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn single_depth_modes_agree() {
        let mut a = filled(KvMode::RecursionWise, &[&[0, 1, 2]]);
        let mut b = filled(KvMode::RecursiveSharing, &[&[0, 1, 2]]);
        for q in 0..3 {
            assert_eq!(a.attend_view(1, q).unwrap(), b.attend_view(1, q).unwrap());
        }
    }

    #[test]
    fn out_of_order_append_is_rejected() {
        let mut c = KvCache::new(KvMode::RecursionWise, 1, 1);
        c.append(1, 3, &[0.0], &[0.0]).unwrap();
        assert!(c.append(1, 3, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn cost_examples() {
        let rw = cost_model(3, 2048, 2048, KvMode::RecursionWise).unwrap();
        assert_eq!((rw.kv_memory, rw.kv_io), (Ratio::new(2, 3), Ratio::new(2, 3)));
        let rs = cost_model(3, 2048, 2048, KvMode::RecursiveSharing).unwrap();
        assert_eq!((rs.kv_memory, rs.kv_io), (Ratio::new(1, 3), Ratio::from_integer(1)));
        for mode in [KvMode::RecursionWise, KvMode::RecursiveSharing] {
            let c = cost_model(1, 16, 16, mode).unwrap();
            assert_eq!(c.kv_memory, Ratio::from_integer(1));
            assert_eq!(c.kv_io, Ratio::from_integer(1));
            assert_eq!(c.attn_flops, Ratio::from_integer(1));
        }
        assert!(matches!(cost_model(2, 9, 8, KvMode::RecursionWise), Err(Error::Domain(_))));
    }
}
