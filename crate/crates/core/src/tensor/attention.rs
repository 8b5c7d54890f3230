use crate::error::{Error, Result};

/// Which key rows each query row may attend to.
///
/// Query and key rows are identified by `(sequence, position)` and must be
/// sorted ascending. A key is visible to a query when it belongs to the same
/// sequence and its position does not exceed the query position, so the
/// visible keys of every query form one contiguous range.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    ranges: Vec<(usize, usize)>,
    n_keys: usize,
}

impl AttnLayout {
    pub fn causal(queries: &[(usize, usize)], keys: &[(usize, usize)]) -> Result<Self> {
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::shape("attention", "key rows must be strictly increasing"));
        }
        let mut ranges = Vec::with_capacity(queries.len());
        for &(seq, pos) in queries {
            let lo = keys.partition_point(|&(s, _)| s < seq);
            let hi = keys.partition_point(|&k| k <= (seq, pos));
            if hi <= lo {
                return Err(Error::Cache(format!(
                    "query (seq {seq}, pos {pos}) has no visible keys"
                )));
            }
            ranges.push((lo, hi));
        }
        Ok(Self {
            ranges,
            n_keys: keys.len(),
        })
    }

    /// Single-sequence causal layout over positions `0..n` for both sides.
    pub fn full_causal(n: usize) -> Self {
        Self {
            ranges: (0..n).map(|i| (0, i + 1)).collect(),
            n_keys: n,
        }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn n_queries(&self) -> usize {
        self.ranges.len()
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    /// Total number of (query, key) pairs touched.
    pub fn volume(&self) -> usize {
        self.ranges.iter().map(|(lo, hi)| hi - lo).sum()
    }
}

pub(crate) struct Heads {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl Heads {
    fn group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

/// Returns the attention output and the softmax probabilities, stored per
/// query and head in range order.
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    layout: &AttnLayout,
    h: &Heads,
) -> (Vec<f64>, Vec<f64>) {
    let dq = h.n_heads * h.d_head;
    let dkv = h.n_kv_heads * h.d_head;
    let scale = 1.0 / (h.d_head as f64).sqrt();
    let mut out = vec![0.0; layout.n_queries() * dq];
    let mut probs = Vec::with_capacity(layout.volume() * h.n_heads);
    let mut scores = Vec::new();
    for (i, &(lo, hi)) in layout.ranges.iter().enumerate() {
        for head in 0..h.n_heads {
            let kvh = head / h.group();
            let qrow = &q[i * dq + head * h.d_head..i * dq + (head + 1) * h.d_head];
            scores.clear();
            let mut max = f64::NEG_INFINITY;
            for j in lo..hi {
                let krow = &k[j * dkv + kvh * h.d_head..j * dkv + (kvh + 1) * h.d_head];
                let s = dot(qrow, krow) * scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let orow = &mut out[i * dq + head * h.d_head..i * dq + (head + 1) * h.d_head];
            for (j, s) in (lo..hi).zip(scores.iter()) {
                let p = s / z;
                probs.push(p);
                let vrow = &v[j * dkv + kvh * h.d_head..j * dkv + (kvh + 1) * h.d_head];
                for (o, x) in orow.iter_mut().zip(vrow) {
                    *o += p * x;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients with respect to q, k and v.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    layout: &AttnLayout,
    h: &Heads,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dq_w = h.n_heads * h.d_head;
    let dkv_w = h.n_kv_heads * h.d_head;
    let scale = 1.0 / (h.d_head as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = Vec::new();
    let mut cursor = 0;
    for (i, &(lo, hi)) in layout.ranges.iter().enumerate() {
        for head in 0..h.n_heads {
            let kvh = head / h.group();
            let n = hi - lo;
            let p = &probs[cursor..cursor + n];
            cursor += n;
            let qs = i * dq_w + head * h.d_head;
            let grow = &dout[qs..qs + h.d_head];
            dp.clear();
            let mut weighted = 0.0;
            for (idx, j) in (lo..hi).enumerate() {
                let vs = j * dkv_w + kvh * h.d_head;
                let d = dot(grow, &v[vs..vs + h.d_head]);
                weighted += p[idx] * d;
                dp.push(d);
                for (dvx, g) in dv[vs..vs + h.d_head].iter_mut().zip(grow) {
                    *dvx += p[idx] * g;
                }
            }
            for (idx, j) in (lo..hi).enumerate() {
                let ds = p[idx] * (dp[idx] - weighted) * scale;
                let ks = j * dkv_w + kvh * h.d_head;
                for t in 0..h.d_head {
                    dq[qs + t] += ds * k[ks + t];
                    dk[ks + t] += ds * q[qs + t];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
