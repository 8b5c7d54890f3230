use serde::{Deserialize, Serialize};

/// Per-(token, depth) selection with the gate score each selected token got.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    n_tokens: usize,
    n_depths: usize,
    selected: Vec<bool>,
    scores: Vec<f64>,
}

impl SelectionMask {
    pub fn new(n_tokens: usize, n_depths: usize) -> Self {
        Self {
            n_tokens,
            n_depths,
            selected: vec![false; n_tokens * n_depths],
            scores: vec![0.0; n_tokens * n_depths],
        }
    }

    /// Mask where token `t` runs depths `1..=depths[t]`.
    pub fn from_depths(depths: &[usize], n_depths: usize) -> Self {
        let mut m = Self::new(depths.len(), n_depths);
        for (t, &d) in depths.iter().enumerate() {
            for r in 0..d.min(n_depths) {
                m.set(t, r, true);
            }
        }
        m
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_depths(&self) -> usize {
        self.n_depths
    }

    /// Depth index `r` is zero-based here.
    pub fn get(&self, t: usize, r: usize) -> bool {
        self.selected[t * self.n_depths + r]
    }

    pub fn set(&mut self, t: usize, r: usize, on: bool) {
        self.selected[t * self.n_depths + r] = on;
    }

    pub fn score(&self, t: usize, r: usize) -> f64 {
        self.scores[t * self.n_depths + r]
    }

    pub fn set_score(&mut self, t: usize, r: usize, g: f64) {
        self.scores[t * self.n_depths + r] = g;
    }

    pub fn column(&self, r: usize) -> Vec<bool> {
        (0..self.n_tokens).map(|t| self.get(t, r)).collect()
    }

    pub fn count(&self, r: usize) -> usize {
        (0..self.n_tokens).filter(|&t| self.get(t, r)).count()
    }

    /// Number of depths token `t` ran.
    pub fn depth(&self, t: usize) -> usize {
        (0..self.n_depths).take_while(|&r| self.get(t, r)).count()
    }

    pub fn depths(&self) -> Vec<usize> {
        (0..self.n_tokens).map(|t| self.depth(t)).collect()
    }

    /// `histogram[d]` counts tokens that ran exactly `d` depths.
    pub fn depth_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_depths + 1];
        for t in 0..self.n_tokens {
            h[self.depth(t)] += 1;
        }
        h
    }

    /// Selection at depth r+1 implies selection at depth r.
    pub fn is_nested(&self) -> bool {
        (0..self.n_tokens).all(|t| (1..self.n_depths).all(|r| !self.get(t, r) || self.get(t, r - 1)))
    }

    /// Rows `start..end` as a separate mask.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let d = self.n_depths;
        Self {
            n_tokens: end - start,
            n_depths: d,
            selected: self.selected[start * d..end * d].to_vec(),
            scores: self.scores[start * d..end * d].to_vec(),
        }
    }
}
