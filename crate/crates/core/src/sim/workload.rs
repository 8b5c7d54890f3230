use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::KvMode;
use crate::model::Model;
use crate::routing::capacity_schedule;
use crate::train::tokenizer::BOS;

/// How per-token recursion depths are drawn in proxy mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DepthSource {
    Fixed(usize),
    Uniform,
    /// Depth `r` with probability equal to the linear schedule's
    /// `cap_r − cap_{r+1}`, as under expert-choice capacities.
    Capacity,
    /// With probability `fraction` the token stops uniformly in
    /// `1..N_r`, otherwise it runs all `N_r` steps. Draws are coupled
    /// across fractions for a fixed seed.
    EarlyExit { fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub requests: usize,
    pub mean_len: f64,
    pub std_len: f64,
    pub recursions: usize,
    pub depths: DepthSource,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            requests: 1000,
            mean_len: 256.0,
            std_len: 64.0,
            recursions: 3,
            depths: DepthSource::Capacity,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: usize,
    /// Recursion depth of each generated token; its length is the target length.
    pub depths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub requests: Vec<Request>,
}

impl Workload {
    pub fn total_tokens(&self) -> usize {
        self.requests.iter().map(|r| r.depths.len()).sum()
    }
}

impl WorkloadSpec {
    fn validate(&self) -> Result<()> {
        if self.requests == 0 || self.recursions == 0 {
            return Err(Error::Config("workload needs requests and recursions".into()));
        }
        if !(self.mean_len.is_finite() && self.std_len >= 0.0) {
            return Err(Error::Config("invalid length distribution".into()));
        }
        match self.depths {
            DepthSource::Fixed(d) if d == 0 || d > self.recursions => {
                Err(Error::Config(format!("fixed depth {d} outside 1..={}", self.recursions)))
            }
            DepthSource::EarlyExit { fraction } if !(0.0..=1.0).contains(&fraction) => {
                Err(Error::Config(format!("early-exit fraction {fraction} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Target lengths from the normal distribution, redrawn until positive.
    pub fn lengths(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(self.mean_len, self.std_len).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(self.requests);
        let mut tries = 0;
        while out.len() < self.requests {
            let l = normal.sample(&mut rng).round();
            tries += 1;
            if l >= 1.0 {
                out.push(l as usize);
            } else if tries > 1000 * self.requests {
                return Err(Error::Config("length distribution has almost no mass above zero".into()));
            }
        }
        Ok(out)
    }

    pub fn generate(&self) -> Result<Workload> {
        let lengths = self.lengths()?;
        let n = self.recursions;
        let caps: Vec<f64> = capacity_schedule(n)?
            .iter()
            .map(|c| *c.numer() as f64 / *c.denom() as f64)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        let requests = lengths
            .into_iter()
            .enumerate()
            .map(|(id, len)| {
                let depths = (0..len)
                    .map(|_| {
                        let (u, v): (f64, f64) = (rng.random(), rng.random());
                        match self.depths {
                            DepthSource::Fixed(d) => d,
                            DepthSource::Uniform => 1 + ((u * n as f64) as usize).min(n - 1),
                            DepthSource::Capacity => caps.iter().filter(|&&c| u < c).count().max(1),
                            DepthSource::EarlyExit { fraction } => {
                                if n > 1 && u < fraction {
                                    1 + ((v * (n - 1) as f64) as usize).min(n - 2)
                                } else {
                                    n
                                }
                            }
                        }
                    })
                    .collect();
                Request { id, depths }
            })
            .collect();
        Ok(Workload { requests })
    }
}

/// Real-model workload: each request samples its tokens from `model`
/// starting from the `BOS` prompt, recording the depth the
/// router gave every token. Lengths are capped by the context.
pub fn workload_from_model(model: &Model, spec: &WorkloadSpec, mode: KvMode, temperature: f64) -> Result<Workload> {
    let lengths = spec.lengths()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));
    let cap = model.cfg.ctx_len - 1;
    let mut requests = Vec::with_capacity(lengths.len());
    for (id, len) in lengths.into_iter().enumerate() {
        let mut state = model.decode_state(mode);
        let mut logits = model.decode_step(&mut state, BOS, None)?.logits;
        let mut depths = Vec::with_capacity(len);
        for _ in 0..len.min(cap) {
            let token = sample(&logits, temperature, &mut rng);
            let step = model.decode_step(&mut state, token, None)?;
            depths.push(step.depth.max(1));
            logits = step.logits;
        }
        requests.push(Request { id, depths });
    }
    Ok(Workload { requests })
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return crate::model::argmax(logits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    w.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_are_positive_and_seeded() {
        let spec = WorkloadSpec {
            requests: 500,
            mean_len: 3.0,
            std_len: 5.0,
            ..Default::default()
        };
        let a = spec.lengths().unwrap();
        assert!(a.iter().all(|&l| l >= 1));
        assert_eq!(a, spec.lengths().unwrap());
    }

    #[test]
    fn capacity_depths_follow_schedule() {
        let spec = WorkloadSpec {
            requests: 200,
            ..Default::default()
        };
        let w = spec.generate().unwrap();
        let mut hist = [0usize; 3];
        for d in w.requests.iter().flat_map(|r| &r.depths) {
            hist[d - 1] += 1;
        }
        let total = w.total_tokens() as f64;
        for h in hist {
            assert!((h as f64 / total - 1.0 / 3.0).abs() < 0.02);
        }
    }
}
