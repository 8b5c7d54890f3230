//! Corpus loading, a seeded synthetic grammar, and batch sampling.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokenizer::{encode, EOS};
use crate::error::{Error, Result};

const NOUNS: [&str; 12] = [
    "cat", "dog", "bird", "child", "farmer", "river", "teacher", "robot", "garden", "window", "stone", "letter",
];
const ADJECTIVES: [&str; 8] = ["small", "old", "bright", "quiet", "green", "heavy", "happy", "strange"];
const VERBS: [(&str, &str); 8] = [
    ("sees", "see"),
    ("finds", "find"),
    ("likes", "like"),
    ("carries", "carry"),
    ("watches", "watch"),
    ("follows", "follow"),
    ("paints", "paint"),
    ("builds", "build"),
];
const PLACES: [&str; 6] = ["near the hill", "in the town", "by the sea", "under the bridge", "at home", "in the dark"];

fn noun_phrase(rng: &mut ChaCha8Rng, plural: bool) -> String {
    let det = if plural {
        ["the", "some", "two", "many"][rng.random_range(0..4)]
    } else {
        ["the", "a", "one", "every"][rng.random_range(0..4)]
    };
    let noun = NOUNS[rng.random_range(0..NOUNS.len())];
    let noun = if plural { format!("{noun}s") } else { noun.to_string() };
    if rng.random_range(0..2) == 0 {
        format!("{det} {} {noun}", ADJECTIVES[rng.random_range(0..ADJECTIVES.len())])
    } else {
        format!("{det} {noun}")
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..5) {
        0 => {
            let (a, b) = (rng.random_range(0..10), rng.random_range(0..10));
            format!("{a} plus {b} is {}.", a + b)
        }
        1 => {
            let n = rng.random_range(2..6);
            let start = rng.random_range(0..20);
            let seq: Vec<String> = (0..n).map(|i| (start + i).to_string()).collect();
            format!("count {}.", seq.join(" "))
        }
        _ => {
            let plural = rng.random_range(0..2) == 0;
            let subject = noun_phrase(rng, plural);
            let (s, p) = VERBS[rng.random_range(0..VERBS.len())];
            let plural_object = rng.random_range(0..2) == 0;
            let object = noun_phrase(rng, plural_object);
            let place = PLACES[rng.random_range(0..PLACES.len())];
            let mut s = format!("{subject} {} {object} {place}.", if plural { p } else { s });
            s[..1].make_ascii_uppercase();
            s
        }
    }
}

/// Deterministic text of about `bytes` bytes: paragraphs of short sentences
/// separated by blank lines.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let n = rng.random_range(3..9);
        let para: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
        out.push_str(&para.join(" "));
        out.push_str("\n\n");
    }
    out
}

/// Token stream of a text split into documents on blank lines, each
/// document followed by the separator token.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokens: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        let mut tokens = Vec::with_capacity(text.len());
        for doc in text.split("\n\n").map(str::trim).filter(|d| !d.is_empty()) {
            tokens.extend(encode(doc));
            tokens.push(EOS);
        }
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Splits off the final `fraction` of the stream.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let cut = ((1.0 - fraction) * self.tokens.len() as f64).round() as usize;
        (
            Corpus {
                tokens: self.tokens[..cut].to_vec(),
            },
            Corpus {
                tokens: self.tokens[cut..].to_vec(),
            },
        )
    }

    fn window(&self, start: usize, seq_len: usize) -> (&[usize], &[usize]) {
        (&self.tokens[start..start + seq_len], &self.tokens[start + 1..start + seq_len + 1])
    }

    /// `count` evenly spaced windows, for evaluation.
    pub fn fixed_batches(&self, count: usize, batch: usize, seq_len: usize) -> Result<Vec<Batch>> {
        let span = self.windows(seq_len)?;
        let total = count * batch;
        let stride = (span / total.max(1)).max(1);
        let starts: Vec<usize> = (0..total).map(|i| (i * stride) % span).collect();
        Ok(starts.chunks(batch).map(|c| self.batch(c, seq_len)).collect())
    }

    fn windows(&self, seq_len: usize) -> Result<usize> {
        if self.tokens.len() <= seq_len + 1 {
            return Err(Error::Config(format!(
                "corpus of {} tokens is too short for windows of {seq_len}",
                self.tokens.len()
            )));
        }
        Ok(self.tokens.len() - seq_len)
    }

    fn batch(&self, starts: &[usize], seq_len: usize) -> Batch {
        let mut inputs = Vec::with_capacity(starts.len() * seq_len);
        let mut targets = Vec::with_capacity(starts.len() * seq_len);
        for &s in starts {
            let (x, y) = self.window(s, seq_len);
            inputs.extend_from_slice(x);
            targets.extend_from_slice(y);
        }
        Batch {
            inputs,
            targets,
            seq_len,
        }
    }
}

/// `inputs` and next-token `targets` of several sequences, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn n_seqs(&self) -> usize {
        self.inputs.len() / self.seq_len
    }
}

/// Uniformly random training windows in a fixed seeded order.
pub struct Batcher {
    corpus: Corpus,
    batch: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(corpus: Corpus, batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        corpus.windows(seq_len)?;
        Ok(Self {
            corpus,
            batch,
            seq_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let span = self.corpus.tokens.len() - self.seq_len;
        let starts: Vec<usize> = (0..self.batch).map(|_| self.rng.random_range(0..span)).collect();
        self.corpus.batch(&starts, self.seq_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_corpus(5000, 3);
        assert_eq!(a, synthetic_corpus(5000, 3));
        assert_ne!(a, synthetic_corpus(5000, 4));
        assert!(a.len() >= 5000);
    }

    #[test]
    fn targets_shift_inputs() {
        let c = Corpus::from_text(&synthetic_corpus(2000, 0));
        let mut b = Batcher::new(c, 3, 16, 1).unwrap();
        let batch = b.next_batch();
        assert_eq!(batch.n_seqs(), 3);
        for s in 0..3 {
            let x = &batch.inputs[s * 16..(s + 1) * 16];
            let y = &batch.targets[s * 16..(s + 1) * 16];
            assert_eq!(&x[1..], &y[..15]);
        }
    }

    #[test]
    fn documents_end_with_separator() {
        let c = Corpus::from_text("ab\n\ncd\n\n\n");
        assert_eq!(c.tokens, vec![97, 98, EOS, 99, 100, EOS]);
    }
}
