//! Synthetic integer corpora with a known entropy rate.
//!
//! A [`MarkovSource`] draws each token from a fixed successor set of the
//! current token. With `modes > 1` the probabilities over that set are
//! permuted according to `previous token mod modes`, which makes the process
//! second order and forces a model to look further back than one token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Token = usize;

/// A corpus is a list of token sequences.
pub type Corpus = Vec<Vec<Token>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    pub vocab_size: usize,
    /// Successors per token.
    pub branching: usize,
    /// Probability mass over the successor set, most likely first.
    pub weights: Vec<f64>,
    /// Number of probability permutations selected by the previous token.
    pub modes: usize,
    pub seed: u64,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        MarkovSpec {
            vocab_size: 64,
            branching: 4,
            weights: vec![0.6, 0.25, 0.1, 0.05],
            modes: 4,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MarkovSource {
    spec: MarkovSpec,
    /// `successors[x]` lists the tokens reachable from `x`.
    successors: Vec<Vec<Token>>,
    /// `orders[m]` maps successor slot to weight index for mode `m`.
    orders: Vec<Vec<usize>>,
}

impl MarkovSource {
    pub fn new(spec: MarkovSpec) -> Result<Self> {
        if spec.vocab_size < 2 || spec.branching == 0 || spec.branching > spec.vocab_size {
            return Err(Error::InvalidInput(format!(
                "markov source needs 2 <= vocab and 1 <= branching <= vocab, got vocab {} branching {}",
                spec.vocab_size, spec.branching
            )));
        }
        if spec.weights.len() != spec.branching || spec.weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidInput(
                "markov weights must be positive and match branching".into(),
            ));
        }
        if spec.modes == 0 {
            return Err(Error::InvalidInput("markov modes must be >= 1".into()));
        }
        let total: f64 = spec.weights.iter().sum();
        let mut spec = spec;
        spec.weights.iter_mut().for_each(|w| *w /= total);

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let successors = (0..spec.vocab_size)
            .map(|_| {
                let mut pool: Vec<Token> = (0..spec.vocab_size).collect();
                for i in 0..spec.branching {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                pool.truncate(spec.branching);
                pool
            })
            .collect();
        // mode 0 keeps the identity order; later modes rotate it
        let orders = (0..spec.modes)
            .map(|m| (0..spec.branching).map(|s| (s + m) % spec.branching).collect())
            .collect();
        Ok(MarkovSource {
            spec,
            successors,
            orders,
        })
    }

    pub fn spec(&self) -> &MarkovSpec {
        &self.spec
    }

    /// Next-token distribution given the previous and current token.
    pub fn next_distribution(&self, prev: Option<Token>, cur: Token) -> Vec<f64> {
        let mode = prev.map_or(0, |p| p % self.spec.modes);
        let mut dist = vec![0.0; self.spec.vocab_size];
        for (slot, &tok) in self.successors[cur].iter().enumerate() {
            dist[tok] += self.spec.weights[self.orders[mode][slot]];
        }
        dist
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<Token> {
        let mut seq = Vec::with_capacity(len);
        if len == 0 {
            return seq;
        }
        seq.push(rng.random_range(0..self.spec.vocab_size));
        while seq.len() < len {
            let cur = seq[seq.len() - 1];
            let prev = seq.len().checked_sub(2).map(|i| seq[i]);
            let dist = self.next_distribution(prev, cur);
            seq.push(sample_index(&dist, rng));
        }
        seq
    }

    pub fn sample_corpus(&self, n: usize, len: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_sequence(len, &mut rng)).collect()
    }

    /// Entropy rate in nats under the stationary distribution of the
    /// `(previous mode, current token)` chain.
    pub fn entropy_rate(&self) -> f64 {
        let (v, modes) = (self.spec.vocab_size, self.spec.modes);
        let states = v * modes;
        let mut pi = vec![1.0 / states as f64; states];
        for _ in 0..10_000 {
            let mut next = vec![0.0; states];
            for mode in 0..modes {
                for cur in 0..v {
                    let mass = pi[mode * v + cur];
                    if mass == 0.0 {
                        continue;
                    }
                    let order = &self.orders[mode];
                    for (slot, &tok) in self.successors[cur].iter().enumerate() {
                        next[(cur % modes) * v + tok] += mass * self.spec.weights[order[slot]];
                    }
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-13 {
                break;
            }
        }
        let mut h = 0.0;
        for mode in 0..modes {
            for cur in 0..v {
                let mass = pi[mode * v + cur];
                if mass == 0.0 {
                    continue;
                }
                let prev_rep = mode; // any token with this residue selects the same mode
                let dist = self.next_distribution(Some(prev_rep), cur);
                let row_h: f64 = dist.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
                h += mass * row_h;
            }
        }
        h
    }
}

/// Inverse-CDF draw from an unnormalised non-negative weight vector.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    last
}

/// Stable content hash of a corpus, hex encoded.
pub fn corpus_hash(corpus: &[Vec<Token>]) -> String {
    let mut h = Sha256::new();
    for seq in corpus {
        h.update((seq.len() as u64).to_le_bytes());
        for &t in seq {
            h.update((t as u32).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Checks that every token is below `vocab_size`.
pub fn validate_corpus(corpus: &[Vec<Token>], vocab_size: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("corpus is empty".into()));
    }
    for seq in corpus {
        if let Some(&bad) = seq.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: vocab_size,
            });
        }
    }
    Ok(())
}
