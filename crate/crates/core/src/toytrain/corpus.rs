//! Token sources: a synthetic Markov chain, raw bytes and token jsonl.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// First-order Markov chain where every state moves to `branching` random
/// successors with Dirichlet(1) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    pub vocab: usize,
    /// Per state, `(successor, cumulative probability)`.
    transitions: Vec<Vec<(u32, f64)>>,
}

impl MarkovChain {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Result<Self> {
        if vocab < 2 || branching == 0 || branching > vocab {
            return Err(Error::Domain(format!("Markov chain needs 2 <= vocab and 1 <= branching <= vocab, got {vocab}, {branching}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transitions = (0..vocab)
            .map(|_| {
                let succ = rand::seq::index::sample(&mut rng, vocab, branching);
                let w: Vec<f64> = (0..branching).map(|_| Exp1.sample(&mut rng)).collect();
                let total: f64 = w.iter().sum();
                let mut acc = 0.0;
                succ.iter()
                    .zip(w)
                    .map(|(s, wi)| {
                        acc += wi / total;
                        (s as u32, acc)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { vocab, transitions })
    }

    pub fn sample(&self, n_tokens: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = rng.random_range(0..self.vocab);
        (0..n_tokens)
            .map(|_| {
                let u: f64 = rng.random();
                let row = &self.transitions[state];
                let next = row.iter().find(|&&(_, c)| u < c).unwrap_or(row.last().expect("non-empty row")).0;
                state = next as usize;
                next
            })
            .collect()
    }

    /// Entropy rate in nats per token under the stationary distribution,
    /// estimated by power iteration.
    pub fn entropy_rate(&self) -> f64 {
        let v = self.vocab;
        let mut pi = vec![1.0 / v as f64; v];
        for _ in 0..2000 {
            let mut next = vec![0.0; v];
            for (s, row) in self.transitions.iter().enumerate() {
                let mut prev = 0.0;
                for &(t, c) in row {
                    next[t as usize] += pi[s] * (c - prev);
                    prev = c;
                }
            }
            pi = next;
        }
        self.transitions
            .iter()
            .zip(&pi)
            .map(|(row, &p)| {
                let mut prev = 0.0;
                let h: f64 = row
                    .iter()
                    .map(|&(_, c)| {
                        let q = c - prev;
                        prev = c;
                        if q > 0.0 {
                            -q * q.ln()
                        } else {
                            0.0
                        }
                    })
                    .sum();
                p * h
            })
            .sum()
    }
}

/// Bytes of a file as tokens over a 256-symbol vocabulary.
pub fn read_byte_corpus(path: &Path) -> Result<Vec<u32>> {
    Ok(std::fs::read(path)?.into_iter().map(u32::from).collect())
}

/// Concatenates the integer arrays on each non-blank line.
pub fn read_token_jsonl<R: Read>(reader: R) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<u32> = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.extend(toks);
    }
    Ok(out)
}
