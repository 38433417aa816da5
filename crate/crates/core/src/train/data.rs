use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Sparse random bigram language model used as a synthetic training corpus.
/// Each token has a few preferred successors; the rest of the mass is
/// spread uniformly.
#[derive(Clone, Debug)]
pub struct BigramCorpus {
    vocab: usize,
    cumulative: Vec<Vec<f64>>,
}

impl BigramCorpus {
    pub fn new(vocab: usize, seed: u64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidArgument("bigram corpus needs a vocabulary of at least 2".into()));
        }
        let mut rng = SeededRng::derive(seed, 0x6267);
        let successors = 4.min(vocab);
        let cumulative = (0..vocab)
            .map(|_| {
                let mut w = vec![0.2 / vocab as f64; vocab];
                for _ in 0..successors {
                    w[rng.below(vocab)] += rng.uniform(0.05, 0.25);
                }
                let total: f64 = w.iter().sum();
                let mut acc = 0.0;
                w.iter()
                    .map(|x| {
                        acc += x / total;
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(Self { vocab, cumulative })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn sample(&self, len: usize, rng: &mut SeededRng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.below(self.vocab);
        for _ in 0..len {
            out.push(cur as u32);
            let u = rng.uniform(0.0, 1.0);
            let row = &self.cumulative[cur];
            cur = row.partition_point(|&c| c < u).min(self.vocab - 1);
        }
        out
    }
}

/// Token ranges of the retrieval task over a 64-token vocabulary.
pub const NIAH_VOCAB: usize = 64;
pub const NIAH_QUERY: u32 = 0;
pub const NIAH_FILLER: std::ops::Range<u32> = 1..32;
pub const NIAH_KEYS: std::ops::Range<u32> = 32..48;
pub const NIAH_VALUES: std::ops::Range<u32> = 48..64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiahSample {
    /// Haystack with embedded `key value` pairs, ending in `QUERY key`.
    pub tokens: Vec<u32>,
    pub answer: u32,
}

/// `count` retrieval sequences of `haystack_len` tokens each (including the
/// two query tokens), with `n_needles` distinct key/value pairs placed at
/// random non-overlapping positions; the query asks for one of them.
pub fn niah_generate(haystack_len: usize, n_needles: usize, count: usize, seed: u64) -> Result<Vec<NiahSample>> {
    let n_keys = (NIAH_KEYS.end - NIAH_KEYS.start) as usize;
    if n_needles == 0 || n_needles > n_keys {
        return Err(Error::InvalidArgument(format!("n_needles must be in 1..={n_keys}")));
    }
    if haystack_len < 2 * n_needles + 2 {
        return Err(Error::InvalidArgument(format!(
            "haystack of {haystack_len} tokens cannot hold {n_needles} needles and a query"
        )));
    }
    let mut rng = SeededRng::derive(seed, 0x6e69);
    let body = haystack_len - 2;
    let filler = (NIAH_FILLER.end - NIAH_FILLER.start) as usize;
    let values = (NIAH_VALUES.end - NIAH_VALUES.start) as usize;
    Ok((0..count)
        .map(|_| {
            let mut tokens: Vec<u32> = (0..body).map(|_| NIAH_FILLER.start + rng.below(filler) as u32).collect();
            let mut keys: Vec<u32> = Vec::with_capacity(n_needles);
            while keys.len() < n_needles {
                let k = NIAH_KEYS.start + rng.below(n_keys) as u32;
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            // Non-overlapping slots of width two.
            let slots = body / 2;
            let mut chosen: Vec<usize> = Vec::with_capacity(n_needles);
            while chosen.len() < n_needles {
                let s = rng.below(slots);
                if !chosen.contains(&s) {
                    chosen.push(s);
                }
            }
            let mut pairs = Vec::with_capacity(n_needles);
            for (&k, &s) in keys.iter().zip(&chosen) {
                let v = NIAH_VALUES.start + rng.below(values) as u32;
                tokens[2 * s] = k;
                tokens[2 * s + 1] = v;
                pairs.push((k, v));
            }
            let (qk, answer) = pairs[rng.below(n_needles)];
            tokens.push(NIAH_QUERY);
            tokens.push(qk);
            NiahSample { tokens, answer }
        })
        .collect())
}

/// Training sequence for retrieval: `targets` lists `(position, value)`
/// pairs where the model must emit `value` after reading `position`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallSample {
    pub tokens: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

impl From<&NiahSample> for RecallSample {
    fn from(s: &NiahSample) -> Self {
        Self {
            tokens: s.tokens.clone(),
            targets: vec![(s.tokens.len() - 1, s.answer)],
        }
    }
}

/// Dense retrieval practice: `n_pairs` key/value needles in the first half
/// of a `len`-token filler sequence, then a `QUERY key value` probe for each
/// of them (in random order) in the second half. Every probe is a target.
pub fn recall_generate(len: usize, n_pairs: usize, count: usize, seed: u64) -> Result<Vec<RecallSample>> {
    let n_keys = (NIAH_KEYS.end - NIAH_KEYS.start) as usize;
    if n_pairs == 0 || n_pairs > n_keys {
        return Err(Error::InvalidArgument(format!("n_pairs must be in 1..={n_keys}")));
    }
    let half = len / 2;
    if half < 2 * n_pairs || len - half < 3 * n_pairs {
        return Err(Error::InvalidArgument(format!(
            "{len} tokens cannot hold {n_pairs} needles and their probes"
        )));
    }
    let mut rng = SeededRng::derive(seed, 0x7263);
    let filler = (NIAH_FILLER.end - NIAH_FILLER.start) as usize;
    let values = (NIAH_VALUES.end - NIAH_VALUES.start) as usize;
    let place = |rng: &mut SeededRng, slots: usize, n: usize| {
        let mut chosen: Vec<usize> = Vec::with_capacity(n);
        while chosen.len() < n {
            let s = rng.below(slots);
            if !chosen.contains(&s) {
                chosen.push(s);
            }
        }
        chosen
    };
    Ok((0..count)
        .map(|_| {
            let mut tokens: Vec<u32> = (0..len).map(|_| NIAH_FILLER.start + rng.below(filler) as u32).collect();
            let mut keys: Vec<u32> = Vec::with_capacity(n_pairs);
            while keys.len() < n_pairs {
                let k = NIAH_KEYS.start + rng.below(n_keys) as u32;
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            let vals: Vec<u32> = (0..n_pairs).map(|_| NIAH_VALUES.start + rng.below(values) as u32).collect();
            for (i, s) in place(&mut rng, half / 2, n_pairs).into_iter().enumerate() {
                tokens[2 * s] = keys[i];
                tokens[2 * s + 1] = vals[i];
            }
            let mut targets = Vec::with_capacity(n_pairs);
            let mut slots = place(&mut rng, (len - half) / 3, n_pairs);
            slots.sort_unstable();
            let order = place(&mut rng, n_pairs, n_pairs);
            for (s, i) in slots.into_iter().zip(order) {
                let at = half + 3 * s;
                tokens[at] = NIAH_QUERY;
                tokens[at + 1] = keys[i];
                tokens[at + 2] = vals[i];
                targets.push((at + 1, vals[i]));
            }
            RecallSample { tokens, targets }
        })
        .collect())
}

/// Context-extension schedule for retrieval practice: the first half of
/// `steps · batch` samples use `len / 4` tokens, the next quarter `len / 2`,
/// the last quarter the full `len`. Consumed in order by the trainer.
pub fn recall_curriculum(len: usize, n_pairs: usize, steps: usize, batch: usize, seed: u64) -> Result<Vec<RecallSample>> {
    let total = steps * batch;
    let quarter = total / 4;
    let mut out = recall_generate(len / 4, n_pairs, total - 2 * quarter, seed)?;
    out.extend(recall_generate(len / 2, n_pairs, quarter, seed.wrapping_add(1))?);
    out.extend(recall_generate(len, n_pairs, quarter, seed.wrapping_add(2))?);
    Ok(out)
}

/// Exact-match accuracy of `predict` (which returns the decoded value).
pub fn niah_accuracy(samples: &[NiahSample], mut predict: impl FnMut(&[u32]) -> Result<u32>) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        if predict(&s.tokens)? == s.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
