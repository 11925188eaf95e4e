//! Synthetic query/reply corpora with planted universal replies.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng;

use super::{CorpusError, Result, TextPair};

/// Words for the most frequent ranks; lower ranks are named `w###`.
pub const FUNCTION_WORDS: [&str; 20] = [
    "i", "you", "the", "it", "is", "dont", "know", "me", "too", "ok", "yes", "that", "so", "see", "haha", "good", "really", "what", "a", "to",
];

/// Surface form of the word with 1-based frequency rank `rank`.
pub fn word_for_rank(rank: usize) -> String {
    match FUNCTION_WORDS.get(rank.wrapping_sub(1)) {
        Some(w) => w.to_string(),
        None => format!("w{rank:03}"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub queries: usize,
    /// Informative replies per query.
    pub replies_per_query: usize,
    pub vocab_size: usize,
    pub zipf_alpha: f64,
    /// Inclusive length ranges.
    pub query_len: (usize, usize),
    pub reply_len: (usize, usize),
    /// Planted replies and the share of all pairs each should account for.
    pub universal: Vec<(String, f64)>,
    /// Probability that an informative reply token is derived from a query
    /// token rather than drawn independently.
    pub fidelity: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            queries: 500,
            replies_per_query: 2,
            vocab_size: 300,
            zipf_alpha: 1.0,
            query_len: (3, 6),
            reply_len: (2, 5),
            universal: vec![
                ("i dont know".into(), 0.2),
                ("me too".into(), 0.12),
                ("haha".into(), 0.08),
                ("ok".into(), 0.06),
                ("yes really".into(), 0.04),
            ],
            fidelity: 0.8,
        }
    }
}

impl SynthSpec {
    /// Total pairs `N` such that each planted reply covers its share.
    pub fn total_pairs(&self) -> usize {
        let informative = (self.queries * self.replies_per_query) as f64;
        (informative / (1.0 - self.universal_share())).round() as usize
    }

    pub fn universal_share(&self) -> f64 {
        self.universal.iter().map(|(_, s)| s).sum()
    }

    /// Distinct queries each planted reply attaches to.
    pub fn universal_counts(&self) -> Vec<usize> {
        let n = self.total_pairs() as f64;
        self.universal.iter().map(|(_, s)| (s * n).round() as usize).collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::Infeasible(m));
        if self.queries == 0 || self.vocab_size < 2 {
            return bad("need at least one query and two vocabulary words".into());
        }
        for (name, (lo, hi)) in [("query", self.query_len), ("reply", self.reply_len)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} length range {lo}..={hi} is invalid"));
            }
        }
        if !(0.0..=1.0).contains(&self.fidelity) || !self.zipf_alpha.is_finite() || self.zipf_alpha < 0.0 {
            return bad("fidelity must lie in [0, 1] and alpha must be finite and non-negative".into());
        }
        if self.universal.iter().any(|(t, s)| !(*s >= 0.0) || t.split_whitespace().next().is_none()) {
            return bad("planted replies need text and a non-negative share".into());
        }
        let total = self.universal_share();
        if total >= 1.0 || (total > 0.0 && self.replies_per_query == 0) {
            return bad(format!("planted shares sum to {total}; they must leave room for informative replies"));
        }
        for ((text, _), n) in self.universal.iter().zip(self.universal_counts()) {
            if n > self.queries {
                return bad(format!("{text:?} would need {n} distinct queries, only {} exist", self.queries));
            }
        }
        Ok(())
    }
}

fn partner(rank: usize, vocab: usize) -> usize {
    if rank % 2 == 1 {
        if rank < vocab {
            rank + 1
        } else {
            rank
        }
    } else {
        rank - 1
    }
}

/// Generate pairs grouped by query: informative replies first, then any
/// planted replies attached to that query.
pub fn synth_corpus<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Vec<TextPair>> {
    spec.validate()?;
    let weights: Vec<f64> = (1..=spec.vocab_size).map(|r| (r as f64).powf(-spec.zipf_alpha)).collect();
    let zipf = WeightedIndex::new(&weights).map_err(|e| CorpusError::Infeasible(e.to_string()))?;
    let draw_rank = |rng: &mut R| zipf.sample(rng) + 1;

    let mut seen = HashSet::new();
    let mut queries: Vec<Vec<usize>> = Vec::with_capacity(spec.queries);
    let mut attempts = 0usize;
    while queries.len() < spec.queries {
        attempts += 1;
        if attempts > 1000 * spec.queries {
            return Err(CorpusError::Infeasible("cannot draw enough distinct queries".into()));
        }
        let len = rng.gen_range(spec.query_len.0..=spec.query_len.1);
        let q: Vec<usize> = (0..len).map(|_| draw_rank(rng)).collect();
        if seen.insert(q.clone()) {
            queries.push(q);
        }
    }

    let mut attached: Vec<Vec<usize>> = vec![Vec::new(); spec.queries];
    for (j, n) in spec.universal_counts().into_iter().enumerate() {
        for qi in sample(rng, spec.queries, n) {
            attached[qi].push(j);
        }
    }

    let words = |ranks: &[usize]| ranks.iter().map(|&r| word_for_rank(r)).collect::<Vec<_>>();
    let mut pairs = Vec::with_capacity(spec.total_pairs());
    for (q, planted) in queries.iter().zip(&attached) {
        for _ in 0..spec.replies_per_query {
            let len = rng.gen_range(spec.reply_len.0..=spec.reply_len.1);
            let reply: Vec<usize> = (0..len)
                .map(|_| {
                    if rng.gen_bool(spec.fidelity) {
                        partner(q[rng.gen_range(0..q.len())], spec.vocab_size)
                    } else {
                        draw_rank(rng)
                    }
                })
                .collect();
            pairs.push(TextPair {
                query: words(q),
                response: words(&reply),
            });
        }
        let mut planted = planted.clone();
        planted.sort_unstable();
        for j in planted {
            pairs.push(TextPair {
                query: words(q),
                response: spec.universal[j].0.split_whitespace().map(str::to_string).collect(),
            });
        }
    }
    Ok(pairs)
}
