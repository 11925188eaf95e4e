//! Word-level diagnostics over the replies of a single query.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use super::{CorpusError, Result};
use crate::model::{self, ModelParams};
use crate::vocab::{TokenId, BOS, EOS, PAD};

/// Lowercase, drop every character that is neither alphanumeric nor
/// whitespace, split on whitespace.
pub fn reply_tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanWordFrequency {
    /// Number of replies K.
    pub replies: usize,
    pub tokens: usize,
    pub types: usize,
    /// Tokens per type across the replies.
    pub mean: f64,
    /// `mean · T / (K · T)`, i.e. `mean / K`.
    pub ratio: f64,
    /// Mean reply length T.
    pub mean_length: f64,
    /// True when replies differ in length, so T does not cancel exactly.
    pub approximate: bool,
}

pub fn mean_word_frequency<T: Hash + Eq>(replies: &[Vec<T>]) -> Result<MeanWordFrequency> {
    if replies.is_empty() {
        return Err(CorpusError::Invalid("need at least one reply".into()));
    }
    let tokens: usize = replies.iter().map(Vec::len).sum();
    let types = replies.iter().flatten().collect::<HashSet<_>>().len();
    if types == 0 {
        return Err(CorpusError::Invalid("replies contain no tokens".into()));
    }
    let k = replies.len();
    let mean = tokens as f64 / types as f64;
    Ok(MeanWordFrequency {
        replies: k,
        tokens,
        types,
        mean,
        ratio: mean / k as f64,
        mean_length: tokens as f64 / k as f64,
        approximate: replies.iter().any(|r| r.len() != replies[0].len()),
    })
}

/// `p(w|x)` for every target id: the mean over all teacher-forced decode
/// positions of all `replies` of the model's probability for `w`.
pub fn word_probabilities(params: &ModelParams, x: &[TokenId], replies: &[Vec<TokenId>]) -> Result<Vec<f64>> {
    if replies.is_empty() {
        return Err(CorpusError::Invalid("need at least one reply".into()));
    }
    let mut acc = vec![0.0; params.dims().tgt_vocab];
    let mut positions = 0usize;
    for y in replies {
        for row in model::teacher_forced_log_probs(params, x, y)? {
            for (a, lp) in acc.iter_mut().zip(row) {
                *a += lp.exp();
            }
            positions += 1;
        }
    }
    for a in &mut acc {
        *a /= positions as f64;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JensenCheck {
    /// `Σ_{w ∈ U} log p(w|x)`.
    pub lhs: f64,
    /// `log Σ_{w ∈ U} p(w|x)`.
    pub rhs: f64,
    /// The union `U` of reply words (EOS, PAD and BOS excluded).
    pub union: Vec<TokenId>,
    pub probabilities: BTreeMap<TokenId, f64>,
}

impl JensenCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

pub fn jensen_bound_check(params: &ModelParams, x: &[TokenId], replies: &[Vec<TokenId>]) -> Result<JensenCheck> {
    let p = word_probabilities(params, x, replies)?;
    let union: BTreeSet<TokenId> = replies
        .iter()
        .flatten()
        .copied()
        .filter(|&w| w != EOS && w != PAD && w != BOS)
        .collect();
    if union.is_empty() {
        return Err(CorpusError::Invalid("replies contain no words".into()));
    }
    let probabilities: BTreeMap<TokenId, f64> = union.iter().map(|&w| (w, p[w as usize])).collect();
    let lhs = probabilities.values().map(|q| q.ln()).sum();
    let rhs = probabilities.values().sum::<f64>().ln();
    Ok(JensenCheck {
        lhs,
        rhs,
        union: union.into_iter().collect(),
        probabilities,
    })
}
