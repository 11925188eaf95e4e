//! Frequency-ordered vocabularies with reserved special ids.

use std::collections::HashMap;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token list where id `i >= 4` holds the `(i - 3)`-th most frequent
/// content token. Ties in frequency are broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_counts(Vec::new())
    }
}

impl Vocab {
    /// Count tokens and keep at most `limit` content entries (all if `None`).
    pub fn build<'a, I>(tokens: I, limit: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            if !SPECIAL_TOKENS.contains(&t) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, u64)> = counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(limit) = limit {
            entries.truncate(limit);
        }
        Self::from_counts(entries)
    }

    /// Build from content entries already in id order.
    pub fn from_counts(entries: Vec<(String, u64)>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; NUM_SPECIAL];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Vocab { tokens, counts, index }
    }

    /// Total size including specials.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIAL
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - NUM_SPECIAL
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    /// Frequency rank (1-based) of a content token; `None` for specials.
    pub fn rank(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        (NUM_SPECIAL..self.tokens.len()).contains(&id).then(|| id - (NUM_SPECIAL - 1))
    }

    /// Content `(token, count)` entries in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens[NUM_SPECIAL..]
            .iter()
            .zip(&self.counts[NUM_SPECIAL..])
            .map(|(t, &c)| (t.as_str(), c))
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref()).unwrap_or(UNK)).collect()
    }

    /// Render ids as text. PAD and BOS are skipped; decoding stops at EOS.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]).to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_frequency_then_lexicographic_order() {
        let v = Vocab::build("b a c a b a d".split(' '), None);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("c"), Some(6));
        assert_eq!(v.id("d"), Some(7));
        assert_eq!(v.rank(4), Some(1));
        assert_eq!(v.rank(7), Some(4));
        assert_eq!(v.rank(EOS), None);
        assert_eq!(v.count(4), 3);
    }

    #[test]
    fn limit_maps_rare_tokens_to_unk() {
        let v = Vocab::build("a a b".split(' '), Some(1));
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode(&["a", "b"]), vec![4, UNK]);
    }

    #[test]
    fn special_strings_are_not_counted() {
        let v = Vocab::build(["</s>", "x"], None);
        assert_eq!(v.content_len(), 1);
        assert_eq!(v.id("</s>"), Some(EOS));
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocab::build(["x", "y"], None);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 4]), vec!["x", "y"]);
    }
}
