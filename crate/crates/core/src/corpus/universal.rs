//! Flagging replies built from frequent words that attach to many queries.

use std::collections::{BTreeMap, HashSet};

use super::{CorpusError, Result};
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct UniversalReply {
    pub reply: Vec<TokenId>,
    /// Distinct queries the reply is paired with.
    pub queries: usize,
    /// `queries / total pairs`.
    pub share: f64,
}

/// A reply is flagged when every token has frequency rank `<= t` in `vocab`
/// (specials, including UNK, never qualify) and it is paired with at least
/// `min_query_share · N` distinct queries, `N` being the pair count.
/// Results are ordered by descending share, then by token ids.
pub fn detect_universal_replies(
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    vocab: &Vocab,
    t: usize,
    min_query_share: f64,
) -> Result<Vec<UniversalReply>> {
    if t == 0 || t > vocab.content_len() / 10 {
        return Err(CorpusError::ThresholdTooLarge {
            t,
            vocab: vocab.content_len(),
        });
    }
    if !(0.0..=1.0).contains(&min_query_share) {
        return Err(CorpusError::Invalid(format!("min_query_share {min_query_share} outside [0, 1]")));
    }
    let n = pairs.len();
    let mut queries: BTreeMap<&[TokenId], HashSet<&[TokenId]>> = BTreeMap::new();
    for (x, y) in pairs {
        let body: &[TokenId] = y.strip_suffix(&[crate::vocab::EOS]).unwrap_or(y);
        if body.is_empty() || !body.iter().all(|&id| vocab.rank(id).is_some_and(|r| r <= t)) {
            continue;
        }
        queries.entry(body).or_default().insert(x);
    }
    let mut out: Vec<UniversalReply> = queries
        .into_iter()
        .map(|(reply, qs)| UniversalReply {
            reply: reply.to_vec(),
            queries: qs.len(),
            share: qs.len() as f64 / n as f64,
        })
        .filter(|u| u.share >= min_query_share)
        .collect();
    out.sort_by(|a, b| b.queries.cmp(&a.queries).then_with(|| a.reply.cmp(&b.reply)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vocab {
        Vocab::from_counts((0..n).map(|i| (format!("w{i}"), (n - i) as u64)).collect())
    }

    #[test]
    fn rank_boundary() {
        let v = vocab(100);
        // ids 4.. carry ranks 1..; rank 10 is id 13, rank 11 is id 14.
        let pairs: Vec<_> = (0..10).map(|q| (vec![50 + q], vec![4, 13])).chain((0..10).map(|q| (vec![50 + q], vec![4, 14]))).collect();
        let flagged = detect_universal_replies(&pairs, &v, 10, 0.1).unwrap();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].reply, vec![4, 13]);
        assert_eq!(flagged[0].queries, 10);
        assert_eq!(flagged[0].share, 0.5);
    }

    #[test]
    fn unk_never_qualifies() {
        let v = vocab(100);
        let pairs: Vec<_> = (0..10).map(|q| (vec![50 + q], vec![4, crate::vocab::UNK])).collect();
        assert!(detect_universal_replies(&pairs, &v, 10, 0.0).unwrap().is_empty());
    }

    #[test]
    fn threshold_must_be_small() {
        let v = vocab(100);
        assert!(matches!(
            detect_universal_replies(&[], &v, 11, 0.1),
            Err(CorpusError::ThresholdTooLarge { t: 11, vocab: 100 })
        ));
    }

    #[test]
    fn repeated_query_counts_once() {
        let v = vocab(100);
        let pairs = vec![(vec![60], vec![4]), (vec![60], vec![4]), (vec![61], vec![5])];
        let flagged = detect_universal_replies(&pairs, &v, 5, 0.0).unwrap();
        assert_eq!(flagged[0].queries, 1);
        assert!((flagged[0].share - 1.0 / 3.0).abs() < 1e-15);
    }
}
