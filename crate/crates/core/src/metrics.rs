//! Perplexity, distinct-n and recall-oriented ROUGE-1 / ROUGE-L.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{self, ModelError, ModelParams};
use crate::vocab::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("distinct-n needs n >= 1")]
    ZeroN,
    #[error("{generated} generated responses for {references} reference groups")]
    CountMismatch { generated: usize, references: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Token-level likelihood totals over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerplexityStats {
    pub ppl: f64,
    pub total_nll: f64,
    /// Scored tokens, EOS included.
    pub tokens: usize,
}

/// `exp(total NLL / total scored tokens)`, EOS counted in both.
pub fn perplexity(params: &ModelParams, dataset: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<PerplexityStats> {
    if dataset.is_empty() {
        return Err(MetricError::Empty("dataset"));
    }
    let mut total_nll = 0.0;
    let mut tokens = 0;
    for (x, y) in dataset {
        total_nll -= model::sequence_log_prob(params, x, y)?;
        tokens += model::scored_tokens(y).len();
    }
    Ok(PerplexityStats {
        ppl: (total_nll / tokens as f64).exp(),
        total_nll,
        tokens,
    })
}

/// Distinct and total n-gram counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistinctCounts {
    pub distinct: usize,
    pub total: usize,
}

impl DistinctCounts {
    /// Ratio, defined as 0 when there are no n-grams.
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.distinct as f64 / self.total as f64
        }
    }
}

pub fn distinct_counts<T: Hash + Eq>(responses: &[Vec<T>], n: usize) -> Result<DistinctCounts> {
    if n == 0 {
        return Err(MetricError::ZeroN);
    }
    if responses.is_empty() {
        return Err(MetricError::Empty("response list"));
    }
    let mut seen: HashSet<&[T]> = HashSet::new();
    let mut total = 0;
    for r in responses {
        for gram in r.windows(n) {
            seen.insert(gram);
            total += 1;
        }
    }
    Ok(DistinctCounts {
        distinct: seen.len(),
        total,
    })
}

/// Distinct n-grams over all n-grams across `responses`.
pub fn distinct_n<T: Hash + Eq>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    Ok(distinct_counts(responses, n)?.value())
}

/// Clipped unigram overlap divided by reference length.
pub fn rouge_1<T: Hash + Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricError::Empty("reference"));
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in candidate {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    Ok(overlap as f64 / reference.len() as f64)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest common subsequence length divided by reference length.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricError::Empty("reference"));
    }
    Ok(lcs_len(candidate, reference) as f64 / reference.len() as f64)
}

/// Best score against any of several references.
pub fn max_over_references<T>(candidate: &[T], references: &[Vec<T>], metric: impl Fn(&[T], &[T]) -> Result<f64>) -> Result<f64> {
    if references.is_empty() {
        return Err(MetricError::Empty("reference set"));
    }
    references
        .iter()
        .map(|r| metric(candidate, r))
        .try_fold(0.0f64, |acc, s| Ok(acc.max(s?)))
}

/// Whether distinct-n counts only the top hypothesis per query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistinctScope {
    Top1,
    AllBeams,
}

impl DistinctScope {
    pub fn name(self) -> &'static str {
        match self {
            DistinctScope::Top1 => "top1",
            DistinctScope::AllBeams => "all",
        }
    }
}

impl std::str::FromStr for DistinctScope {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(DistinctScope::Top1),
            "all" => Ok(DistinctScope::AllBeams),
            other => Err(MetricError::Invalid(format!("distinct scope {other:?} is not top1 or all"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ppl: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub rouge1: f64,
    pub rouge_l: f64,
    pub ppl_tokens: usize,
    pub unigrams: DistinctCounts,
    pub bigrams: DistinctCounts,
    pub queries: usize,
    pub distinct_scope: DistinctScope,
}

impl MetricReport {
    /// `generated[i]` are the hypotheses for query `i` (best first) and
    /// `references[i]` its gold replies. ROUGE uses the top hypothesis and
    /// the best-matching reference; both ROUGE scores are averaged over
    /// queries.
    pub fn compute<T: Hash + Eq + Clone>(
        ppl: PerplexityStats,
        generated: &[Vec<Vec<T>>],
        references: &[Vec<Vec<T>>],
        scope: DistinctScope,
    ) -> Result<Self> {
        if generated.len() != references.len() {
            return Err(MetricError::CountMismatch {
                generated: generated.len(),
                references: references.len(),
            });
        }
        if generated.is_empty() {
            return Err(MetricError::Empty("generation set"));
        }
        let empty = Vec::new();
        let top1: Vec<Vec<T>> = generated.iter().map(|g| g.first().unwrap_or(&empty).clone()).collect();
        let pool: Vec<Vec<T>> = match scope {
            DistinctScope::Top1 => top1.clone(),
            DistinctScope::AllBeams => generated.iter().flatten().cloned().collect(),
        };
        let unigrams = distinct_counts(&pool, 1)?;
        let bigrams = distinct_counts(&pool, 2)?;
        let (mut r1, mut rl) = (0.0, 0.0);
        for (cand, refs) in top1.iter().zip(references) {
            r1 += max_over_references(cand, refs, rouge_1)?;
            rl += max_over_references(cand, refs, rouge_l)?;
        }
        let q = generated.len() as f64;
        Ok(MetricReport {
            ppl: ppl.ppl,
            distinct1: unigrams.value(),
            distinct2: bigrams.value(),
            rouge1: r1 / q,
            rouge_l: rl / q,
            ppl_tokens: ppl.tokens,
            unigrams,
            bigrams,
            queries: generated.len(),
            distinct_scope: scope,
        })
    }

    /// One `key: value` line per field.
    pub fn to_text(&self) -> String {
        format!(
            "ppl: {:.6}\ndistinct1: {:.6}\ndistinct2: {:.6}\nrouge1: {:.6}\nrougeL: {:.6}\nrouge_form: recall\n\
             distinct_scope: {}\nqueries: {}\nppl_tokens: {}\nunigrams_distinct: {}\nunigrams_total: {}\n\
             bigrams_distinct: {}\nbigrams_total: {}\n",
            self.ppl,
            self.distinct1,
            self.distinct2,
            self.rouge1,
            self.rouge_l,
            self.distinct_scope.name(),
            self.queries,
            self.ppl_tokens,
            self.unigrams.distinct,
            self.unigrams.total,
            self.bigrams.distinct,
            self.bigrams.total,
        )
    }

    pub fn to_json(&self) -> Value {
        json!({
            "ppl": self.ppl,
            "distinct1": self.distinct1,
            "distinct2": self.distinct2,
            "rouge1": self.rouge1,
            "rougeL": self.rouge_l,
            "meta": {
                "rouge_form": "recall",
                "distinct_scope": self.distinct_scope.name(),
                "queries": self.queries,
                "ppl_tokens": self.ppl_tokens,
                "unigrams": {"distinct": self.unigrams.distinct, "total": self.unigrams.total},
                "bigrams": {"distinct": self.bigrams.distinct, "total": self.bigrams.total},
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::vocab::EOS;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn distinct_examples() {
        assert_eq!(distinct_n(&[words("a b"), words("a c")], 1).unwrap(), 0.75);
        assert_eq!(distinct_n(&[words("x")], 1).unwrap(), 1.0);
        let same = vec![words("x y z"); 10];
        assert_eq!(distinct_n(&same, 2).unwrap(), 0.1);
        assert_eq!(distinct_n(&[words("x"), words("y")], 2).unwrap(), 0.0);
        assert!(distinct_n::<&str>(&[], 1).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_1(&words("a b c"), &words("a b c")).unwrap(), 1.0);
        assert_eq!(rouge_1(&words("the cat sat"), &words("the cat slept on mat")).unwrap(), 0.4);
        assert_eq!(rouge_1(&words("x y"), &words("a b")).unwrap(), 0.0);
        assert_eq!(rouge_1(&[], &words("a b")).unwrap(), 0.0);
        assert_eq!(rouge_l(&words("a b c d"), &words("a c b d")).unwrap(), 0.75);
        assert_eq!(rouge_l(&words("d c b a"), &words("a b c d")).unwrap(), 0.25);
        assert_eq!(rouge_l(&words("a b"), &words("a b")).unwrap(), 1.0);
        assert!(rouge_l(&words("a"), &[]).is_err());
    }

    #[test]
    fn rouge_1_clips_repeated_tokens() {
        assert_eq!(rouge_1(&words("a a a"), &words("a b")).unwrap(), 0.5);
    }

    #[test]
    fn multi_reference_takes_max() {
        let refs = vec![words("x y"), words("a b c d")];
        assert_eq!(max_over_references(&words("a b"), &refs, rouge_1).unwrap(), 0.5);
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let mut p = ModelParams::init(ModelDims::new(8, 13, 4, 4), 2);
        p.get_mut("out_w").unwrap().fill(0.0);
        p.get_mut("out_b").unwrap().fill(0.0);
        let data = vec![(vec![4, 5], vec![6, 7, 8]), (vec![7], vec![EOS])];
        let s = perplexity(&p, &data).unwrap();
        assert!((s.ppl - 13.0).abs() < 1e-9);
        assert_eq!(s.tokens, 5);
    }

    #[test]
    fn perfect_model_perplexity_is_one() {
        let mut p = ModelParams::init(ModelDims::new(8, 13, 4, 4), 2);
        p.get_mut("out_w").unwrap().fill(0.0);
        p.get_mut("out_b").unwrap().set(0, EOS as usize, 800.0);
        let s = perplexity(&p, &[(vec![4], vec![EOS])]).unwrap();
        assert_eq!(s.ppl, 1.0);
    }

    #[test]
    fn perplexity_matches_hand_computed_step_probabilities() {
        let p = ModelParams::init(ModelDims::new(8, 6, 3, 3), 5);
        let data = vec![(vec![4, 5], vec![4]), (vec![6], vec![5, 4])];
        let mut nll = 0.0;
        let mut n = 0;
        for (x, y) in &data {
            let rows = model::teacher_forced_log_probs(&p, x, y).unwrap();
            for (row, &gold) in rows.iter().zip(y.iter().chain([EOS].iter())) {
                nll -= row[gold as usize];
                n += 1;
            }
        }
        let s = perplexity(&p, &data).unwrap();
        assert_eq!(s.tokens, n);
        assert!((s.ppl - (nll / n as f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn report_fields() {
        let gen = vec![vec![words("a b"), words("z")], vec![words("a c")]];
        let refs = vec![vec![words("a b")], vec![words("c d"), words("a x y")]];
        let ppl = PerplexityStats {
            ppl: 3.5,
            total_nll: 1.0,
            tokens: 4,
        };
        let r = MetricReport::compute(ppl, &gen, &refs, DistinctScope::Top1).unwrap();
        assert_eq!(r.distinct1, 0.75);
        assert_eq!(r.rouge1, 0.75);
        assert_eq!(r.rouge_l, 0.75);
        let all = MetricReport::compute(ppl, &gen, &refs, DistinctScope::AllBeams).unwrap();
        assert_eq!(all.unigrams.total, 5);
        let j = r.to_json();
        for k in ["ppl", "distinct1", "distinct2", "rouge1", "rougeL"] {
            assert!(j.get(k).is_some(), "{k}");
        }
        assert!(r.to_text().contains("rougeL: 0.750000"));
    }
}
