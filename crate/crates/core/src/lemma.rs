//! Exact-counting checks of the word-ordering decomposition and its supporting
//! lemmas on small, fully enumerable query/reply universes.
//!
//! Every probability is a ratio of pair counts: `p(x, y) = f(x, y) / F`,
//! `p(y) = f(y) / F`, `p(x | y) = f(x, y) / f(y)`. A word set `S` is the event
//! "the reply's word set is contained in `S`", so
//! `p(y | S) = f(y) / Σ_{y': S(y') ⊆ S} f(y')`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

pub type Word = u32;

/// Largest universe enumerated exactly.
pub const MAX_REPLIES: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum LemmaError {
    #[error("reply is not part of the universe")]
    UnknownReply,
    #[error("query is not part of the universe")]
    UnknownQuery,
    #[error("reply is not designated universal")]
    NotUniversal,
    #[error("reply is designated universal")]
    IsUniversal,
    #[error("no reply has its word set inside the given set")]
    NoCandidates,
    #[error("need at least one universal and one other candidate, found {universal} and {other}")]
    NeedsBothKinds { universal: usize, other: usize },
    #[error("universe is not chain-constructed: {0}")]
    NotChain(String),
    #[error("enumeration needs {needed} replies, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("pair ({0}) never occurs")]
    ZeroJoint(String),
    #[error("invalid universe: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, LemmaError>;

/// A joint count table over distinct queries and distinct replies.
#[derive(Clone, Debug, PartialEq)]
pub struct LemmaUniverse {
    queries: Vec<Vec<Word>>,
    replies: Vec<Vec<Word>>,
    universal: Vec<bool>,
    word_sets: Vec<BTreeSet<Word>>,
    /// `(query, reply) -> f(x, y)`, zero counts omitted.
    counts: BTreeMap<(usize, usize), u64>,
    reply_freq: Vec<u64>,
    total: u64,
}

impl LemmaUniverse {
    /// Build from `(query, reply, count)` triples; repeated pairs accumulate.
    /// Every reply in `universal` must occur in some pair.
    pub fn new(pairs: impl IntoIterator<Item = (Vec<Word>, Vec<Word>, u64)>, universal: &[Vec<Word>]) -> Result<Self> {
        let mut query_ids: HashMap<Vec<Word>, usize> = HashMap::new();
        let mut reply_ids: HashMap<Vec<Word>, usize> = HashMap::new();
        let (mut queries, mut replies) = (Vec::new(), Vec::new());
        let mut counts = BTreeMap::new();
        for (x, y, c) in pairs {
            if x.is_empty() || y.is_empty() {
                return Err(LemmaError::Invalid("queries and replies need at least one word".into()));
            }
            if c == 0 {
                continue;
            }
            let qi = *query_ids.entry(x.clone()).or_insert_with(|| {
                queries.push(x);
                queries.len() - 1
            });
            let ri = *reply_ids.entry(y.clone()).or_insert_with(|| {
                replies.push(y);
                replies.len() - 1
            });
            *counts.entry((qi, ri)).or_insert(0) += c;
        }
        if replies.is_empty() {
            return Err(LemmaError::Invalid("universe has no pairs".into()));
        }
        if replies.len() > MAX_REPLIES {
            return Err(LemmaError::BudgetExceeded {
                needed: replies.len(),
                budget: MAX_REPLIES,
            });
        }
        let mut flags = vec![false; replies.len()];
        for u in universal {
            let i = *reply_ids.get(u).ok_or(LemmaError::UnknownReply)?;
            flags[i] = true;
        }
        let mut reply_freq = vec![0; replies.len()];
        for (&(_, r), &c) in &counts {
            reply_freq[r] += c;
        }
        let word_sets = replies.iter().map(|y| y.iter().copied().collect()).collect();
        Ok(LemmaUniverse {
            queries,
            replies,
            universal: flags,
            word_sets,
            counts,
            total: reply_freq.iter().sum(),
            reply_freq,
        })
    }

    /// `m` universal replies attached once to each of `big_m` shared queries
    /// and `n - m` other replies seen once each, all drawn from one word set.
    pub fn closed_form(big_m: usize, n: usize, m: usize) -> Result<Self> {
        if big_m == 0 || m == 0 || m > n || n > MAX_REPLIES {
            return Err(LemmaError::Invalid(format!("need 0 < m <= n <= {MAX_REPLIES} and M > 0")));
        }
        let replies: Vec<Vec<Word>> = (0..n).map(|i| sequence_for_index(i, 4)).collect();
        let mut pairs = Vec::new();
        for y in &replies[..m] {
            for q in 0..big_m {
                pairs.push((vec![100 + q as Word], y.clone(), 1));
            }
        }
        for (i, y) in replies[m..].iter().enumerate() {
            pairs.push((vec![100 + (big_m + i) as Word], y.clone(), 1));
        }
        Self::new(pairs, &replies[..m])
    }

    /// Random counts over `n_queries × n_replies` with replies drawn over
    /// `vocab` words.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_queries: usize, n_replies: usize, vocab: Word) -> Result<Self> {
        if n_queries == 0 || n_replies == 0 || vocab == 0 {
            return Err(LemmaError::Invalid("sizes must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        let mut replies = Vec::new();
        while replies.len() < n_replies {
            let len = rng.gen_range(1..=4);
            let y: Vec<Word> = (0..len).map(|_| rng.gen_range(1..=vocab)).collect();
            if seen.insert(y.clone()) {
                replies.push(y);
            }
        }
        let mut pairs = Vec::new();
        for y in &replies {
            // Every reply gets at least one query.
            pairs.push((vec![1000 + rng.gen_range(0..n_queries) as Word], y.clone(), rng.gen_range(1..=3)));
            for q in 0..n_queries {
                if rng.gen_bool(0.3) {
                    pairs.push((vec![1000 + q as Word], y.clone(), rng.gen_range(1..=5)));
                }
            }
        }
        let n_universal = rng.gen_range(0..=n_replies.min(2));
        Self::new(pairs, &replies[..n_universal])
    }

    /// Utterances `0..n` placed on a randomly ordered ring; each replies to
    /// the next `k` on the ring, so every utterance is a query with `k`
    /// replies and a reply to `k` distinct queries. Each planted universal
    /// `(reply, M)` attaches to `M` distinct utterances.
    pub fn chain<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize, universal: &[(Vec<Word>, usize)]) -> Result<Self> {
        if k == 0 || n <= k {
            return Err(LemmaError::Invalid(format!("need 0 < k < n, got k = {k}, n = {n}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let utter = |i: usize| vec![1, 10_000 + order[i % n] as Word];
        let mut pairs = Vec::new();
        for i in 0..n {
            for d in 1..=k {
                pairs.push((utter(i), utter(i + d), 1));
            }
        }
        for (y, big_m) in universal {
            if *big_m > n {
                return Err(LemmaError::Invalid(format!("universal reply needs {big_m} queries, only {n} utterances")));
            }
            for i in rand::seq::index::sample(rng, n, *big_m) {
                pairs.push((utter(i), y.clone(), 1));
            }
        }
        let flagged: Vec<Vec<Word>> = universal.iter().map(|(y, _)| y.clone()).collect();
        Self::new(pairs, &flagged)
    }

    pub fn replies(&self) -> &[Vec<Word>] {
        &self.replies
    }

    pub fn queries(&self) -> &[Vec<Word>] {
        &self.queries
    }

    pub fn is_universal(&self, reply: usize) -> bool {
        self.universal[reply]
    }

    pub fn reply_index(&self, y: &[Word]) -> Result<usize> {
        self.replies.iter().position(|r| r == y).ok_or(LemmaError::UnknownReply)
    }

    pub fn query_index(&self, x: &[Word]) -> Result<usize> {
        self.queries.iter().position(|q| q == x).ok_or(LemmaError::UnknownQuery)
    }

    pub fn word_set(&self, reply: usize) -> &BTreeSet<Word> {
        &self.word_sets[reply]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, x: usize, y: usize) -> u64 {
        self.counts.get(&(x, y)).copied().unwrap_or(0)
    }

    pub fn reply_freq(&self, y: usize) -> u64 {
        self.reply_freq[y]
    }

    /// Replies whose word set lies inside `s`.
    pub fn candidates(&self, s: &BTreeSet<Word>) -> Vec<usize> {
        (0..self.replies.len()).filter(|&i| self.word_sets[i].is_subset(s)).collect()
    }

    /// Queries paired with `y`.
    pub fn queries_of(&self, y: usize) -> Vec<usize> {
        self.counts.keys().filter(|&&(_, r)| r == y).map(|&(q, _)| q).collect()
    }

    /// Replies paired with query `x`.
    pub fn replies_of(&self, x: usize) -> Vec<usize> {
        self.counts.range((x, 0)..(x + 1, 0)).map(|(&(_, r), _)| r).collect()
    }

    fn f(&self, y: usize) -> f64 {
        self.reply_freq[y] as f64
    }

    fn mass(&self, s: &BTreeSet<Word>) -> f64 {
        self.candidates(s).into_iter().map(|i| self.f(i)).sum()
    }

    fn joint_mass(&self, x: usize, s: &BTreeSet<Word>) -> f64 {
        self.candidates(s).into_iter().map(|i| self.count(x, i) as f64).sum()
    }

    pub fn p_y(&self, y: usize) -> f64 {
        self.f(y) / self.total as f64
    }

    pub fn p_xy(&self, x: usize, y: usize) -> f64 {
        self.count(x, y) as f64 / self.total as f64
    }

    pub fn p_x_given_y(&self, x: usize, y: usize) -> f64 {
        self.count(x, y) as f64 / self.f(y)
    }

    pub fn p_s(&self, s: &BTreeSet<Word>) -> f64 {
        self.mass(s) / self.total as f64
    }

    pub fn p_y_given_s(&self, y: usize, s: &BTreeSet<Word>) -> f64 {
        if self.word_sets[y].is_subset(s) {
            self.f(y) / self.mass(s)
        } else {
            0.0
        }
    }

    pub fn p_x_given_s(&self, x: usize, s: &BTreeSet<Word>) -> f64 {
        self.joint_mass(x, s) / self.mass(s)
    }

    /// `(word, reply-side token count)` sorted by descending count, then word.
    pub fn word_ranking(&self) -> Vec<(Word, u64)> {
        let mut counts: BTreeMap<Word, u64> = BTreeMap::new();
        for (y, words) in self.replies.iter().enumerate() {
            for w in words {
                *counts.entry(*w).or_insert(0) += self.reply_freq[y];
            }
        }
        let mut ranked: Vec<_> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }
}

/// The `i`-th non-empty sequence over words `1..=base` in shortlex order.
fn sequence_for_index(mut i: usize, base: usize) -> Vec<Word> {
    let mut len = 1;
    let mut block = base;
    while i >= block {
        i -= block;
        len += 1;
        block *= base;
    }
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = (i % base) as Word + 1;
        i /= base;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WordSetCheck {
    /// `p(S(y) | y) = 1`.
    pub set_given_reply: bool,
    /// `p(S(y), y) = p(y)`.
    pub joint_with_set: bool,
    /// `p(x, y, S(y)) = p(x, y)` for every query.
    pub triple_joint: bool,
}

impl WordSetCheck {
    pub fn holds(&self) -> bool {
        self.set_given_reply && self.joint_with_set && self.triple_joint
    }
}

/// Count the pairs in the event directly rather than through `p_*`.
pub fn verify_word_set(u: &LemmaUniverse, y: usize) -> Result<WordSetCheck> {
    if y >= u.replies.len() {
        return Err(LemmaError::UnknownReply);
    }
    let s = &u.word_sets[y];
    let in_event = |r: usize| u.word_sets[r].is_subset(s);
    let mut with_y_and_set = 0u64;
    for (&(_, r), &c) in &u.counts {
        if r == y && in_event(r) {
            with_y_and_set += c;
        }
    }
    let total = u.total as f64;
    let set_given_reply = with_y_and_set as f64 / u.f(y) == 1.0;
    let joint_with_set = with_y_and_set as f64 / total == u.p_y(y);
    let triple_joint = (0..u.queries.len()).all(|x| {
        let c = if in_event(y) { u.count(x, y) } else { 0 };
        c as f64 / total == u.p_xy(x, y)
    });
    Ok(WordSetCheck {
        set_given_reply,
        joint_with_set,
        triple_joint,
    })
}

/// `ε₁ = max_x p(x | y_ur)`.
pub fn universal_query_spread(u: &LemmaUniverse, y_ur: usize) -> Result<f64> {
    if y_ur >= u.replies.len() {
        return Err(LemmaError::UnknownReply);
    }
    if !u.universal[y_ur] {
        return Err(LemmaError::NotUniversal);
    }
    Ok(u.queries_of(y_ur).into_iter().map(|x| u.p_x_given_y(x, y_ur)).fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniversalMassCheck {
    /// `Σ p(yᵘʳ | S)` by counting.
    pub universal_sum: f64,
    /// `max p(yᵒ | S)` over the other candidates.
    pub max_other: f64,
    /// Candidates with word set inside `S`.
    pub n: usize,
    /// Universal candidates among them.
    pub m: usize,
    /// `M·m / (M·m + n − m)` when every universal candidate has frequency `M`
    /// and every other candidate frequency 1; `None` otherwise.
    pub closed_form: Option<f64>,
    /// The claimed lower bound `M / (M − 3)` and whether it is a valid
    /// probability bound (it never is, being above 1 for `M > 3`).
    pub claimed_bound: Option<(f64, bool)>,
}

pub fn verify_universal_mass(u: &LemmaUniverse, s: &BTreeSet<Word>) -> Result<UniversalMassCheck> {
    let cands = u.candidates(s);
    if cands.is_empty() {
        return Err(LemmaError::NoCandidates);
    }
    let (ur, other): (Vec<usize>, Vec<usize>) = cands.iter().partition(|&&i| u.universal[i]);
    if ur.is_empty() || other.is_empty() {
        return Err(LemmaError::NeedsBothKinds {
            universal: ur.len(),
            other: other.len(),
        });
    }
    let universal_sum = ur.iter().map(|&i| u.p_y_given_s(i, s)).sum();
    let max_other = other.iter().map(|&i| u.p_y_given_s(i, s)).fold(0.0, f64::max);
    let big_m = u.reply_freq[ur[0]];
    let uniform = ur.iter().all(|&i| u.reply_freq[i] == big_m) && other.iter().all(|&i| u.reply_freq[i] == 1);
    let (n, m) = (cands.len(), ur.len());
    let closed_form = uniform.then(|| universal_mass_closed_form(big_m as f64, n, m));
    let claimed_bound = uniform.then(|| {
        let b = claimed_mass_bound(big_m as f64);
        (b, (0.0..=1.0).contains(&b))
    });
    Ok(UniversalMassCheck {
        universal_sum,
        max_other,
        n,
        m,
        closed_form,
        claimed_bound,
    })
}

/// `M·m / (M·m + n − m)`.
pub fn universal_mass_closed_form(big_m: f64, n: usize, m: usize) -> f64 {
    big_m * m as f64 / (big_m * m as f64 + (n - m) as f64)
}

/// `M / (M − 3)`, the claimed closed-form bound on the universal mass.
pub fn claimed_mass_bound(big_m: f64) -> f64 {
    big_m / (big_m - 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainCheck {
    pub k: usize,
    /// Distinct queries of `y`.
    pub queries: usize,
    /// `p(x | y)` for each attached query.
    pub probabilities: Vec<f64>,
}

impl ChainCheck {
    pub fn holds(&self) -> bool {
        let target = 1.0 / self.k as f64;
        self.queries == self.k && self.probabilities.iter().all(|&p| p == target)
    }
}

/// The universe must be chain-shaped: every non-universal reply also occurs as
/// a query, and all such queries have the same number `K` of non-universal
/// replies.
pub fn verify_uniform_chain(u: &LemmaUniverse, y: usize) -> Result<ChainCheck> {
    if y >= u.replies.len() {
        return Err(LemmaError::UnknownReply);
    }
    if u.universal[y] {
        return Err(LemmaError::IsUniversal);
    }
    let mut k = None;
    for (r, words) in u.replies.iter().enumerate() {
        if u.universal[r] {
            continue;
        }
        let q = u
            .query_index(words)
            .map_err(|_| LemmaError::NotChain(format!("reply {words:?} never occurs as a query")))?;
        let out = u.replies_of(q).into_iter().filter(|&r| !u.universal[r]).count();
        match k {
            None => k = Some(out),
            Some(k) if k != out => {
                return Err(LemmaError::NotChain(format!("queries have {k} and {out} replies")));
            }
            _ => {}
        }
    }
    let k = k.ok_or_else(|| LemmaError::NotChain("no non-universal replies".into()))?;
    let queries = u.queries_of(y);
    Ok(ChainCheck {
        k,
        queries: queries.len(),
        probabilities: queries.iter().map(|&x| u.p_x_given_y(x, y)).collect(),
    })
}

/// Every line of the word-ordering chain, each evaluated from its own
/// counting formula, plus the three-way split of the mixture and the proxy.
#[derive(Clone, Debug, PartialEq)]
pub struct WordOrderingReport {
    /// `log p(y | S(y), x)` counted directly.
    pub exact: f64,
    /// The rewriting steps of the chain, in order.
    pub chain: Vec<f64>,
    /// `p(x | y) p(y | S)`.
    pub ground_truth_term: f64,
    /// `Σ p(x | yᵘʳ) p(yᵘʳ | S)` over universal candidates other than `y`.
    pub universal_term: f64,
    /// The same over the remaining candidates.
    pub other_term: f64,
    /// `Σ_i p(x | y_i) p(y_i | S)` over all candidates.
    pub mixture: f64,
    /// Distinct queries of `y`.
    pub k: usize,
    /// `log[p(y|S) / (p(y|S) + ε/K)]` with `ε` the universal plus other term.
    pub proxy: f64,
}

impl WordOrderingReport {
    pub fn max_chain_deviation(&self) -> f64 {
        self.chain.iter().map(|v| (v - self.exact).abs()).fold(0.0, f64::max)
    }

    pub fn split_deviation(&self) -> f64 {
        (self.ground_truth_term + self.universal_term + self.other_term - self.mixture).abs()
    }

    pub fn proxy_gap(&self) -> f64 {
        self.exact - self.proxy
    }
}

pub fn verify_word_ordering(u: &LemmaUniverse, x: usize, y: usize, budget: usize) -> Result<WordOrderingReport> {
    if y >= u.replies.len() {
        return Err(LemmaError::UnknownReply);
    }
    if x >= u.queries.len() {
        return Err(LemmaError::UnknownQuery);
    }
    if u.count(x, y) == 0 {
        return Err(LemmaError::ZeroJoint(format!("query {x}, reply {y}")));
    }
    let s = &u.word_sets[y];
    let cands = u.candidates(s);
    if cands.len() > budget {
        return Err(LemmaError::BudgetExceeded {
            needed: cands.len(),
            budget,
        });
    }
    let total = u.total as f64;
    let fxy = u.count(x, y) as f64;

    // p(y, S, x) / p(S, x): pairs with reply y and query x over pairs with
    // query x whose reply lies in S.
    let exact = (fxy / u.joint_mass(x, s)).ln();

    let p_s_given_y = 1.0;
    let p_y = u.p_y(y);
    let p_s = u.p_s(s);
    let p_y_and_s = u.f(y) / total;
    let p_xy_and_s = fxy / total;
    let p_x_given_ys = p_xy_and_s / p_y_and_s;
    let p_x_and_s = u.joint_mass(x, s) / total;
    let p_x_given_s = p_x_and_s / p_s;
    let p_y_given_s = u.p_y_given_s(y, s);
    let p_xy = u.p_xy(x, y);
    let p_x_given_y = u.p_x_given_y(x, y);

    let mut ground_truth_term = 0.0;
    let mut universal_term = 0.0;
    let mut other_term = 0.0;
    let mut mixture = 0.0;
    for &i in &cands {
        let term = u.p_x_given_y(x, i) * u.p_y_given_s(i, s);
        mixture += term;
        if i == y {
            ground_truth_term += term;
        } else if u.universal[i] {
            universal_term += term;
        } else {
            other_term += term;
        }
    }

    let chain = vec![
        (p_s_given_y * p_y * p_x_given_ys / (p_s * p_x_given_s)).ln(),
        1f64.ln() + (p_y / p_s).ln() + (p_x_given_ys / p_x_given_s).ln(),
        (p_y_and_s / p_s).ln() + (p_xy_and_s * p_s / (p_y_and_s * p_x_and_s)).ln(),
        p_y_given_s.ln() + (p_xy * p_s / (p_y * p_x_and_s)).ln(),
        p_y_given_s.ln() + (p_x_given_y / p_x_given_s).ln(),
        p_y_given_s.ln() + (p_x_given_y / mixture).ln(),
    ];

    let k = u.queries_of(y).len();
    let eps = universal_term + other_term;
    let proxy = (p_y_given_s / (p_y_given_s + eps / k as f64)).ln();
    Ok(WordOrderingReport {
        exact,
        chain,
        ground_truth_term,
        universal_term,
        other_term,
        mixture,
        k,
        proxy,
    })
}

/// Smallest `t` with `0.05·ln(t + 1) > 0.25`.
pub fn quarter_threshold() -> usize {
    (1..).find(|&t| 0.05 * ((t + 1) as f64).ln() > 0.25).expect("threshold exists")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopWordShareReport {
    /// Reply length T.
    pub reply_len: usize,
    pub t: usize,
    /// The binomial-sum expression for `m/n` (first form).
    pub analytic: f64,
    /// The rewritten form with `2^T` in the denominator (second form).
    pub analytic_rewritten: f64,
    /// `0.05·ln(t + 1)`.
    pub lower_bound: f64,
    /// Whether `lower_bound > 0.25`.
    pub exceeds_quarter: bool,
    /// Exact expectation of the sampled quantity, `((1+q)^T − 1) / (2^T − 1)`
    /// with `q` the top-t mass.
    pub expected: f64,
    /// Mean over samples of the fraction of non-empty subsequences made only of
    /// top-t words.
    pub monte_carlo: f64,
    pub samples: usize,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `p(w_i) = C / i` for `i = 1..=V`, `V` the largest rank keeping the total at
/// most 1; any remaining mass goes to one extra tail rank.
pub fn exact_zipf(c: f64) -> Vec<f64> {
    let mut p = Vec::new();
    let mut acc = 0.0;
    loop {
        let next = c / (p.len() + 1) as f64;
        if acc + next > 1.0 {
            break;
        }
        acc += next;
        p.push(next);
    }
    if 1.0 - acc > 0.0 {
        p.push(1.0 - acc);
    }
    p
}

pub fn verify_top_word_share<R: Rng + ?Sized>(reply_len: usize, t: usize, c: f64, samples: usize, rng: &mut R) -> Result<TopWordShareReport> {
    if reply_len == 0 || t == 0 || samples == 0 || !(c > 0.0 && c <= 1.0) {
        return Err(LemmaError::Invalid("need T, t and samples at least 1 and 0 < C <= 1".into()));
    }
    let dist = exact_zipf(c);
    if t >= dist.len() {
        return Err(LemmaError::Invalid(format!("t = {t} covers the whole {}-word vocabulary", dist.len())));
    }
    let big_t = reply_len;
    let log_term = ((t + 1) as f64).ln();
    let upper = ((big_t as f64 * log_term).floor() as usize).min(big_t);
    let all_nonempty: f64 = (1..=big_t).map(|j| binomial(big_t, j)).sum();
    let analytic = (1..=upper).map(|i| binomial(big_t, i) / all_nonempty).sum::<f64>() * 0.1 * log_term;
    let lower = (big_t as f64 * log_term).ceil() as usize;
    let tail: f64 = (lower..=big_t).map(|i| binomial(big_t, i)).sum();
    let two_t = 2f64.powi(big_t as i32);
    let analytic_rewritten = (two_t - tail) / two_t * 0.1 * log_term;

    let q: f64 = dist[..t].iter().sum();
    let expected = ((1.0 + q).powi(big_t as i32) - 1.0) / (two_t - 1.0);
    let sampler = WeightedIndex::new(&dist).map_err(|e| LemmaError::Invalid(e.to_string()))?;
    let mut acc = 0.0;
    for _ in 0..samples {
        let top = (0..big_t).filter(|_| sampler.sample(rng) < t).count();
        acc += (2f64.powi(top as i32) - 1.0) / (two_t - 1.0);
    }
    let lower_bound = 0.05 * log_term;
    Ok(TopWordShareReport {
        reply_len,
        t,
        analytic,
        analytic_rewritten,
        lower_bound,
        exceeds_quarter: lower_bound > 0.25,
        expected,
        monte_carlo: acc / samples as f64,
        samples,
    })
}

fn words(w: &[Word]) -> String {
    w.iter().map(Word::to_string).collect::<Vec<_>>().join(" ")
}

/// Structured text: every lemma check over every applicable reply, followed
/// by the closed-form and proportion evaluations.
pub fn lemma_report<R: Rng + ?Sized>(u: &LemmaUniverse, rng: &mut R) -> String {
    let mut out = String::new();
    let pf = |b: bool| if b { "pass" } else { "fail" };
    let _ = writeln!(out, "universe: {} queries, {} replies, {} pairs", u.queries.len(), u.replies.len(), u.total);

    let l1 = (0..u.replies.len()).all(|y| verify_word_set(u, y).is_ok_and(|c| c.holds()));
    let _ = writeln!(out, "word_set: {}", pf(l1));

    for y in (0..u.replies.len()).filter(|&y| u.universal[y]) {
        if let Ok(eps) = universal_query_spread(u, y) {
            let m = u.queries_of(y).len();
            let _ = writeln!(out, "query_spread: reply [{}] M = {m} eps1 = {eps:.6} 1/M = {:.6} {}", words(&u.replies[y]), 1.0 / m as f64, pf(eps == 1.0 / m as f64));
        }
    }

    let mut seen_sets = BTreeSet::new();
    for y in 0..u.replies.len() {
        let s = &u.word_sets[y];
        if !seen_sets.insert(s.clone()) {
            continue;
        }
        if let Ok(c) = verify_universal_mass(u, s) {
            let _ = write!(out, "universal_mass: set {{{}}} n = {} m = {} universal_sum = {:.6} max_other = {:.6}", words(&s.iter().copied().collect::<Vec<_>>()), c.n, c.m, c.universal_sum, c.max_other);
            if let Some(cf) = c.closed_form {
                let _ = write!(out, " closed_form = {cf:.6} {}", pf((cf - c.universal_sum).abs() <= 1e-9));
            }
            if let Some((b, valid)) = c.claimed_bound {
                let _ = write!(out, " claimed_bound = {b:.6} ({})", if valid { "valid" } else { "invalid: exceeds 1" });
            }
            let _ = writeln!(out);
        }
    }

    let non_universal: Vec<usize> = (0..u.replies.len()).filter(|&y| !u.universal[y]).collect();
    match non_universal.first().map(|&y| verify_uniform_chain(u, y)) {
        Some(Ok(_)) => {
            let all = non_universal.iter().all(|&y| verify_uniform_chain(u, y).is_ok_and(|c| c.holds()));
            let k = verify_uniform_chain(u, non_universal[0]).map(|c| c.k).unwrap_or(0);
            let _ = writeln!(out, "uniform_chain: K = {k} {}", pf(all));
        }
        Some(Err(e)) => {
            let _ = writeln!(out, "uniform_chain: skipped ({e})");
        }
        None => {
            let _ = writeln!(out, "uniform_chain: skipped (no non-universal replies)");
        }
    }

    let (mut chain_dev, mut split_dev, mut gap, mut checked) = (0f64, 0f64, 0f64, 0usize);
    for (&(x, y), _) in &u.counts {
        if let Ok(r) = verify_word_ordering(u, x, y, MAX_REPLIES) {
            chain_dev = chain_dev.max(r.max_chain_deviation());
            split_dev = split_dev.max(r.split_deviation());
            gap = gap.max(r.proxy_gap().abs());
            checked += 1;
        }
    }
    let _ = writeln!(out, "chain: {checked} pairs max_deviation = {chain_dev:.3e} {}", pf(chain_dev <= 1e-12));
    let _ = writeln!(out, "split: max_deviation = {split_dev:.3e} {}", pf(split_dev <= 1e-12));
    let _ = writeln!(out, "proxy: max |exact - proxy| = {gap:.6} (reported)");

    let _ = writeln!(out, "closed_form: M = 1000 n - m = 3 m = 1 sum = {:.6} claimed_bound = {:.6}", universal_mass_closed_form(1000.0, 4, 1), claimed_mass_bound(1000.0));
    let _ = writeln!(out, "proportion: threshold t = {}", quarter_threshold());
    for t in [147, 148, 500, 1000] {
        for big_t in [1, 5, 10] {
            if let Ok(r) = verify_top_word_share(big_t, t, 0.1, 2000, rng) {
                let _ = writeln!(
                    out,
                    "proportion: T = {big_t} t = {t} analytic = {:.4} bound = {:.4} expected = {:.4} monte_carlo = {:.4} {}",
                    r.analytic,
                    r.lower_bound,
                    r.expected,
                    r.monte_carlo,
                    if r.expected >= r.lower_bound { "above_bound" } else { "below_bound" }
                );
            }
        }
    }
    out
}

/// Universe text format: `query TAB reply [TAB count]` per line, plus
/// `@universal TAB reply` lines designating universal replies. Words are
/// interned in first-seen order; `#` starts a comment line.
pub fn parse_universe(text: &str) -> Result<LemmaUniverse> {
    let mut ids: HashMap<String, Word> = HashMap::new();
    let mut intern = |s: &str| -> Vec<Word> {
        s.split_whitespace()
            .map(|w| {
                let next = ids.len() as Word + 1;
                *ids.entry(w.to_string()).or_insert(next)
            })
            .collect()
    };
    let mut pairs = Vec::new();
    let mut universal = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["@universal", y] => universal.push(intern(y)),
            [x, y] => pairs.push((intern(x), intern(y), 1)),
            [x, y, c] => {
                let c = c
                    .trim()
                    .parse()
                    .map_err(|_| LemmaError::Invalid(format!("line {}: bad count {c:?}", i + 1)))?;
                pairs.push((intern(x), intern(y), c));
            }
            _ => return Err(LemmaError::Invalid(format!("line {}: expected 2 or 3 TAB-separated fields", i + 1))),
        }
    }
    LemmaUniverse::new(pairs, &universal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shortlex_sequences() {
        assert_eq!(sequence_for_index(0, 4), vec![1]);
        assert_eq!(sequence_for_index(3, 4), vec![4]);
        assert_eq!(sequence_for_index(4, 4), vec![1, 1]);
        assert_eq!(sequence_for_index(19, 4), vec![4, 4]);
        assert_eq!(sequence_for_index(20, 4), vec![1, 1, 1]);
    }

    #[test]
    fn single_reply_universe() {
        let u = LemmaUniverse::new([(vec![1], vec![2, 3], 4)], &[]).unwrap();
        assert_eq!(u.p_y(0), 1.0);
        assert!(verify_word_set(&u, 0).unwrap().holds());
        let r = verify_word_ordering(&u, 0, 0, 10).unwrap();
        assert_eq!(r.exact, 0.0);
        assert_eq!(r.proxy, 0.0);
    }

    #[test]
    fn query_spread_uniform_attachment() {
        let u = LemmaUniverse::closed_form(1000, 4, 1).unwrap();
        assert_eq!(universal_query_spread(&u, 0).unwrap(), 0.001);
        let u = LemmaUniverse::closed_form(1, 2, 1).unwrap();
        assert_eq!(universal_query_spread(&u, 0).unwrap(), 1.0);
        assert_eq!(universal_query_spread(&u, 1), Err(LemmaError::NotUniversal));
    }

    #[test]
    fn universal_mass_example() {
        let u = LemmaUniverse::closed_form(1000, 4, 1).unwrap();
        let s: BTreeSet<Word> = (1..=4).collect();
        let c = verify_universal_mass(&u, &s).unwrap();
        assert_eq!((c.n, c.m), (4, 1));
        assert!((c.universal_sum - 1000.0 / 1003.0).abs() < 1e-12);
        assert!((c.universal_sum - 0.99701).abs() < 1e-5);
        let (b, valid) = c.claimed_bound.unwrap();
        assert!(b > 1.0 && !valid);
    }

    #[test]
    fn universal_mass_needs_both_kinds() {
        let u = LemmaUniverse::closed_form(5, 3, 3).unwrap();
        let s: BTreeSet<Word> = (1..=4).collect();
        assert!(matches!(verify_universal_mass(&u, &s), Err(LemmaError::NeedsBothKinds { universal: 3, other: 0 })));
        assert_eq!(verify_universal_mass(&u, &BTreeSet::from([9])), Err(LemmaError::NoCandidates));
    }

    #[test]
    fn uniform_chain_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = LemmaUniverse::chain(&mut rng, 6, 3, &[]).unwrap();
        let c = verify_uniform_chain(&u, 0).unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.probabilities, vec![1.0 / 3.0; 3]);
        let u = LemmaUniverse::chain(&mut rng, 4, 1, &[]).unwrap();
        assert_eq!(verify_uniform_chain(&u, 0).unwrap().probabilities, vec![1.0]);
    }

    #[test]
    fn non_chain_is_rejected() {
        let u = LemmaUniverse::new([(vec![1], vec![2], 1), (vec![3], vec![4], 1)], &[]).unwrap();
        assert!(matches!(verify_uniform_chain(&u, 0), Err(LemmaError::NotChain(_))));
    }

    #[test]
    fn quarter_threshold_is_148() {
        assert_eq!(quarter_threshold(), 148);
        assert!(0.05 * 148f64.ln() < 0.25);
        assert!((0.05 * 501f64.ln() - 0.3107).abs() < 5e-4);
    }

    #[test]
    fn exact_zipf_is_a_distribution() {
        let p = exact_zipf(0.1);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[9], 0.01);
    }

    #[test]
    fn budget_is_enforced() {
        let u = LemmaUniverse::closed_form(2, 10, 1).unwrap();
        assert!(matches!(verify_word_ordering(&u, 0, 0, 1), Err(LemmaError::BudgetExceeded { .. })));
    }

    #[test]
    fn parse_and_report() {
        let text = "# tiny\na\tok\nb\tok\nc\tok\nc\tnice hat\t2\n@universal\tok\n";
        let u = parse_universe(text).unwrap();
        assert_eq!(u.replies().len(), 2);
        let report = lemma_report(&u, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(report.contains("word_set: pass"));
        assert!(report.contains("query_spread: reply"));
        assert!(report.contains("chain: 4 pairs"));
    }
}
