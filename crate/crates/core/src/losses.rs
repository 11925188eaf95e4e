//! Cross-entropy, negative sampling and the max-margin ranking term.
//!
//! The minimised objective for a triplet `(x, y, y⁻)` is
//!
//! ```text
//! total = -log p(y|x) + λ · max{0, arg}
//! arg   = log p(y|x) - avg log p(y⁻|x) - γ     (literal)
//! arg   = avg log p(y⁻|x) - log p(y|x) + γ     (standard hinge)
//! ```
//!
//! where the average runs over the sampled negatives' raw sequence
//! log-probabilities.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::model::{self, encode_on, sequence_log_prob_on, Bound, ModelError, ModelParams};
use crate::tensor::{Tape, TensorError, Var};
use crate::vocab::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("triplet needs at least one negative")]
    NoNegatives,
    #[error("negative {0} equals the positive response")]
    NegativeIsPositive(usize),
    #[error("need at least {needed} distinct responses to sample negatives, corpus has {available}")]
    CorpusTooSmall { needed: usize, available: usize },
    #[error("invalid loss setting: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Model(ModelError::Tensor(e))
    }
}

/// Direction of the hinge argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HingeMode {
    /// `log p(y|x) - avg log p(y⁻|x) - γ`, the literal objective.
    #[default]
    Literal,
    /// `avg log p(y⁻|x) - log p(y|x) + γ`, the conventional ranking hinge.
    Standard,
}

impl fmt::Display for HingeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HingeMode::Literal => "literal",
            HingeMode::Standard => "standard",
        })
    }
}

impl FromStr for HingeMode {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" | "paper" => Ok(HingeMode::Literal),
            "standard" | "standard-hinge" => Ok(HingeMode::Standard),
            other => Err(LossError::Invalid(format!("unknown hinge mode {other:?}"))),
        }
    }
}

/// Which sub-gradient applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginBranch {
    /// Hinge is flat; the gradient is the cross-entropy gradient alone.
    Inactive,
    /// Hinge is linear; its gradient is added with weight λ.
    Active,
}

/// Select the branch. In literal mode a difference exactly equal to
/// `γ` is inactive.
pub fn margin_branch(pos_logprob: f64, neg_logprob_avg: f64, gamma: f64, mode: HingeMode) -> MarginBranch {
    let active = match mode {
        HingeMode::Literal => pos_logprob - neg_logprob_avg > gamma,
        HingeMode::Standard => neg_logprob_avg - pos_logprob + gamma > 0.0,
    };
    if active {
        MarginBranch::Active
    } else {
        MarginBranch::Inactive
    }
}

fn hinge_argument(pos: f64, neg: f64, gamma: f64, mode: HingeMode) -> f64 {
    match mode {
        HingeMode::Literal => pos - neg - gamma,
        HingeMode::Standard => neg - pos + gamma,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub mode: HingeMode,
    /// Divide each sequence log-probability in the hinge by its scored
    /// length. Off by default.
    pub per_token_mean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            gamma: 0.18,
            mode: HingeMode::Literal,
            per_token_mean: false,
        }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(LossError::NonFinite("lambda"));
        }
        if !self.gamma.is_finite() {
            return Err(LossError::NonFinite("gamma"));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(LossError::Invalid(format!(
                "lambda and gamma must be non-negative (got {}, {})",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

/// A query, its gold response and sampled negative responses.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub query: Vec<TokenId>,
    pub positive: Vec<TokenId>,
    pub negatives: Vec<Vec<TokenId>>,
}

impl Triplet {
    pub fn new(query: Vec<TokenId>, positive: Vec<TokenId>, negatives: Vec<Vec<TokenId>>) -> Result<Self> {
        if negatives.is_empty() {
            return Err(LossError::NoNegatives);
        }
        if let Some(i) = negatives.iter().position(|n| *n == positive) {
            return Err(LossError::NegativeIsPositive(i));
        }
        Ok(Triplet {
            query,
            positive,
            negatives,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pos_logprob: f64,
    pub neg_logprob_avg: f64,
    /// Unweighted hinge value `max{0, arg}`.
    pub margin_term: f64,
    pub margin_active: bool,
    pub total: f64,
    pub mode: HingeMode,
}

/// `-log p(y|x)`.
pub fn cross_entropy_nll(params: &ModelParams, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
    Ok(-model::sequence_log_prob(params, x, y)?)
}

/// Uniform sampler over the multiset of corpus responses.
#[derive(Clone, Debug)]
pub struct NegativeSampler<'a> {
    responses: &'a [Vec<TokenId>],
    distinct: usize,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(responses: &'a [Vec<TokenId>]) -> Self {
        let distinct = responses.iter().collect::<HashSet<_>>().len();
        NegativeSampler { responses, distinct }
    }

    pub fn distinct(&self) -> usize {
        self.distinct
    }

    /// Draw `k` distinct responses, none equal to `positive`. Each draw is
    /// uniform over the multiset; collisions with the positive or an earlier
    /// draw are redrawn.
    pub fn sample<R: Rng + ?Sized>(&self, positive: &[TokenId], k: usize, rng: &mut R) -> Result<Vec<Vec<TokenId>>> {
        if k == 0 {
            return Err(LossError::Invalid("negatives per positive must be at least 1".into()));
        }
        if self.distinct < k + 1 {
            return Err(LossError::CorpusTooSmall {
                needed: k + 1,
                available: self.distinct,
            });
        }
        let mut out: Vec<Vec<TokenId>> = Vec::with_capacity(k);
        while out.len() < k {
            let cand = &self.responses[rng.gen_range(0..self.responses.len())];
            if cand.as_slice() != positive && !out.contains(cand) {
                out.push(cand.clone());
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper around [`NegativeSampler`].
pub fn sample_negatives<R: Rng + ?Sized>(
    responses: &[Vec<TokenId>],
    positive: &[TokenId],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<TokenId>>> {
    NegativeSampler::new(responses).sample(positive, k, rng)
}

/// Build the objective on `tape`. Returns the `[1]` total node together with
/// the breakdown. The hinge node is only added to the graph when the margin
/// branch is active, so the backward pass follows the selected sub-gradient.
pub fn ranking_loss_on(tape: &mut Tape<'_>, p: &Bound, triplet: &Triplet, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if triplet.negatives.is_empty() {
        return Err(LossError::NoNegatives);
    }
    let enc = encode_on(tape, p, &triplet.query)?;
    let scored_len = |y: &[TokenId]| model::scored_tokens(y).len() as f64;
    let maybe_mean = |tape: &mut Tape<'_>, v: Var, y: &[TokenId]| -> Result<Var> {
        Ok(if cfg.per_token_mean { tape.scale(v, 1.0 / scored_len(y))? } else { v })
    };

    let pos = sequence_log_prob_on(tape, p, &enc, &triplet.positive)?;
    let ce = tape.scale(pos, -1.0)?;
    let pos_m = maybe_mean(tape, pos, &triplet.positive)?;
    let mut neg_sum: Option<Var> = None;
    for neg in &triplet.negatives {
        let lp = sequence_log_prob_on(tape, p, &enc, neg)?;
        let lp = maybe_mean(tape, lp, neg)?;
        neg_sum = Some(match neg_sum {
            Some(acc) => tape.add(acc, lp)?,
            None => lp,
        });
    }
    let neg_avg = tape.scale(neg_sum.expect("negatives checked non-empty"), 1.0 / triplet.negatives.len() as f64)?;

    let pos_value = tape.item(pos_m);
    let neg_value = tape.item(neg_avg);
    if !pos_value.is_finite() {
        return Err(LossError::NonFinite("pos_logprob"));
    }
    if !neg_value.is_finite() {
        return Err(LossError::NonFinite("neg_logprob_avg"));
    }
    let ce_value = tape.item(ce);

    let active = cfg.lambda > 0.0 && margin_branch(pos_value, neg_value, cfg.gamma, cfg.mode) == MarginBranch::Active;
    let (total, margin_term) = if active {
        let (a, b) = match cfg.mode {
            HingeMode::Literal => (pos_m, neg_avg),
            HingeMode::Standard => (neg_avg, pos_m),
        };
        let diff = tape.sub(a, b)?;
        let shift = tape.scalar(match cfg.mode {
            HingeMode::Literal => -cfg.gamma,
            HingeMode::Standard => cfg.gamma,
        });
        let arg = tape.add(diff, shift)?;
        let hinge = tape.max_with_zero(arg)?;
        let weighted = tape.scale(hinge, cfg.lambda)?;
        let total = tape.add(ce, weighted)?;
        (total, tape.item(hinge))
    } else {
        (ce, 0.0)
    };
    let total_value = tape.item(total);
    if !total_value.is_finite() {
        return Err(LossError::NonFinite("total"));
    }
    debug_assert!(!active || margin_term == hinge_argument(pos_value, neg_value, cfg.gamma, cfg.mode).max(0.0));
    Ok((
        total,
        LossBreakdown {
            ce: ce_value,
            pos_logprob: tape.item(pos),
            neg_logprob_avg: neg_value,
            margin_term,
            margin_active: active,
            total: total_value,
            mode: cfg.mode,
        },
    ))
}

/// Evaluate the objective without keeping gradients.
pub fn ranking_loss(params: &ModelParams, triplet: &Triplet, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    Ok(ranking_loss_on(&mut tape, &p, triplet, cfg)?.1)
}

/// Combine precomputed log-probabilities into a breakdown. Used where the
/// sequence scores are already known.
pub fn breakdown_from_logprobs(pos_logprob: f64, neg_logprobs: &[f64], cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    if neg_logprobs.is_empty() {
        return Err(LossError::NoNegatives);
    }
    if !pos_logprob.is_finite() {
        return Err(LossError::NonFinite("pos_logprob"));
    }
    let neg = neg_logprobs.iter().sum::<f64>() / neg_logprobs.len() as f64;
    if !neg.is_finite() {
        return Err(LossError::NonFinite("neg_logprob_avg"));
    }
    let ce = -pos_logprob;
    let active = cfg.lambda > 0.0 && margin_branch(pos_logprob, neg, cfg.gamma, cfg.mode) == MarginBranch::Active;
    let margin_term = if active { hinge_argument(pos_logprob, neg, cfg.gamma, cfg.mode).max(0.0) } else { 0.0 };
    Ok(LossBreakdown {
        ce,
        pos_logprob,
        neg_logprob_avg: neg,
        margin_term,
        margin_active: active,
        total: if active { ce + cfg.lambda * margin_term } else { ce },
        mode: cfg.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(lambda: f64, gamma: f64, mode: HingeMode) -> LossConfig {
        LossConfig {
            lambda,
            gamma,
            mode,
            per_token_mean: false,
        }
    }

    #[test]
    fn literal_substitution() {
        let b = breakdown_from_logprobs(-2.0, &[-5.0], &cfg(0.1, 0.18, HingeMode::Literal)).unwrap();
        assert!(b.margin_active);
        assert!((b.margin_term - 2.82).abs() < 1e-12);
        assert!((b.total - b.ce - 0.282).abs() < 1e-12);
    }

    #[test]
    fn literal_inactive_when_difference_below_gamma() {
        let b = breakdown_from_logprobs(-5.0, &[-4.9], &cfg(0.1, 0.18, HingeMode::Literal)).unwrap();
        assert!(!b.margin_active);
        assert_eq!(b.margin_term, 0.0);
        assert_eq!(b.total, b.ce);
    }

    #[test]
    fn branch_boundaries() {
        assert_eq!(margin_branch(0.5, 0.25, 0.25, HingeMode::Literal), MarginBranch::Inactive);
        assert_eq!(margin_branch(1.5, 0.25, 0.25, HingeMode::Literal), MarginBranch::Active);
        assert_eq!(margin_branch(-1.0, -2.0, 0.5, HingeMode::Standard), MarginBranch::Inactive);
        assert_eq!(margin_branch(-2.0, -1.0, 0.5, HingeMode::Standard), MarginBranch::Active);
        assert_eq!(margin_branch(-1.0, -1.5, 0.5, HingeMode::Standard), MarginBranch::Inactive);
    }

    #[test]
    fn zero_lambda_gives_plain_cross_entropy() {
        let b = breakdown_from_logprobs(-2.0, &[-5.0], &cfg(0.0, 0.18, HingeMode::Literal)).unwrap();
        assert_eq!(b.total, b.ce);
        assert!(!b.margin_active);
    }

    #[test]
    fn nan_is_rejected_by_name() {
        let c = cfg(0.1, 0.18, HingeMode::Standard);
        assert_eq!(breakdown_from_logprobs(f64::NAN, &[-1.0], &c).unwrap_err(), LossError::NonFinite("pos_logprob"));
        assert_eq!(breakdown_from_logprobs(-1.0, &[f64::NAN], &c).unwrap_err(), LossError::NonFinite("neg_logprob_avg"));
        let bad = cfg(f64::NAN, 0.1, HingeMode::Standard);
        assert_eq!(breakdown_from_logprobs(-1.0, &[-1.0], &bad).unwrap_err(), LossError::NonFinite("lambda"));
    }

    #[test]
    fn uniform_model_cross_entropy() {
        let mut p = ModelParams::init(ModelDims::new(8, 10, 4, 4), 1);
        p.get_mut("out_w").unwrap().fill(0.0);
        p.get_mut("out_b").unwrap().fill(0.0);
        let ce = cross_entropy_nll(&p, &[4, 5], &[6, 7]).unwrap();
        assert!((ce - 3.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_one_hot_model_has_near_zero_cross_entropy() {
        // A large bias on EOS makes the model emit EOS with probability ~1.
        let mut p = ModelParams::init(ModelDims::new(8, 10, 4, 4), 1);
        p.get_mut("out_w").unwrap().fill(0.0);
        p.get_mut("out_b").unwrap().set(0, crate::vocab::EOS as usize, 60.0);
        let ce = cross_entropy_nll(&p, &[4], &[crate::vocab::EOS]).unwrap();
        assert!(ce >= 0.0 && ce < 1e-20, "{ce}");
    }

    #[test]
    fn matches_negated_sequence_log_prob() {
        let p = ModelParams::init(ModelDims::new(8, 10, 4, 4), 3);
        let lp = model::sequence_log_prob(&p, &[4, 6], &[5, 9]).unwrap();
        let ce = cross_entropy_nll(&p, &[4, 6], &[5, 9]).unwrap();
        assert!((ce + lp).abs() < 1e-12);
    }

    #[test]
    fn forced_negative_sample() {
        let corpus: Vec<Vec<TokenId>> = (0..5).map(|i| vec![10 + i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut negs = sample_negatives(&corpus, &[12], 4, &mut rng).unwrap();
        negs.sort();
        assert_eq!(negs, vec![vec![10], vec![11], vec![13], vec![14]]);
    }

    #[test]
    fn small_corpus_is_rejected() {
        let corpus: Vec<Vec<TokenId>> = vec![vec![4], vec![5], vec![5]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            sample_negatives(&corpus, &[4], 2, &mut rng).unwrap_err(),
            LossError::CorpusTooSmall { needed: 3, available: 2 }
        );
    }

    #[test]
    fn seeded_samples_repeat() {
        let corpus: Vec<Vec<TokenId>> = (0..30).map(|i| vec![4 + i % 11, 5]).collect();
        let a = sample_negatives(&corpus, &[4, 5], 4, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = sample_negatives(&corpus, &[4, 5], 4, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_proportional_to_multiplicity() {
        let mut corpus: Vec<Vec<TokenId>> = (0..9).map(|i| vec![10 + i]).collect();
        corpus.extend(std::iter::repeat(vec![99]).take(5));
        let sampler = NegativeSampler::new(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| sampler.sample(&[1], 1, &mut rng).unwrap()[0] == vec![99])
            .count();
        let rate = hits as f64 / draws as f64;
        assert!((rate - 5.0 / 14.0).abs() < 0.01, "{rate}");
    }

    #[test]
    fn triplet_rejects_positive_among_negatives() {
        assert_eq!(
            Triplet::new(vec![4], vec![5], vec![vec![6], vec![5]]).unwrap_err(),
            LossError::NegativeIsPositive(1)
        );
        assert_eq!(Triplet::new(vec![4], vec![5], vec![]).unwrap_err(), LossError::NoNegatives);
    }

    #[test]
    fn graph_and_scalar_paths_agree() {
        let p = ModelParams::init(ModelDims::new(9, 9, 4, 5), 17);
        let t = Triplet::new(vec![4, 5], vec![6], vec![vec![7, 8], vec![5, 5, 5], vec![4]]).unwrap();
        for mode in [HingeMode::Literal, HingeMode::Standard] {
            for gamma in [0.0, 0.18, 3.0] {
                let c = cfg(0.1, gamma, mode);
                let b = ranking_loss(&p, &t, &c).unwrap();
                let pos = model::sequence_log_prob(&p, &t.query, &t.positive).unwrap();
                let negs: Vec<f64> = t
                    .negatives
                    .iter()
                    .map(|n| model::sequence_log_prob(&p, &t.query, n).unwrap())
                    .collect();
                let s = breakdown_from_logprobs(pos, &negs, &c).unwrap();
                assert_eq!(b.margin_active, s.margin_active);
                assert!((b.total - s.total).abs() < 1e-12);
                assert!((b.neg_logprob_avg - s.neg_logprob_avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_negatives_keeps_breakdown() {
        let p = ModelParams::init(ModelDims::new(9, 9, 4, 5), 17);
        let negs = vec![vec![7, 8], vec![5, 5, 5], vec![4]];
        let mut rev = negs.clone();
        rev.reverse();
        let c = cfg(0.3, 0.18, HingeMode::Standard);
        let a = ranking_loss(&p, &Triplet::new(vec![4, 5], vec![6], negs).unwrap(), &c).unwrap();
        let b = ranking_loss(&p, &Triplet::new(vec![4, 5], vec![6], rev).unwrap(), &c).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert_eq!(a.margin_active, b.margin_active);
    }
}
