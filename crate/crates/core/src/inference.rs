//! Beam search and MMI re-ranking.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{self, DecoderState, ModelError, ModelParams};
use crate::vocab::{TokenId, BOS, EOS, PAD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("beam size and max length must be at least 1")]
    InvalidSize,
    #[error("backward model vocabularies ({back_src}, {back_tgt}) do not mirror forward ({fwd_src}, {fwd_tgt})")]
    VocabMismatch {
        fwd_src: usize,
        fwd_tgt: usize,
        back_src: usize,
        back_tgt: usize,
    },
    #[error("n-best list is empty")]
    EmptyNBest,
    #[error("expected {expected} backward scores, got {got}")]
    ScoreCount { expected: usize, got: usize },
    #[error("unknown score kind {0:?}")]
    UnknownScoreKind(String),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

/// A (possibly unfinished) decoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, ending in EOS when finished. Never contains PAD or BOS.
    pub tokens: Vec<TokenId>,
    /// Sum of the chosen step log-probabilities: `log p(y|x)`.
    pub log_prob: f64,
    pub step_log_probs: Vec<f64>,
    /// Value the list is ordered by; equals `log_prob` for raw scoring.
    pub score: f64,
    pub finished: bool,
    pub state: DecoderState,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn body(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Raw,
    LengthNormalized,
    Mmi,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Raw => "raw",
            ScoreKind::LengthNormalized => "length-normalized",
            ScoreKind::Mmi => "mmi",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = InferenceError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ScoreKind::Raw),
            "length-normalized" => Ok(ScoreKind::LengthNormalized),
            "mmi" => Ok(ScoreKind::Mmi),
            other => Err(InferenceError::UnknownScoreKind(other.to_string())),
        }
    }
}

/// Hypotheses ordered finished-first, then by score descending, then by
/// token ids lexicographically.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
    pub score_kind: ScoreKind,
}

fn nbest_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.finished
        .cmp(&a.finished)
        .then_with(|| b.score.total_cmp(&a.score))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

impl NBestList {
    fn sorted(mut hypotheses: Vec<Hypothesis>, score_kind: ScoreKind) -> Self {
        hypotheses.sort_by(nbest_order);
        NBestList { hypotheses, score_kind }
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }

    /// Re-sort by `log_prob / scored length`.
    pub fn length_normalized(&self) -> NBestList {
        let hyps = self
            .hypotheses
            .iter()
            .map(|h| Hypothesis {
                score: h.log_prob / h.tokens.len().max(1) as f64,
                ..h.clone()
            })
            .collect();
        NBestList::sorted(hyps, ScoreKind::LengthNormalized)
    }
}

/// Tokens a decoder may emit.
fn generatable(vocab: usize) -> impl Iterator<Item = TokenId> {
    (0..vocab as TokenId).filter(|&t| t != PAD && t != BOS)
}

/// Beam search. `max_len` bounds the number of generated tokens including
/// EOS. At each step the best `beam - finished` extensions are kept; ties
/// go to the lower token id, then to the earlier parent hypothesis.
pub fn beam_search(params: &ModelParams, x: &[TokenId], beam: usize, max_len: usize) -> Result<NBestList> {
    if beam == 0 || max_len == 0 {
        return Err(InferenceError::InvalidSize);
    }
    let enc = model::encode(params, x)?;
    let vocab = params.dims().tgt_vocab;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        step_log_probs: Vec::new(),
        score: 0.0,
        finished: false,
        state: enc.initial_state.clone(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let slots = beam - finished.len();
        if slots == 0 || live.is_empty() {
            break;
        }
        // (score, token, parent index, step log-prob)
        let mut candidates: Vec<(f64, TokenId, usize, f64)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (parent, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let att = model::attend(params, &hyp.state, &enc)?;
            let (logp, next) = model::decode_step(params, prev, &hyp.state, &att.context)?;
            for tok in generatable(vocab) {
                let lp = logp[tok as usize];
                candidates.push((hyp.log_prob + lp, tok, parent, lp));
            }
            next_states.push(next);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(slots);
        let mut next_live = Vec::with_capacity(candidates.len());
        for (score, tok, parent, lp) in candidates {
            let base = &live[parent];
            let mut tokens = base.tokens.clone();
            tokens.push(tok);
            let mut steps = base.step_log_probs.clone();
            steps.push(lp);
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
                step_log_probs: steps,
                score,
                finished: tok == EOS,
                state: next_states[parent].clone(),
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }

    let mut out = finished;
    if out.len() < beam {
        live.sort_by(nbest_order);
        out.extend(live.into_iter().take(beam - out.len()));
    }
    Ok(NBestList::sorted(out, ScoreKind::Raw))
}

/// Weights for MMI re-ranking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmiConfig {
    pub lambda: f64,
    pub length_weight: f64,
}

impl Default for MmiConfig {
    fn default() -> Self {
        MmiConfig {
            lambda: 0.5,
            length_weight: 0.1,
        }
    }
}

/// `log p(y|x) + λ·log p(x|y) + γ_len·|y|`, `|y|` excluding EOS.
pub fn mmi_score(forward_log_prob: f64, backward_log_prob: f64, body_len: usize, cfg: &MmiConfig) -> f64 {
    forward_log_prob + cfg.lambda * backward_log_prob + cfg.length_weight * body_len as f64
}

/// Re-rank with externally supplied `log p(x|y)` values, one per hypothesis.
pub fn rerank_with_scores(nbest: &NBestList, backward_log_probs: &[f64], cfg: &MmiConfig) -> Result<NBestList> {
    if nbest.is_empty() {
        return Err(InferenceError::EmptyNBest);
    }
    if backward_log_probs.len() != nbest.len() {
        return Err(InferenceError::ScoreCount {
            expected: nbest.len(),
            got: backward_log_probs.len(),
        });
    }
    let hyps = nbest
        .hypotheses
        .iter()
        .zip(backward_log_probs)
        .map(|(h, &b)| Hypothesis {
            score: mmi_score(h.log_prob, b, h.body().len(), cfg),
            ..h.clone()
        })
        .collect();
    Ok(NBestList::sorted(hyps, ScoreKind::Mmi))
}

/// Re-rank using a response-to-query model. An empty body is scored as the
/// one-token source `[EOS]`.
pub fn mmi_rerank(
    nbest: &NBestList,
    x: &[TokenId],
    forward: &ModelParams,
    backward: &ModelParams,
    cfg: &MmiConfig,
) -> Result<NBestList> {
    let (f, b) = (forward.dims(), backward.dims());
    if b.src_vocab != f.tgt_vocab || b.tgt_vocab != f.src_vocab {
        return Err(InferenceError::VocabMismatch {
            fwd_src: f.src_vocab,
            fwd_tgt: f.tgt_vocab,
            back_src: b.src_vocab,
            back_tgt: b.tgt_vocab,
        });
    }
    let scores = nbest
        .hypotheses
        .iter()
        .map(|h| {
            let body = h.body();
            let src: &[TokenId] = if body.is_empty() { &[EOS] } else { body };
            model::sequence_log_prob(backward, src, x)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    rerank_with_scores(nbest, &scores, cfg)
}
