//! Corpus ingestion and statistics.

mod diagnostics;
mod synth;
mod universal;
mod zipf;

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::ModelError;
use crate::vocab::{TokenId, Vocab, UNK};

pub use diagnostics::{jensen_bound_check, mean_word_frequency, reply_tokenize, word_probabilities, JensenCheck, MeanWordFrequency};
pub use synth::{synth_corpus, word_for_rank, SynthSpec, FUNCTION_WORDS};
pub use universal::{detect_universal_replies, UniversalReply};
pub use zipf::{empirical_topt_mass, relative_frequencies, topt_mass, zipf_fit, TopTMass, ZipfFit};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no pairs survived ingestion")]
    NoPairs,
    #[error("zipf fit needs at least {needed} distinct tokens, got {got}")]
    TooFewTokens { needed: usize, got: usize },
    #[error("t = {t} exceeds a tenth of the vocabulary ({vocab} content tokens)")]
    ThresholdTooLarge { t: usize, vocab: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("infeasible synthesis spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// A whitespace-tokenised query/response pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextPair {
    pub query: Vec<String>,
    pub response: Vec<String>,
}

impl TextPair {
    pub fn new(query: &str, response: &str) -> Self {
        TextPair {
            query: query.split_whitespace().map(str::to_string).collect(),
            response: response.split_whitespace().map(str::to_string).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOptions {
    /// Content tokens kept per side; the rest map to UNK. `None` keeps all.
    pub vocab_limit: Option<usize>,
    pub max_query_len: usize,
    pub max_reply_len: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            vocab_limit: None,
            max_query_len: 30,
            max_reply_len: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub pairs: Vec<TextPair>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    /// Pairs dropped for exceeding a maximum length.
    pub dropped_too_long: usize,
    /// Pairs dropped because one side had no tokens.
    pub dropped_empty: usize,
    /// 1-based line numbers of lines without exactly one TAB.
    pub malformed_lines: Vec<usize>,
    pub oov_query: f64,
    pub oov_reply: f64,
}

impl Ingested {
    /// Map every pair to ids.
    pub fn encoded(&self) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
        encode_pairs(&self.pairs, &self.src_vocab, &self.tgt_vocab)
    }
}

pub fn encode_pairs(pairs: &[TextPair], src: &Vocab, tgt: &Vocab) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    pairs.iter().map(|p| (src.encode(&p.query), tgt.encode(&p.response))).collect()
}

/// Share of tokens that map to UNK.
pub fn oov_rate<'a>(sequences: impl IntoIterator<Item = &'a Vec<String>>, vocab: &Vocab) -> f64 {
    let (mut unk, mut total) = (0usize, 0usize);
    for s in sequences {
        for t in s {
            total += 1;
            if vocab.id(t).map_or(true, |id| id == UNK) {
                unk += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unk as f64 / total as f64
    }
}

/// Parse TSV text. Lines starting with `#` are comments; blank lines are
/// ignored.
pub fn ingest_str(text: &str, opts: &IngestOptions) -> Result<Ingested> {
    let mut pairs = Vec::new();
    let mut malformed_lines = Vec::new();
    let (mut dropped_too_long, mut dropped_empty) = (0, 0);
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            log::warn!("line {}: expected one TAB, found {}; skipped", i + 1, fields.len() - 1);
            malformed_lines.push(i + 1);
            continue;
        }
        let pair = TextPair::new(fields[0], fields[1]);
        if pair.query.is_empty() || pair.response.is_empty() {
            dropped_empty += 1;
        } else if pair.query.len() > opts.max_query_len || pair.response.len() > opts.max_reply_len {
            dropped_too_long += 1;
        } else {
            pairs.push(pair);
        }
    }
    if pairs.is_empty() {
        return Err(CorpusError::NoPairs);
    }
    if dropped_too_long > 0 {
        log::info!("dropped {dropped_too_long} pairs over the length limits");
    }
    let src_vocab = Vocab::build(pairs.iter().flat_map(|p| p.query.iter().map(String::as_str)), opts.vocab_limit);
    let tgt_vocab = Vocab::build(pairs.iter().flat_map(|p| p.response.iter().map(String::as_str)), opts.vocab_limit);
    let oov_query = oov_rate(pairs.iter().map(|p| &p.query), &src_vocab);
    let oov_reply = oov_rate(pairs.iter().map(|p| &p.response), &tgt_vocab);
    Ok(Ingested {
        pairs,
        src_vocab,
        tgt_vocab,
        dropped_too_long,
        dropped_empty,
        malformed_lines,
        oov_query,
        oov_reply,
    })
}

pub fn ingest(path: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ingest_str(&text, opts)
}

/// Render pairs as `query TAB response` lines.
pub fn to_tsv(pairs: &[TextPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let _ = writeln!(out, "{}\t{}", p.query.join(" "), p.response.join(" "));
    }
    out
}

/// Dataset statistics in the shape of a corpus summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub pairs: usize,
    pub unique_queries: usize,
    pub unique_replies: usize,
    /// Shares of distinct queries with one, two, and more than two pairs.
    pub multi_reply_shares: [f64; 3],
    pub oov_query: f64,
    pub oov_reply: f64,
    /// Pairs per distinct query.
    pub mean_replies_per_query: f64,
    /// Pairs per distinct reply.
    pub mean_response_frequency: f64,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// Fit on reply-side relative word frequencies; `None` with fewer than
    /// ten distinct reply words.
    pub zipf: Option<ZipfFit>,
}

impl CorpusStats {
    /// Queries and replies are grouped by exact token match. OOV rates are
    /// measured against the given vocabularies (zero when absent).
    pub fn compute(pairs: &[TextPair], src: Option<&Vocab>, tgt: Option<&Vocab>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CorpusError::NoPairs);
        }
        let mut per_query: HashMap<&[String], usize> = HashMap::new();
        let mut replies: HashSet<&[String]> = HashSet::new();
        let mut word_counts: HashMap<&str, u64> = HashMap::new();
        for p in pairs {
            *per_query.entry(&p.query).or_insert(0) += 1;
            replies.insert(&p.response);
            for w in &p.response {
                *word_counts.entry(w).or_insert(0) += 1;
            }
        }
        let q = per_query.len();
        let mut hist = [0usize; 3];
        for &n in per_query.values() {
            hist[(n.min(3)) - 1] += 1;
        }
        let shares = hist.map(|h| h as f64 / q as f64);
        let freqs = relative_frequencies(word_counts.values().copied());
        let zipf = if freqs.len() >= zipf::MIN_TYPES { Some(zipf_fit(&freqs)?) } else { None };
        Ok(CorpusStats {
            pairs: pairs.len(),
            unique_queries: q,
            unique_replies: replies.len(),
            multi_reply_shares: shares,
            oov_query: src.map_or(0.0, |v| oov_rate(pairs.iter().map(|p| &p.query), v)),
            oov_reply: tgt.map_or(0.0, |v| oov_rate(pairs.iter().map(|p| &p.response), v)),
            mean_replies_per_query: pairs.len() as f64 / q as f64,
            mean_response_frequency: pairs.len() as f64 / replies.len() as f64,
            src_vocab_size: src.map_or(0, Vocab::content_len),
            tgt_vocab_size: tgt.map_or(0, Vocab::content_len),
            zipf,
        })
    }

    /// Summary rows: QA Pairs, Unique Replies, Multi Replies (%), OOV (%),
    /// Vocab Size, then the remaining statistics.
    pub fn to_text(&self) -> String {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let mut s = String::new();
        let _ = writeln!(s, "QA Pairs: {}", self.pairs);
        let _ = writeln!(s, "Unique Replies: {}", self.unique_replies);
        let _ = writeln!(
            s,
            "Multi Replies (%): {}/{}/{}",
            pct(self.multi_reply_shares[0]),
            pct(self.multi_reply_shares[1]),
            pct(self.multi_reply_shares[2])
        );
        let _ = writeln!(s, "OOV (%): {}/{}", pct(self.oov_query), pct(self.oov_reply));
        let _ = writeln!(s, "Vocab Size: {}/{}", self.src_vocab_size, self.tgt_vocab_size);
        let _ = writeln!(s, "Unique Queries: {}", self.unique_queries);
        let _ = writeln!(s, "Mean Replies Per Query: {:.6}", self.mean_replies_per_query);
        let _ = writeln!(s, "Mean Response Frequency: {:.6}", self.mean_response_frequency);
        match &self.zipf {
            Some(z) => {
                let _ = writeln!(s, "Zipf C: {:.6}", z.c);
                let _ = writeln!(s, "Zipf alpha: {:.6}", z.alpha);
                let _ = writeln!(s, "Zipf residual: {:.6}", z.residual);
            }
            None => {
                let _ = writeln!(s, "Zipf: n/a");
            }
        }
        s
    }
}
