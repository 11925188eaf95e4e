//! Command-line and config-file parsing into a resolved [`RunConfig`].

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rankreg::corpus::SynthSpec;
use rankreg::inference::MmiConfig;
use rankreg::metrics::DistinctScope;
use rankreg::trainer::{TrainConfig, CONFIG_KEYS};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Generate,
    Evaluate,
    Analyze,
    Synth,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Train => "train",
            Command::Generate => "generate",
            Command::Evaluate => "evaluate",
            Command::Analyze => "analyze",
            Command::Synth => "synth",
        })
    }
}

#[derive(Parser, Debug)]
#[command(name = "rankreg", version, about = "Train, decode, evaluate and analyze seq2seq dialogue models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Train a model; writes a checkpoint and a learning curve.
    Train(Flags),
    /// Beam-search replies for every distinct query of a corpus.
    Generate(Flags),
    /// Score a generation file against a reference corpus.
    Evaluate(Flags),
    /// Corpus statistics, universal replies, and an optional lemma report.
    Analyze(Flags),
    /// Write a synthetic corpus with planted universal replies.
    Synth(Flags),
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// key = value file; command-line flags take precedence over it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    corpus: Option<String>,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<String>,
    /// Response-to-query model used by --mmi.
    #[arg(long, value_name = "PATH")]
    backward_checkpoint: Option<String>,
    /// Generation file read by evaluate (default OUT/generations.tsv).
    #[arg(long, value_name = "PATH")]
    generations: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    #[arg(long, value_name = "PATH")]
    lemma_universe: Option<String>,
    #[arg(long, value_name = "R")]
    lambda: Option<String>,
    #[arg(long, value_name = "R")]
    gamma: Option<String>,
    #[arg(long, value_name = "R")]
    lr: Option<String>,
    #[arg(long, value_name = "N")]
    batch: Option<String>,
    #[arg(long, value_name = "N")]
    epochs: Option<String>,
    #[arg(long, value_name = "N")]
    embed: Option<String>,
    #[arg(long, value_name = "N")]
    hidden: Option<String>,
    #[arg(long, value_name = "N")]
    beam: Option<String>,
    #[arg(long, value_name = "N")]
    negatives: Option<String>,
    #[arg(long, value_name = "literal|standard")]
    hinge_mode: Option<String>,
    #[arg(long, value_name = "N")]
    seed: Option<String>,
    #[arg(long, value_name = "R")]
    clip_norm: Option<String>,
    #[arg(long, value_name = "N")]
    max_query_len: Option<String>,
    #[arg(long, value_name = "N")]
    max_reply_len: Option<String>,
    /// Content words kept per side; the rest map to <unk>.
    #[arg(long, value_name = "N")]
    vocab_limit: Option<String>,
    /// Average the loss terms per token instead of summing.
    #[arg(long)]
    per_token_mean: bool,
    /// Train on swapped pairs (a response-to-query model for --mmi).
    #[arg(long)]
    reverse: bool,
    /// Re-rank the N-best lists with a backward model.
    #[arg(long)]
    mmi: bool,
    #[arg(long, value_name = "R")]
    mmi_lambda: Option<String>,
    #[arg(long, value_name = "R")]
    mmi_gamma_len: Option<String>,
    #[arg(long, value_name = "top1|all")]
    distinct_scope: Option<String>,
    /// Rank cutoff for universal replies (default: reply vocab / 100).
    #[arg(long = "t", value_name = "N")]
    t: Option<String>,
    #[arg(long, value_name = "R")]
    min_query_share: Option<String>,
    #[arg(long, value_name = "N")]
    synth_queries: Option<String>,
    #[arg(long, value_name = "N")]
    synth_replies_per_query: Option<String>,
    #[arg(long, value_name = "N")]
    synth_vocab: Option<String>,
    #[arg(long, value_name = "R")]
    synth_alpha: Option<String>,
    #[arg(long, value_name = "R")]
    synth_fidelity: Option<String>,
    #[arg(long, value_name = "MIN..MAX")]
    synth_query_len: Option<String>,
    #[arg(long, value_name = "MIN..MAX")]
    synth_reply_len: Option<String>,
    /// Planted replies as `text:share,text:share`.
    #[arg(long, value_name = "LIST")]
    synth_universal: Option<String>,
}

impl Flags {
    /// `(config key, flag, value)` for every flag that was given.
    fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let valued = [
            ("corpus", "--corpus", &self.corpus),
            ("checkpoint", "--checkpoint", &self.checkpoint),
            ("backward_checkpoint", "--backward-checkpoint", &self.backward_checkpoint),
            ("generations", "--generations", &self.generations),
            ("out", "--out", &self.out),
            ("lemma_universe", "--lemma-universe", &self.lemma_universe),
            ("lambda", "--lambda", &self.lambda),
            ("gamma", "--gamma", &self.gamma),
            ("lr", "--lr", &self.lr),
            ("batch_size", "--batch", &self.batch),
            ("epochs", "--epochs", &self.epochs),
            ("embed", "--embed", &self.embed),
            ("hidden", "--hidden", &self.hidden),
            ("beam", "--beam", &self.beam),
            ("negatives_per_positive", "--negatives", &self.negatives),
            ("hinge_mode", "--hinge-mode", &self.hinge_mode),
            ("seed", "--seed", &self.seed),
            ("clip_norm", "--clip-norm", &self.clip_norm),
            ("max_query_len", "--max-query-len", &self.max_query_len),
            ("max_reply_len", "--max-reply-len", &self.max_reply_len),
            ("vocab_limit", "--vocab-limit", &self.vocab_limit),
            ("mmi_lambda", "--mmi-lambda", &self.mmi_lambda),
            ("mmi_gamma_len", "--mmi-gamma-len", &self.mmi_gamma_len),
            ("distinct_scope", "--distinct-scope", &self.distinct_scope),
            ("t", "--t", &self.t),
            ("min_query_share", "--min-query-share", &self.min_query_share),
            ("synth_queries", "--synth-queries", &self.synth_queries),
            ("synth_replies_per_query", "--synth-replies-per-query", &self.synth_replies_per_query),
            ("synth_vocab", "--synth-vocab", &self.synth_vocab),
            ("synth_alpha", "--synth-alpha", &self.synth_alpha),
            ("synth_fidelity", "--synth-fidelity", &self.synth_fidelity),
            ("synth_query_len", "--synth-query-len", &self.synth_query_len),
            ("synth_reply_len", "--synth-reply-len", &self.synth_reply_len),
            ("synth_universal", "--synth-universal", &self.synth_universal),
        ];
        let switches = [
            ("per_token_mean", "--per-token-mean", self.per_token_mean),
            ("reverse", "--reverse", self.reverse),
            ("mmi", "--mmi", self.mmi),
        ];
        valued
            .into_iter()
            .filter_map(|(k, f, v)| v.clone().map(|v| (k, f, v)))
            .chain(switches.into_iter().filter(|s| s.2).map(|(k, f, _)| (k, f, "true".to_string())))
            .collect()
    }
}

#[derive(Debug)]
pub enum ParseError {
    /// Malformed command line; clap renders usage and picks the exit code.
    Clap(clap::Error),
    /// A bad key or value, naming the offending token.
    Config(String),
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Clap(e) => write!(f, "{e}"),
            ParseError::Config(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for ParseError {}

/// Keys beyond the training hyperparameters, in header order.
pub const RUN_KEYS: [&str; 22] = [
    "corpus",
    "checkpoint",
    "backward_checkpoint",
    "generations",
    "out",
    "lemma_universe",
    "vocab_limit",
    "reverse",
    "mmi",
    "mmi_lambda",
    "mmi_gamma_len",
    "distinct_scope",
    "t",
    "min_query_share",
    "synth_queries",
    "synth_replies_per_query",
    "synth_vocab",
    "synth_alpha",
    "synth_fidelity",
    "synth_query_len",
    "synth_reply_len",
    "synth_universal",
];

/// Everything one invocation needs, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub backward_checkpoint: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub out: PathBuf,
    pub lemma_universe: Option<PathBuf>,
    pub train: TrainConfig,
    pub vocab_limit: Option<usize>,
    pub reverse: bool,
    pub mmi: bool,
    pub mmi_config: MmiConfig,
    pub distinct_scope: DistinctScope,
    /// `None` means reply vocabulary / 100.
    pub t: Option<usize>,
    pub min_query_share: f64,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            corpus: None,
            checkpoint: None,
            backward_checkpoint: None,
            generations: None,
            out: PathBuf::from("out"),
            lemma_universe: None,
            train: TrainConfig::default(),
            vocab_limit: None,
            reverse: false,
            mmi: false,
            mmi_config: MmiConfig::default(),
            distinct_scope: DistinctScope::Top1,
            t: None,
            min_query_share: 0.005,
            synth: SynthSpec::default(),
        }
    }

    /// Set one key from text. `version` and `command` are accepted so that an
    /// artifact header can be fed back in as a config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value {v:?} for {key}"))
        }
        fn path(v: &str) -> Option<PathBuf> {
            (!v.is_empty()).then(|| PathBuf::from(v))
        }
        fn opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, String> {
            if v.is_empty() {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        if CONFIG_KEYS.contains(&key) {
            return self.train.set(key, value).map_err(|e| e.to_string());
        }
        match key {
            "version" => {
                if value != VERSION {
                    log::warn!("config written by version {value}, running {VERSION}");
                }
            }
            "command" => {
                if value != self.command.to_string() {
                    return Err(format!("config is for command {value:?}, not {:?}", self.command.to_string()));
                }
            }
            "corpus" => self.corpus = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "backward_checkpoint" => self.backward_checkpoint = path(value),
            "generations" => self.generations = path(value),
            "out" => self.out = path(value).ok_or("out must not be empty")?,
            "lemma_universe" => self.lemma_universe = path(value),
            "vocab_limit" => self.vocab_limit = opt(key, value)?,
            "reverse" => self.reverse = num(key, value)?,
            "mmi" => self.mmi = num(key, value)?,
            "mmi_lambda" => self.mmi_config.lambda = num(key, value)?,
            "mmi_gamma_len" => self.mmi_config.length_weight = num(key, value)?,
            "distinct_scope" => self.distinct_scope = value.parse().map_err(|e: rankreg::metrics::MetricError| e.to_string())?,
            "t" => self.t = opt(key, value)?,
            "min_query_share" => self.min_query_share = num(key, value)?,
            "synth_queries" => self.synth.queries = num(key, value)?,
            "synth_replies_per_query" => self.synth.replies_per_query = num(key, value)?,
            "synth_vocab" => self.synth.vocab_size = num(key, value)?,
            "synth_alpha" => self.synth.zipf_alpha = num(key, value)?,
            "synth_fidelity" => self.synth.fidelity = num(key, value)?,
            "synth_query_len" => self.synth.query_len = parse_range(key, value)?,
            "synth_reply_len" => self.synth.reply_len = parse_range(key, value)?,
            "synth_universal" => self.synth.universal = parse_planted(value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Every key with its resolved value; unset paths are empty strings.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = self.train.entries();
        let run = [
            p(&self.corpus),
            p(&self.checkpoint),
            p(&self.backward_checkpoint),
            p(&self.generations),
            self.out.display().to_string(),
            p(&self.lemma_universe),
            self.vocab_limit.map(|v| v.to_string()).unwrap_or_default(),
            self.reverse.to_string(),
            self.mmi.to_string(),
            self.mmi_config.lambda.to_string(),
            self.mmi_config.length_weight.to_string(),
            self.distinct_scope.name().to_string(),
            self.t.map(|v| v.to_string()).unwrap_or_default(),
            self.min_query_share.to_string(),
            self.synth.queries.to_string(),
            self.synth.replies_per_query.to_string(),
            self.synth.vocab_size.to_string(),
            self.synth.zipf_alpha.to_string(),
            self.synth.fidelity.to_string(),
            format!("{}..{}", self.synth.query_len.0, self.synth.query_len.1),
            format!("{}..{}", self.synth.reply_len.0, self.synth.reply_len.1),
            self.synth.universal.iter().map(|(t, s)| format!("{t}:{s}")).collect::<Vec<_>>().join(","),
        ];
        out.extend(RUN_KEYS.iter().copied().zip(run));
        out
    }

    /// Provenance block written at the top of every text artifact.
    pub fn header(&self) -> String {
        let mut s = format!("#: version = {VERSION}\n#: command = {}\n", self.command);
        for (k, v) in self.entries() {
            s.push_str(&format!("#: {k} = {v}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&self.min_query_share) {
            return Err(format!("min_query_share must lie in [0, 1], got {}", self.min_query_share));
        }
        if self.t == Some(0) {
            return Err("t must be at least 1".into());
        }
        if !self.mmi_config.lambda.is_finite() || !self.mmi_config.length_weight.is_finite() {
            return Err("MMI weights must be finite".into());
        }
        Ok(())
    }
}

fn parse_range(key: &str, v: &str) -> Result<(usize, usize), String> {
    let bad = || format!("invalid value {v:?} for {key}; expected MIN..MAX");
    let (a, b) = v.split_once("..").ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_planted(v: &str) -> Result<Vec<(String, f64)>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (text, share) = item
                .rsplit_once(':')
                .ok_or_else(|| format!("invalid planted reply {item:?}; expected text:share"))?;
            let share = share.trim().parse().map_err(|_| format!("invalid share in {item:?}"))?;
            Ok((text.split_whitespace().collect::<Vec<_>>().join(" "), share))
        })
        .collect()
}

/// `key = value` lines. `#:` lines (artifact headers) are read as entries,
/// other `#` lines are comments.
pub fn parse_config_text(text: &str, cfg: &mut RunConfig) -> Result<(), String> {
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.strip_prefix("#:") {
            Some(rest) => rest,
            None if raw.trim_start().starts_with('#') => continue,
            None => raw,
        };
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value, got {raw:?}", i + 1))?;
        cfg.set(k.trim(), v).map_err(|e| format!("config line {}: {e}", i + 1))?;
    }
    Ok(())
}

pub fn parse_config_file(path: &Path, cfg: &mut RunConfig) -> Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_config_text(&text, cfg)
}

/// Defaults, then the config file, then command-line flags.
pub fn parse_config<I, T>(argv: I) -> Result<RunConfig, ParseError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(ParseError::Clap)?;
    let (command, flags) = match cli.command {
        Sub::Train(f) => (Command::Train, f),
        Sub::Generate(f) => (Command::Generate, f),
        Sub::Evaluate(f) => (Command::Evaluate, f),
        Sub::Analyze(f) => (Command::Analyze, f),
        Sub::Synth(f) => (Command::Synth, f),
    };
    let mut cfg = RunConfig::new(command);
    if let Some(path) = &flags.config {
        parse_config_file(path, &mut cfg).map_err(ParseError::Config)?;
    }
    for (key, flag, value) in flags.entries() {
        cfg.set(key, &value).map_err(|e| ParseError::Config(format!("{flag}: {e}")))?;
    }
    cfg.validate().map_err(ParseError::Config)?;
    Ok(cfg)
}
