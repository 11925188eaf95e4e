//! Subcommand implementations. Every artifact is written atomically, and
//! text artifacts start with the run's provenance header.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rankreg::checkpoint::{load_checkpoint, write_atomic, Checkpoint};
use rankreg::corpus::{
    detect_universal_replies, encode_pairs, ingest, synth_corpus, to_tsv, CorpusError, CorpusStats, IngestOptions, Ingested, TextPair,
};
use rankreg::inference::{beam_search, mmi_rerank};
use rankreg::lemma::{lemma_report, parse_universe};
use rankreg::metrics::{perplexity, MetricReport};
use rankreg::model::ModelDims;
use rankreg::trainer::{derived_rng, init_training, train, Stream};

use crate::config::{Command, RunConfig};

/// Run the configured subcommand; returns the artifacts written.
pub fn dispatch(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match cfg.command {
        Command::Train => run_train(cfg),
        Command::Generate => run_generate(cfg),
        Command::Evaluate => run_evaluate(cfg),
        Command::Analyze => run_analyze(cfg),
        Command::Synth => run_synth(cfg),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("{flag} is required"))
}

fn ingest_opts(cfg: &RunConfig, vocab_limit: Option<usize>) -> IngestOptions {
    IngestOptions {
        vocab_limit,
        max_query_len: cfg.train.max_query_len,
        max_reply_len: cfg.train.max_reply_len,
    }
}

fn read_corpus(cfg: &RunConfig, vocab_limit: Option<usize>) -> Result<Ingested> {
    let path = require(&cfg.corpus, "--corpus")?;
    ingest(path, &ingest_opts(cfg, vocab_limit)).with_context(|| format!("reading corpus {}", path.display()))
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Stage every artifact in memory first so a failure writes nothing.
struct Outputs {
    dir: PathBuf,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn new(cfg: &RunConfig) -> Self {
        Outputs {
            dir: cfg.out.clone(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((self.dir.join(name), bytes));
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let mut written = Vec::new();
        for (path, bytes) in self.files {
            write_atomic(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn run_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corpus = read_corpus(cfg, cfg.vocab_limit)?;
    let (mut src_vocab, mut tgt_vocab) = (corpus.src_vocab.clone(), corpus.tgt_vocab.clone());
    let mut pairs = corpus.pairs;
    if cfg.reverse {
        for p in &mut pairs {
            std::mem::swap(&mut p.query, &mut p.response);
        }
        std::mem::swap(&mut src_vocab, &mut tgt_vocab);
    }

    let (mut params, mut state, first_epoch) = match &cfg.checkpoint {
        Some(path) => {
            let ck = load(path)?;
            let dims = ck.params.dims();
            if (dims.embed, dims.hidden) != (cfg.train.embed, cfg.train.hidden) {
                bail!(
                    "checkpoint has embed {} and hidden {}, config asks for {} and {}",
                    dims.embed,
                    dims.hidden,
                    cfg.train.embed,
                    cfg.train.hidden
                );
            }
            src_vocab = ck.src_vocab;
            tgt_vocab = ck.tgt_vocab;
            (ck.params, ck.optimizer, ck.epoch + 1)
        }
        None => {
            let dims = ModelDims::new(src_vocab.len(), tgt_vocab.len(), cfg.train.embed, cfg.train.hidden);
            let (p, s) = init_training(dims, &cfg.train);
            (p, s, 1)
        }
    };

    let encoded = encode_pairs(&pairs, &src_vocab, &tgt_vocab);
    let reports = train(&encoded, &mut params, &mut state, &cfg.train, first_epoch, |_, _, _| {})?;

    let header = cfg.header();
    let mut curve = header.clone();
    curve.push_str("# epoch\tmean_ce\tmean_margin\tactive_fraction\n");
    let mut timing = header;
    timing.push_str("# epoch\twall_seconds\n");
    for r in &reports {
        let _ = writeln!(curve, "{}\t{:.9}\t{:.9}\t{:.9}", r.epoch, r.mean_ce, r.mean_margin, r.active_fraction);
        let _ = writeln!(timing, "{}\t{:.3}", r.epoch, r.wall_seconds);
    }
    let ck = Checkpoint {
        params,
        optimizer: state,
        config: cfg.train.clone(),
        src_vocab,
        tgt_vocab,
        epoch: first_epoch - 1 + reports.len() as u64,
    };
    let stem = if cfg.reverse { "backward" } else { "model" };
    let mut out = Outputs::new(cfg);
    out.add(&format!("{stem}.ckpt"), rankreg::checkpoint::to_bytes(&ck));
    out.add(&format!("{stem}.curve.tsv"), curve.into_bytes());
    out.add(&format!("{stem}.timing.tsv"), timing.into_bytes());
    out.commit()
}

/// Distinct queries in first-seen order.
fn unique_queries(pairs: &[TextPair]) -> Vec<&[String]> {
    let mut seen = std::collections::HashSet::new();
    pairs.iter().map(|p| p.query.as_slice()).filter(|q| seen.insert(*q)).collect()
}

fn run_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ck = load(require(&cfg.checkpoint, "--checkpoint")?)?;
    let backward = if cfg.mmi {
        let b = load(require(&cfg.backward_checkpoint, "--backward-checkpoint (needed by --mmi)")?)?;
        if b.src_vocab != ck.tgt_vocab || b.tgt_vocab != ck.src_vocab {
            bail!("backward checkpoint vocabularies do not mirror the forward model's");
        }
        Some(b)
    } else {
        None
    };
    let corpus = read_corpus(cfg, None)?;
    let mut text = cfg.header();
    text.push_str("# query\trank\tscore\ttokens\n");
    for q in unique_queries(&corpus.pairs) {
        let x = ck.src_vocab.encode(q);
        let mut nbest = beam_search(&ck.params, &x, cfg.train.beam, cfg.train.max_reply_len)?;
        if let Some(b) = &backward {
            nbest = mmi_rerank(&nbest, &x, &ck.params, &b.params, &cfg.mmi_config)?;
        }
        let query = q.join(" ");
        for (rank, h) in nbest.hypotheses.iter().enumerate() {
            let _ = writeln!(text, "{query}\t{}\t{:.6}\t{}", rank + 1, h.score, ck.tgt_vocab.decode(&h.tokens).join(" "));
        }
    }
    let mut out = Outputs::new(cfg);
    out.add("generations.tsv", text.into_bytes());
    out.commit()
}

/// Hypotheses per query, best first, in first-seen query order.
pub fn parse_generations(text: &str) -> Result<Vec<(String, Vec<Vec<String>>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, Vec<String>)>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            bail!("generation line {}: expected 4 TAB-separated fields, found {}", i + 1, fields.len());
        }
        let rank: usize = fields[1]
            .parse()
            .with_context(|| format!("generation line {}: bad rank {:?}", i + 1, fields[1]))?;
        let query = fields[0].split_whitespace().collect::<Vec<_>>().join(" ");
        if !groups.contains_key(&query) {
            order.push(query.clone());
        }
        groups
            .entry(query)
            .or_default()
            .push((rank, fields[3].split_whitespace().map(str::to_string).collect()));
    }
    if order.is_empty() {
        bail!("generation file has no hypotheses");
    }
    Ok(order
        .into_iter()
        .map(|q| {
            let mut hyps = groups.remove(&q).unwrap_or_default();
            hyps.sort_by_key(|h| h.0);
            (q, hyps.into_iter().map(|h| h.1).collect())
        })
        .collect())
}

fn run_evaluate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ck = load(require(&cfg.checkpoint, "--checkpoint")?)?;
    let gen_path = cfg.generations.clone().unwrap_or_else(|| cfg.out.join("generations.tsv"));
    let gen_text = std::fs::read_to_string(&gen_path).with_context(|| format!("reading generations {}", gen_path.display()))?;
    let generated = parse_generations(&gen_text).with_context(|| format!("parsing {}", gen_path.display()))?;
    let corpus = read_corpus(cfg, None)?;

    let mut references: HashMap<String, Vec<Vec<String>>> = HashMap::new();
    for p in &corpus.pairs {
        references.entry(p.query.join(" ")).or_default().push(p.response.clone());
    }
    let refs = generated
        .iter()
        .map(|(q, _)| references.get(q).cloned().with_context(|| format!("query {q:?} has no reference in the corpus")))
        .collect::<Result<Vec<_>>>()?;
    let hyps: Vec<Vec<Vec<String>>> = generated.into_iter().map(|(_, h)| h).collect();

    let ppl = perplexity(&ck.params, &encode_pairs(&corpus.pairs, &ck.src_vocab, &ck.tgt_vocab))?;
    let report = MetricReport::compute(ppl, &hyps, &refs, cfg.distinct_scope)?;

    let mut text = cfg.header();
    text.push_str(&report.to_text());
    let mut json = report.to_json();
    json["run"] = serde_json::Value::Object(
        cfg.entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
            .chain([
                ("version".to_string(), crate::config::VERSION.into()),
                ("command".to_string(), cfg.command.to_string().into()),
            ])
            .collect(),
    );
    let mut out = Outputs::new(cfg);
    out.add("metrics.txt", text.into_bytes());
    out.add("metrics.json", format!("{}\n", serde_json::to_string_pretty(&json)?).into_bytes());
    out.commit()
}

fn run_analyze(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corpus = read_corpus(cfg, cfg.vocab_limit)?;
    let stats = CorpusStats::compute(&corpus.pairs, Some(&corpus.src_vocab), Some(&corpus.tgt_vocab))?;
    let mut text = cfg.header();
    text.push_str(&stats.to_text());
    let _ = writeln!(text, "Dropped Too Long: {}", corpus.dropped_too_long);
    let _ = writeln!(text, "Malformed Lines: {}", corpus.malformed_lines.len());

    let t = cfg.t.unwrap_or_else(|| (corpus.tgt_vocab.content_len() / 100).max(1));
    let _ = writeln!(text, "Universal t: {t}");
    let _ = writeln!(text, "Universal min_query_share: {}", cfg.min_query_share);
    match detect_universal_replies(&corpus.encoded(), &corpus.tgt_vocab, t, cfg.min_query_share) {
        Ok(flagged) => {
            let _ = writeln!(text, "Universal Replies: {}", flagged.len());
            for u in flagged {
                let _ = writeln!(text, "universal\t{}\tM = {}\tM/N = {:.6}", corpus.tgt_vocab.decode(&u.reply).join(" "), u.queries, u.share);
            }
        }
        // The default cutoff can be too large for a tiny vocabulary; report
        // that instead of failing the whole analysis.
        Err(e @ CorpusError::ThresholdTooLarge { .. }) if cfg.t.is_none() => {
            let _ = writeln!(text, "Universal Replies: skipped ({e})");
        }
        Err(e) => return Err(e.into()),
    }

    if let Some(path) = &cfg.lemma_universe {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading lemma universe {}", path.display()))?;
        let universe = parse_universe(&raw).with_context(|| format!("parsing lemma universe {}", path.display()))?;
        let mut rng = derived_rng(cfg.train.seed, Stream::Analysis, 0, 0);
        text.push_str("Lemma Report:\n");
        text.push_str(&lemma_report(&universe, &mut rng));
    }
    let mut out = Outputs::new(cfg);
    out.add("analysis.txt", text.into_bytes());
    out.commit()
}

fn run_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut rng = derived_rng(cfg.train.seed, Stream::Synth, 0, 0);
    let pairs = synth_corpus(&cfg.synth, &mut rng)?;
    let mut text = cfg.header();
    text.push_str(&to_tsv(&pairs));
    let mut out = Outputs::new(cfg);
    out.add("corpus.tsv", text.into_bytes());
    out.commit()
}
