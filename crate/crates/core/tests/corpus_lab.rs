use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankreg::corpus::{
    detect_universal_replies, ingest, ingest_str, jensen_bound_check, mean_word_frequency, relative_frequencies, synth_corpus, reply_tokenize, topt_mass, zipf_fit,
    CorpusStats, IngestOptions, SynthSpec, TextPair,
};
use rankreg::model::{ModelDims, ModelParams};
use rankreg::vocab::{TokenId, Vocab, UNK};

#[test]
fn ingest_reads_pairs_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tsv");
    let long: Vec<String> = (0..31).map(|i| format!("q{i}")).collect();
    std::fs::write(&path, format!("hello there\thi\n{}\tx\nno tab here\n", long.join(" "))).unwrap();
    let got = ingest(&path, &IngestOptions::default()).unwrap();
    assert_eq!(got.pairs, vec![TextPair::new("hello there", "hi")]);
    assert_eq!(got.dropped_too_long, 1);
    assert_eq!(got.malformed_lines, vec![3]);
    assert!(ingest(&dir.path().join("missing.tsv"), &IngestOptions::default()).is_err());
}

#[test]
fn vocab_limit_oov_share() {
    // Reply tokens: a a a b -> with one content slot b becomes UNK, 1 of 4.
    let text = "q\ta a\nq\ta b\n";
    let got = ingest_str(
        text,
        &IngestOptions {
            vocab_limit: Some(1),
            ..IngestOptions::default()
        },
    )
    .unwrap();
    assert_eq!(got.tgt_vocab.id("b"), None);
    assert_eq!(got.encoded()[1].1, vec![got.tgt_vocab.id("a").unwrap(), UNK]);
    assert_eq!(got.oov_reply, 0.25);
}

#[test]
fn stats_examples() {
    let pairs = vec![
        TextPair::new("a", "1"),
        TextPair::new("b", "2"),
        TextPair::new("b", "3"),
        TextPair::new("c", "4"),
        TextPair::new("c", "5"),
        TextPair::new("c", "6"),
    ];
    let s = CorpusStats::compute(&pairs, None, None).unwrap();
    for share in s.multi_reply_shares {
        assert!((share - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(s.mean_replies_per_query, 2.0);

    let dup = vec![TextPair::new("x", "y"); 5];
    let s = CorpusStats::compute(&dup, None, None).unwrap();
    assert_eq!(s.unique_replies, 1);
    assert_eq!(s.mean_response_frequency, 5.0);
}

/// Head counts `0.1·T/i` for ranks 1..=10 (`T = 25200·scale`, so every count is
/// an integer) plus filler types strictly below the tenth head count.
fn exact_zipf_counts(scale: u64) -> Vec<u64> {
    let total = 25_200 * scale;
    let mut counts: Vec<u64> = (1..=10).map(|i| total / 10 / i).collect();
    let floor = counts[9] - 1;
    let mut rest = total - counts.iter().sum::<u64>();
    while rest > 0 {
        let c = rest.min(floor);
        counts.push(c);
        rest -= c;
    }
    counts
}

#[test]
fn exact_zipf_corpus_fit() {
    for scale in [1, 3, 10] {
        let counts = exact_zipf_counts(scale);
        assert_eq!(counts.iter().sum::<u64>(), 25_200 * scale);
        let freqs = relative_frequencies(counts);
        for (i, f) in freqs.iter().take(10).enumerate() {
            assert!((f - 0.1 / (i + 1) as f64).abs() < 1e-15);
        }
        let z = zipf_fit(&freqs[..10]).unwrap();
        assert!((z.c - 0.1).abs() <= 1e-6, "C = {}", z.c);
        assert!((z.alpha - 1.0).abs() <= 1e-6, "alpha = {}", z.alpha);
    }
}

#[test]
fn exact_zipf_mass_exceeds_bound() {
    let freqs: Vec<f64> = (1..=5000).map(|i| 0.1 / i as f64).collect();
    for t in 1..=5000 {
        let m = topt_mass(t, 0.1, 1.0).unwrap();
        let empirical: f64 = freqs[..t].iter().sum();
        assert!(empirical >= m.bound, "t = {t}");
    }
}

#[test]
fn six_reply_mean_frequency() {
    let replies = [
        "I love this film so much.",
        "Me too, it is a beautiful film.",
        "This movie has beautiful background art.",
        "Fritz is really a good director, I like his film.",
        "Is \"Metropolis\" based on a book?",
        "Brigitte cooling off on the set of Metropolis.",
    ];
    let toks: Vec<Vec<String>> = replies.iter().map(|r| reply_tokenize(r)).collect();
    let m = mean_word_frequency(&toks).unwrap();
    assert!((m.mean - 1.32).abs() <= 0.05, "{}", m.mean);
    assert_eq!(m.ratio, m.mean / 6.0);
}

#[test]
fn fixed_length_ratio_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 1..=6 {
        let replies: Vec<Vec<u8>> = (0..k).map(|_| (0..5).map(|_| rng.gen_range(0..8)).collect()).collect();
        let m = mean_word_frequency(&replies).unwrap();
        assert!(!m.approximate);
        let types = replies.iter().flatten().collect::<std::collections::HashSet<_>>().len();
        assert_eq!(m.ratio, (5 * k) as f64 / types as f64 / k as f64);
    }
}

fn encode(pairs: &[TextPair]) -> (Vec<(Vec<TokenId>, Vec<TokenId>)>, Vocab) {
    let src = Vocab::build(pairs.iter().flat_map(|p| p.query.iter().map(String::as_str)), None);
    let tgt = Vocab::build(pairs.iter().flat_map(|p| p.response.iter().map(String::as_str)), None);
    (rankreg::corpus::encode_pairs(pairs, &src, &tgt), tgt)
}

#[test]
fn planted_reply_is_flagged() {
    let spec = SynthSpec {
        queries: 2000,
        vocab_size: 1500,
        universal: vec![("i dont know".into(), 0.3)],
        ..SynthSpec::default()
    };
    let pairs = synth_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let (encoded, tgt) = encode(&pairs);
    assert!(tgt.content_len() >= 500, "{}", tgt.content_len());
    let flagged = detect_universal_replies(&encoded, &tgt, 50, 0.01).unwrap();
    let want = tgt.encode(&["i", "dont", "know"]);
    let hit = flagged.iter().find(|u| u.reply == want).expect("planted reply flagged");
    assert!((hit.share - 0.3).abs() < 0.01);
}

#[test]
fn singleton_reply_is_not_flagged() {
    let v = Vocab::from_counts((0..1000).map(|i| (format!("w{i}"), 1000 - i as u64)).collect());
    let mut pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..10_000u32).map(|q| (vec![q % 900 + 4, q / 900 + 4], vec![600 + q % 300])).collect();
    pairs[0].1 = vec![4, 5];
    let flagged = detect_universal_replies(&pairs, &v, 50, 0.01).unwrap();
    assert!(flagged.iter().all(|u| u.reply != vec![4, 5]));
}

#[test]
fn planted_half_share() {
    for seed in 0..3 {
        let spec = SynthSpec::default();
        let pairs = synth_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut queries: HashMap<&[String], std::collections::HashSet<&[String]>> = HashMap::new();
        for p in &pairs {
            queries.entry(&p.response).or_default().insert(&p.query);
        }
        let planted: usize = spec
            .universal
            .iter()
            .map(|(text, _)| {
                let toks: Vec<String> = text.split_whitespace().map(str::to_string).collect();
                queries.get(toks.as_slice()).map_or(0, |q| q.len())
            })
            .sum();
        let share = planted as f64 / pairs.len() as f64;
        assert!((share - 0.5).abs() <= 0.02, "seed {seed}: {share}");
    }
}

#[test]
fn synth_zipf_recovery() {
    let spec = SynthSpec {
        queries: 4000,
        vocab_size: 2000,
        universal: vec![],
        ..SynthSpec::default()
    };
    let pairs = synth_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for p in &pairs {
        for w in &p.response {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let freqs = relative_frequencies(counts.into_values());
    // The sampled tail flattens out; fit the well-estimated head.
    let z = zipf_fit(&freqs[..100]).unwrap();
    assert!((z.alpha - 1.0).abs() <= 0.1, "alpha = {}", z.alpha);
}

#[test]
fn jensen_holds_on_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for draw in 0..1000 {
        let v = rng.gen_range(6..=12);
        let dims = ModelDims::new(v, v, rng.gen_range(2..=4), rng.gen_range(2..=4));
        let mut params = ModelParams::init(dims, rng.gen());
        let scale = rng.gen_range(1.0..20.0);
        for t in params.tensors_mut() {
            for x in t.values_mut() {
                *x *= scale;
            }
        }
        let word = |rng: &mut ChaCha8Rng| rng.gen_range(4..v as TokenId);
        let x: Vec<TokenId> = (0..rng.gen_range(1..=4)).map(|_| word(&mut rng)).collect();
        let replies: Vec<Vec<TokenId>> = (0..rng.gen_range(1..=4)).map(|_| (0..rng.gen_range(1..=4)).map(|_| word(&mut rng)).collect()).collect();
        let j = jensen_bound_check(&params, &x, &replies).unwrap();
        assert!(j.holds(), "draw {draw}: {} > {}", j.lhs, j.rhs);
        if j.union.len() == 1 {
            assert!((j.lhs - j.rhs).abs() <= 1e-9);
        }
    }
}

fn small_pairs() -> impl Strategy<Value = Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    prop::collection::vec((prop::collection::vec(4u32..30, 1..3), prop::collection::vec(4u32..120, 1..3)), 1..80)
}

fn ranked_vocab() -> Vocab {
    Vocab::from_counts((0..500).map(|i| (format!("w{i}"), 1000 - i as u64)).collect())
}

proptest! {
    #[test]
    fn raising_t_never_unflags(pairs in small_pairs(), t1 in 1usize..=20, dt in 0usize..=20, share in 0.0f64..0.2) {
        let v = ranked_vocab();
        let a = detect_universal_replies(&pairs, &v, t1, share).unwrap();
        let b = detect_universal_replies(&pairs, &v, t1 + dt, share).unwrap();
        for u in &a {
            prop_assert!(b.iter().any(|w| w.reply == u.reply));
        }
    }

    #[test]
    fn raising_share_never_flags(pairs in small_pairs(), t in 1usize..=20, s1 in 0.0f64..0.3, ds in 0.0f64..0.3) {
        let v = ranked_vocab();
        let a = detect_universal_replies(&pairs, &v, t, s1).unwrap();
        let b = detect_universal_replies(&pairs, &v, t, s1 + ds).unwrap();
        for u in &b {
            prop_assert!(a.iter().any(|w| w.reply == u.reply));
        }
    }

    #[test]
    fn stats_shares_sum_to_one(raw in prop::collection::vec((0u8..6, 0u8..6), 1..60)) {
        let pairs: Vec<TextPair> = raw.iter().map(|(q, r)| TextPair::new(&format!("q{q}"), &format!("r{r}"))).collect();
        let s = CorpusStats::compute(&pairs, None, None).unwrap();
        prop_assert!((s.multi_reply_shares.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(s.unique_replies <= s.pairs);
        prop_assert!(s.mean_replies_per_query >= 1.0);
    }
}
