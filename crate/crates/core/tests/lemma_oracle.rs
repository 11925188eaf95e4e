use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankreg::lemma::{
    quarter_threshold, universal_mass_closed_form, verify_top_word_share, verify_word_ordering, verify_word_set, universal_query_spread, verify_universal_mass, verify_uniform_chain, LemmaUniverse, Word, MAX_REPLIES,
};

#[test]
fn word_set_consistency_on_random_universe() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = LemmaUniverse::random(&mut rng, 8, 20, 5).unwrap();
    for y in 0..u.replies().len() {
        assert!(verify_word_set(&u, y).unwrap().holds(), "reply {y}");
    }
}

#[test]
fn conditionals_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let u = LemmaUniverse::random(&mut rng, 6, 12, 4).unwrap();
        for y in 0..u.replies().len() {
            let s: f64 = (0..u.queries().len()).map(|x| u.p_x_given_y(x, y)).sum();
            assert!((s - 1.0).abs() <= 1e-12);
            let set = u.word_set(y).clone();
            let s: f64 = u.candidates(&set).into_iter().map(|i| u.p_y_given_s(i, &set)).sum();
            assert!((s - 1.0).abs() <= 1e-12);
            let s: f64 = (0..u.queries().len()).map(|x| u.p_x_given_s(x, &set)).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn query_spread_scales_inversely_with_queries() {
    let e = |m| universal_query_spread(&LemmaUniverse::closed_form(m, 3, 1).unwrap(), 0).unwrap();
    assert_eq!(e(1000), 0.001);
    for m in [1, 2, 5, 50, 250] {
        assert_eq!(e(m), 1.0 / m as f64);
        assert_eq!(e(2 * m), e(m) / 2.0);
    }
}

#[test]
fn universal_mass_matches_closed_form() {
    let s: BTreeSet<Word> = (1..=4).collect();
    for big_m in [1, 2, 7, 100, 1000] {
        for n in 2..=30 {
            for m in 1..n {
                let u = LemmaUniverse::closed_form(big_m, n, m).unwrap();
                let c = verify_universal_mass(&u, &s).unwrap();
                assert_eq!((c.n, c.m), (n, m));
                let want = big_m as f64 * m as f64 / (big_m as f64 * m as f64 + (n - m) as f64);
                assert!((c.universal_sum - want).abs() <= 1e-9);
                assert!((c.closed_form.unwrap() - want).abs() <= 1e-15);
                assert!((c.max_other - 1.0 / (big_m * m + n - m) as f64).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn all_universal_mass_sums_to_one() {
    let u = LemmaUniverse::closed_form(10, 5, 5).unwrap();
    let s: BTreeSet<Word> = (1..=4).collect();
    let sum: f64 = u.candidates(&s).into_iter().map(|i| u.p_y_given_s(i, &s)).sum();
    assert_eq!(sum, 1.0);
}

#[test]
fn universal_mass_large_m_bound() {
    assert!(universal_mass_closed_form(1000.0, 4, 1) >= 0.99);
    for (n, m) in [(4usize, 1usize), (10, 2), (30, 7)] {
        let big_m = (100 * (n - m)).div_ceil(m);
        assert!(universal_mass_closed_form(big_m as f64, n, m) >= 0.99);
        let u = LemmaUniverse::closed_form(big_m, n, m).unwrap();
        let c = verify_universal_mass(&u, &(1..=4).collect()).unwrap();
        assert!(c.universal_sum >= 0.99);
    }
}

#[test]
fn word_ordering_chain_on_random_universes() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for n in 0..100 {
        let (q, r, v) = (rng.gen_range(2..8), rng.gen_range(2..25), rng.gen_range(2..6));
        let u = LemmaUniverse::random(&mut rng, q, r, v).unwrap();
        for x in 0..u.queries().len() {
            for y in 0..u.replies().len() {
                if u.count(x, y) == 0 {
                    continue;
                }
                let r = verify_word_ordering(&u, x, y, MAX_REPLIES).unwrap();
                for (step, v) in r.chain.iter().enumerate() {
                    assert!((v - r.exact).abs() <= 1e-12, "universe {n} step {step}: {v} vs {}", r.exact);
                }
                assert!(r.split_deviation() <= 1e-12);
            }
        }
    }
}

#[test]
fn chain_universes_have_uniform_query_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let k = rng.gen_range(1..=5);
        let n = rng.gen_range(k + 1..=30);
        let planted = vec![(vec![1, 2], rng.gen_range(1..=n)), (vec![2], rng.gen_range(1..=n))];
        let u = LemmaUniverse::chain(&mut rng, n, k, &planted).unwrap();
        for y in (0..u.replies().len()).filter(|&y| !u.is_universal(y)) {
            let c = verify_uniform_chain(&u, y).unwrap();
            assert_eq!(c.k, k);
            assert!(c.holds());
        }
    }
}

#[test]
fn top_word_share_bound_values() {
    assert!(0.05 * 501f64.ln() > 0.25);
    assert!(0.05 * 148f64.ln() < 0.25);
    assert_eq!(quarter_threshold(), 148);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = verify_top_word_share(3, 500, 0.1, 10, &mut rng).unwrap();
    assert!(r.exceeds_quarter);
    // T·ln(t+1) > T, so every binomial term is included.
    assert!((r.analytic - 0.1 * 501f64.ln()).abs() < 1e-12);
    assert!(!verify_top_word_share(3, 147, 0.1, 10, &mut rng).unwrap().exceeds_quarter);
}

#[test]
fn top_word_share_monte_carlo_matches_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in [148, 500, 1000] {
        for big_t in 1..=10 {
            let r = verify_top_word_share(big_t, t, 0.1, 20_000, &mut rng).unwrap();
            // Per-sample values lie in [0, 1]; 5 standard errors of the worst case.
            assert!((r.monte_carlo - r.expected).abs() <= 5.0 * 0.5 / (r.samples as f64).sqrt(), "T = {big_t} t = {t}");
        }
    }
}

#[test]
fn top_word_share_bound_holds_for_short_replies() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in [148, 500, 1000] {
        for big_t in 1..=5 {
            let r = verify_top_word_share(big_t, t, 0.1, 20_000, &mut rng).unwrap();
            assert!(r.expected >= r.lower_bound, "T = {big_t} t = {t}");
            assert!(r.monte_carlo >= r.lower_bound, "T = {big_t} t = {t}");
        }
    }
}

#[test]
fn top_word_share_bound_fails_for_longer_replies() {
    // The all-top-t share of sub-sequences decays like ((1+q)/2)^T, so the
    // 0.05·ln(t+1) bound cannot hold for every T <= 10.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = verify_top_word_share(6, 148, 0.1, 10, &mut rng).unwrap();
    assert!(r.expected < r.lower_bound);
    let r = verify_top_word_share(10, 1000, 0.1, 10, &mut rng).unwrap();
    assert!(r.expected < r.lower_bound);
}

proptest! {
    #[test]
    fn universal_mass_increases_with_m(big_m in 1usize..400, n in 2usize..20, m_frac in 0.0f64..1.0) {
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        prop_assume!(m < n);
        let s: BTreeSet<Word> = (1..=4).collect();
        let a = verify_universal_mass(&LemmaUniverse::closed_form(big_m, n, m).unwrap(), &s).unwrap();
        let b = verify_universal_mass(&LemmaUniverse::closed_form(big_m + 1, n, m).unwrap(), &s).unwrap();
        prop_assert!(b.universal_sum > a.universal_sum);
    }
}
