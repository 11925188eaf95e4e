//! Power-law fitting of rank/frequency data.

use super::{CorpusError, Result};

pub(super) const MIN_TYPES: usize = 10;

/// `log p(w_i) ≈ log C - α log i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZipfFit {
    pub c: f64,
    pub alpha: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    /// Every frequency was equal; α is reported as 0.
    pub degenerate: bool,
}

/// Counts turned into relative frequencies, sorted descending.
pub fn relative_frequencies(counts: impl IntoIterator<Item = u64>) -> Vec<f64> {
    let mut counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let total: u64 = counts.iter().sum();
    counts.into_iter().map(|c| c as f64 / total as f64).collect()
}

/// Least-squares fit over ranks `1..=n` of the given frequencies (sorted
/// descending first). Values are used as given, without renormalising.
pub fn zipf_fit(freqs: &[f64]) -> Result<ZipfFit> {
    if freqs.len() < MIN_TYPES {
        return Err(CorpusError::TooFewTokens {
            needed: MIN_TYPES,
            got: freqs.len(),
        });
    }
    if freqs.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(CorpusError::Invalid("frequencies must be positive and finite".into()));
    }
    let mut sorted = freqs.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    if sorted.first() == sorted.last() {
        log::warn!("all frequencies are equal; reporting alpha = 0");
        return Ok(ZipfFit {
            c: sorted[0],
            alpha: 0.0,
            residual: 0.0,
            degenerate: true,
        });
    }
    let n = sorted.len() as f64;
    let xs: Vec<f64> = (1..=sorted.len()).map(|i| (i as f64).ln()).collect();
    let ys: Vec<f64> = sorted.iter().map(|f| f.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(ZipfFit {
        c: intercept.exp(),
        alpha: -slope,
        residual: (rss / n).sqrt(),
        degenerate: false,
    })
}

/// Probability mass of the `t` most frequent words.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopTMass {
    /// Closed-form lower bound `C · ln(t + 1)`.
    pub bound: f64,
    /// `Σ_{i ≤ t} C / i^α`.
    pub zipf_mass: f64,
}

pub fn topt_mass(t: usize, c: f64, alpha: f64) -> Result<TopTMass> {
    if t == 0 {
        return Err(CorpusError::Invalid("t must be at least 1".into()));
    }
    let zipf_mass = (1..=t).map(|i| c / (i as f64).powf(alpha)).sum();
    Ok(TopTMass {
        bound: c * ((t + 1) as f64).ln(),
        zipf_mass,
    })
}

/// Mass of the first `t` entries of a descending frequency list.
pub fn empirical_topt_mass(freqs: &[f64], t: usize) -> f64 {
    freqs.iter().take(t).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_harmonic_frequencies() {
        let f: Vec<f64> = (1..=200).map(|i| 0.1 / i as f64).collect();
        let z = zipf_fit(&f).unwrap();
        assert!((z.c - 0.1).abs() < 1e-6, "{}", z.c);
        assert!((z.alpha - 1.0).abs() < 1e-6);
        assert!(z.residual < 1e-9);
    }

    #[test]
    fn inverse_square_counts() {
        let f: Vec<f64> = (1..=50).map(|i| 1e6 / (i * i) as f64).collect();
        let z = zipf_fit(&f).unwrap();
        assert!((z.alpha - 2.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_counts_are_degenerate() {
        let z = zipf_fit(&[3.0; 12]).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.alpha, 0.0);
    }

    #[test]
    fn needs_ten_types() {
        assert!(matches!(zipf_fit(&[1.0; 9]), Err(CorpusError::TooFewTokens { got: 9, .. })));
    }

    #[test]
    fn unsorted_input_is_ranked() {
        let mut f: Vec<f64> = (1..=20).map(|i| 0.1 / i as f64).collect();
        f.reverse();
        assert!((zipf_fit(&f).unwrap().alpha - 1.0).abs() < 1e-9);
    }

    #[test]
    fn closed_form_bound_values() {
        let m = topt_mass(500, 0.1, 1.0).unwrap();
        assert!((m.bound - 0.6215).abs() < 1e-3);
        let m = topt_mass(1000, 0.1, 1.0).unwrap();
        assert!((m.bound - 0.6909).abs() < 1e-3);
        assert!(topt_mass(0, 0.1, 1.0).is_err());
    }

    #[test]
    fn harmonic_mass_exceeds_log_bound() {
        for t in 1..2000 {
            let m = topt_mass(t, 0.1, 1.0).unwrap();
            assert!(m.zipf_mass >= m.bound, "t = {t}");
        }
    }

    #[test]
    fn relative_frequencies_sum_to_one() {
        let f = relative_frequencies([1, 5, 0, 4]);
        assert_eq!(f, vec![0.5, 0.4, 0.1]);
        assert_eq!(empirical_topt_mass(&f, 2), 0.9);
    }
}
