//! Corpus-level BLEU with clipped n-gram precision and brevity penalty,
//! reported on the 0-100 scale.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied to zero precisions when smoothing is on.
pub const SMOOTHING_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Smoothing {
    #[default]
    None,
    /// Replace a zero n-gram precision by [`SMOOTHING_FLOOR`].
    Floor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    /// Clipped precision per order, after smoothing.
    pub precisions: Vec<f64>,
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// Single-line `key=value` rendering.
    pub fn to_line(&self) -> String {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.6}", 100.0 * p)).collect();
        format!(
            "bleu={:.6} precisions={} bp={:.6} hyp_len={} ref_len={}",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }

    pub fn breakdown(&self) -> String {
        let mut s = format!("BLEU = {:.2}\n", self.bleu);
        for (n, ((p, m), t)) in self.precisions.iter().zip(&self.matches).zip(&self.totals).enumerate() {
            s.push_str(&format!("  {}-gram precision: {:6.2}  ({m}/{t})\n", n + 1, 100.0 * p));
        }
        s.push_str(&format!(
            "  brevity penalty: {:.4}  (hyp {} / ref {})\n",
            self.brevity_penalty, self.hyp_len, self.ref_len
        ));
        s
    }
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU of `hypotheses` against one reference each.
pub fn corpus_bleu<T: Hash + Eq>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::Input("BLEU of an empty corpus is undefined".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("max_n must be at least 1".into()));
    }
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            let hc = ngram_counts(h, n);
            totals[n - 1] += h.len().saturating_sub(n - 1) as u64;
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            let p = if t == 0 { 0.0 } else { m as f64 / t as f64 };
            match smoothing {
                Smoothing::Floor if p == 0.0 => SMOOTHING_FLOOR,
                _ => p,
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Smoothed BLEU of a single sentence pair, for diagnostics.
pub fn sentence_bleu<T: Hash + Eq + Clone>(hypothesis: &[T], reference: &[T]) -> f64 {
    corpus_bleu(&[hypothesis.to_vec()], &[reference.to_vec()], 4, Smoothing::Floor)
        .map(|r| r.bleu)
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let refs = vec![toks("a b c d e"), toks("f g h i")];
        let r = corpus_bleu(&refs, &refs, 4, Smoothing::None).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn short_hypothesis_by_hand() {
        let r = corpus_bleu(&[toks("a b c")], &[toks("a b c d")], 4, Smoothing::Floor).unwrap();
        // 3/3 unigrams, 2/2 bigrams, 1/1 trigram, no 4-grams.
        assert_eq!(r.matches, vec![3, 2, 1, 0]);
        assert_eq!(r.totals, vec![3, 2, 1, 0]);
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        assert!((r.brevity_penalty - bp).abs() < 1e-15);
        let expect = 100.0 * bp * (SMOOTHING_FLOOR.ln() / 4.0).exp();
        assert!((r.bleu - expect).abs() < 1e-12);
        let unsmoothed = corpus_bleu(&[toks("a b c")], &[toks("a b c d")], 4, Smoothing::None).unwrap();
        assert_eq!(unsmoothed.bleu, 0.0);
        let bigram = corpus_bleu(&[toks("a b c")], &[toks("a b c d")], 2, Smoothing::None).unwrap();
        assert!((bigram.bleu - 100.0 * bp).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vocabularies_score_zero() {
        let r = corpus_bleu(&[toks("a b c d")], &[toks("w x y z")], 4, Smoothing::None).unwrap();
        assert_eq!(r.bleu, 0.0);
        let s = corpus_bleu(&[toks("a b c d")], &[toks("w x y z")], 4, Smoothing::Floor).unwrap();
        assert!(s.bleu < 1e-6);
    }

    #[test]
    fn clipping_caps_repeated_unigram() {
        let r = corpus_bleu(&[toks("the the the the the the the")], &[toks("the cat")], 1, Smoothing::None).unwrap();
        assert_eq!(r.matches[0], 1);
        assert!(r.precisions[0] <= 1.0 / 7.0 + 1e-15);
    }

    #[test]
    fn errors_on_empty_or_mismatched() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(corpus_bleu(&empty, &empty, 4, Smoothing::None).is_err());
        assert!(corpus_bleu(&[toks("a")], &[toks("a"), toks("b")], 4, Smoothing::None).is_err());
        let r = corpus_bleu(&[vec![], toks("a b c d")], &[toks("x"), toks("a b c d")], 4, Smoothing::Floor).unwrap();
        assert!(r.bleu > 0.0);
    }
}
