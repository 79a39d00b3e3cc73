//! Corpus-level BLEU with clipped n-gram counts and a brevity penalty.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Sufficient statistics for corpus BLEU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped matches per order, index 0 is unigrams.
    pub matches: Vec<usize>,
    /// Candidate n-gram totals per order.
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu_stats(candidates: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<BleuStats> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Data("BLEU of an empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::Contract("max_n must be at least 1".into()));
    }
    let mut stats = BleuStats { matches: vec![0; max_n], totals: vec![0; max_n], cand_len: 0, ref_len: 0 };
    for (c, r) in candidates.iter().zip(references) {
        stats.cand_len += c.len();
        stats.ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (gram, k) in ngram_counts(c, n) {
                stats.matches[n - 1] += k.min(rc.get(gram).copied().unwrap_or(0));
            }
            stats.totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    Ok(stats)
}

impl BleuStats {
    /// Unsmoothed score on a 0-100 scale; 0 when any order has no match.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let n = self.matches.len() as f64;
        let log_p: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / n;
        let bp = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        100.0 * bp * log_p.exp()
    }
}

/// Corpus BLEU of tokenized candidates against one reference each.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    Ok(bleu_stats(candidates, references, max_n)?.score())
}
