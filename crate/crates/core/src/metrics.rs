//! Corpus-level BLEU and NIST with one reference per candidate.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// NIST's default maximum n-gram order.
pub const NIST_MAX_N: usize = 5;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_inputs<C, R>(candidates: &[C], references: &[R], max_n: usize) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to score"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::contract("max_n must be at least 1"));
    }
    Ok(())
}

/// Corpus BLEU-1..=`max_n` on a 0–100 scale, unsmoothed: clipped n-gram
/// matches and candidate n-gram totals are pooled over the corpus, orders
/// are combined by a uniform geometric mean, and the brevity penalty is
/// `exp(1 − r/c)` when the candidates are shorter than the references.
pub fn bleu<T, C, R>(candidates: &[C], references: &[R], max_n: usize) -> Result<Vec<f64>>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    check_inputs(candidates, references, max_n)?;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        let (cand, refr) = (cand.as_ref(), refr.as_ref());
        c_len += cand.len();
        r_len += refr.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(refr, n);
            for (gram, count) in ngram_counts(cand, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut log_sum = 0.0;
    let mut scores = Vec::with_capacity(max_n);
    let mut dead = false;
    for n in 1..=max_n {
        if matches[n - 1] == 0 {
            dead = true;
        } else {
            log_sum += (matches[n - 1] as f64 / totals[n - 1] as f64).ln();
        }
        scores.push(if dead { 0.0 } else { 100.0 * bp * (log_sum / n as f64).exp() });
    }
    Ok(scores)
}

/// NIST brevity penalty: `exp(β·ln²(c/r))` below ratio 1, where β makes
/// the penalty 0.5 at ratio 2/3.
pub fn nist_brevity_penalty(ref_len: usize, hyp_len: usize) -> f64 {
    if ref_len == 0 {
        return 1.0;
    }
    let ratio = hyp_len as f64 / ref_len as f64;
    if ratio <= 0.0 {
        0.0
    } else if ratio < 1.0 {
        let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
        (beta * ratio.ln().powi(2)).exp()
    } else {
        1.0
    }
}

/// Corpus NIST score. Information weights come from the reference corpus,
/// `info(w₁..wₙ) = log₂(count(w₁..wₙ₋₁) / count(w₁..wₙ))` with the total
/// reference word count standing in for the empty prefix. Per-order
/// information-weighted match sums, each divided by that order's candidate
/// n-gram total, are added over orders 1..=`max_n` and scaled by the
/// brevity penalty.
pub fn nist<T, C, R>(candidates: &[C], references: &[R], max_n: usize) -> Result<f64>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    check_inputs(candidates, references, max_n)?;
    let mut freq: HashMap<&[T], usize> = HashMap::new();
    let mut ref_words = 0usize;
    for r in references {
        let r = r.as_ref();
        ref_words += r.len();
        for n in 1..=max_n {
            for (g, c) in ngram_counts(r, n) {
                *freq.entry(g).or_insert(0) += c;
            }
        }
    }
    let info = |gram: &[T]| -> f64 {
        let prefix = &gram[..gram.len() - 1];
        let numerator = if prefix.is_empty() {
            ref_words
        } else {
            freq.get(prefix).copied().unwrap_or(ref_words)
        };
        (numerator as f64 / freq[gram] as f64).log2()
    };

    let mut score = 0.0;
    for n in 1..=max_n {
        let (mut weighted, mut total) = (0.0, 0usize);
        for (cand, refr) in candidates.iter().zip(references) {
            let ref_counts = ngram_counts(refr.as_ref(), n);
            for (gram, count) in ngram_counts(cand.as_ref(), n) {
                total += count;
                if let Some(&rc) = ref_counts.get(gram) {
                    weighted += info(gram) * count.min(rc) as f64;
                }
            }
        }
        if total > 0 {
            score += weighted / total as f64;
        }
    }
    let c_len: usize = candidates.iter().map(|c| c.as_ref().len()).sum();
    Ok(score * nist_brevity_penalty(ref_words, c_len))
}

/// Drops PAD, BOS and EOS before scoring.
pub fn strip_special(tokens: &[u32]) -> Vec<u32> {
    tokens.iter().copied().filter(|t| !matches!(*t, PAD | BOS | EOS)).collect()
}

/// BLEU-1..4 and NIST over a set of responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub nist: f64,
    pub samples: usize,
}

impl EvalReport {
    /// Scores token-id responses after stripping special tokens.
    pub fn compute(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<Self> {
        let c: Vec<Vec<u32>> = candidates.iter().map(|t| strip_special(t)).collect();
        let r: Vec<Vec<u32>> = references.iter().map(|t| strip_special(t)).collect();
        let b = bleu(&c, &r, 4)?;
        Ok(EvalReport {
            bleu: [b[0], b[1], b[2], b[3]],
            nist: nist(&c, &r, NIST_MAX_N)?,
            samples: c.len(),
        })
    }

    pub fn bleu4(&self) -> f64 {
        self.bleu[3]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "BLEU1", "BLEU2", "BLEU3", "BLEU4", "NIST", "samples")?;
        write!(
            f,
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.4} {:>8}",
            self.bleu[0], self.bleu[1], self.bleu[2], self.bleu[3], self.nist, self.samples
        )
    }
}
