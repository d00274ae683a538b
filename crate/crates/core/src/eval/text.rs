//! BLEU and ROUGE over lowercased alphanumeric tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::tokenize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextMetricError {
    #[error("no non-empty reference")]
    EmptyReference,
    #[error("candidate has no tokens")]
    EmptyCandidate,
    #[error("max_n must be at least 1")]
    ZeroOrder,
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with clipped n-gram precisions for n = 1..=max_n and a
/// brevity penalty against the reference closest in length (shorter wins
/// ties). A zero match count for n ≥ 2 is smoothed to 1 / (total + 1); a
/// zero unigram match leaves the score at 0.
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> Result<f64, TextMetricError> {
    if max_n == 0 {
        return Err(TextMetricError::ZeroOrder);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).filter(|r| !r.is_empty()).collect();
    if refs.is_empty() {
        return Err(TextMetricError::EmptyReference);
    }
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return Err(TextMetricError::EmptyCandidate);
    }

    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let counts = ngrams(&cand, n);
        let total: usize = counts.values().sum();
        let ref_counts: Vec<_> = refs.iter().map(|r| ngrams(r, n)).collect();
        let matched: usize = counts
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }

    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((bp * (log_sum / max_n as f64).exp()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
}

fn f1(overlap: usize, cand_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

fn rouge_n(cand: &[String], reference: &[String], n: usize) -> f64 {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    f1(overlap, c.values().sum(), r.values().sum())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F1. Empty inputs score 0.
pub fn rouge(candidate: &str, reference: &str) -> RougeScores {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    RougeScores {
        rouge1_f: rouge_n(&c, &r, 1),
        rouge2_f: rouge_n(&c, &r, 2),
        rouge_l_f: f1(lcs_len(&c, &r), c.len(), r.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_examples() {
        let b = bleu("the cat sat", &["the cat sat down"], 3).unwrap();
        assert!((b - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((b - 0.7165).abs() < 1e-4);
        assert_eq!(bleu("a quick brown fox jumps", &["a quick brown fox jumps"], 4).unwrap(), 1.0);
        assert_eq!(bleu("hello", &["hello"], 4).unwrap(), 1.0);
        assert!(bleu("alpha beta", &["gamma delta"], 4).unwrap() < 0.01);
        assert_eq!(bleu("x", &["", " "], 4), Err(TextMetricError::EmptyReference));
        assert_eq!(bleu("", &["x"], 4), Err(TextMetricError::EmptyCandidate));
    }

    #[test]
    fn bleu_smoothing_and_clipping() {
        // unigrams 2/2, bigram "a c" unmatched: (1 + 1) → 1/2; BP 1
        let b = bleu("a c", &["c a"], 2).unwrap();
        assert!((b - (0.5f64).sqrt()).abs() < 1e-12);
        // "the the the" against "the cat": clipped 1/3, BP e^(1 - 2/3) = 1 (c > r)
        let b = bleu("the the the", &["the cat"], 1).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
        // closest reference length picks the BP
        let b = bleu("a b", &["a b c d e f", "a b c"], 1).unwrap();
        assert!((b - (1.0f64 - 1.5).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let s = rouge("a b c", "a c d");
        assert!((s.rouge1_f - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.rouge_l_f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.rouge2_f, 0.0);
        let id = rouge("The cat sat on the mat", "the cat sat on the mat");
        assert_eq!((id.rouge1_f, id.rouge2_f, id.rouge_l_f), (1.0, 1.0, 1.0));
        let d = rouge("x y", "z w");
        assert_eq!((d.rouge1_f, d.rouge2_f, d.rouge_l_f), (0.0, 0.0, 0.0));
        let e = rouge("", "");
        assert_eq!(e.rouge1_f, 0.0);
    }

    #[test]
    fn rouge_f1_is_symmetric() {
        let a = "the quick brown fox jumps over";
        let b = "a quick fox jumped over the dog";
        let (x, y) = (rouge(a, b), rouge(b, a));
        assert!((x.rouge1_f - y.rouge1_f).abs() < 1e-12);
        assert!((x.rouge_l_f - y.rouge_l_f).abs() < 1e-12);
    }
}
