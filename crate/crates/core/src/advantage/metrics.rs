//! Reference-based similarity: sentence BLEU, ROUGE-L, and an
//! embedding-cosine semantic term.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tinylm::TinyLM;

pub const BLEU_WEIGHT: f64 = 0.25;
pub const ROUGE_WEIGHT: f64 = 0.25;
pub const SEMANTIC_WEIGHT: f64 = 0.5;

/// How texts are split into units for n-gram and LCS matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricUnit {
    #[default]
    Word,
    Char,
}

impl MetricUnit {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            MetricUnit::Word => text.split_whitespace().map(str::to_string).collect(),
            MetricUnit::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScoreBreakdown {
    pub bleu: f64,
    pub rouge: f64,
    pub semantic: f64,
    pub combined: f64,
}

impl ReferenceScoreBreakdown {
    pub fn from_parts(bleu: f64, rouge: f64, semantic: f64) -> Self {
        Self {
            bleu,
            rouge,
            semantic,
            combined: BLEU_WEIGHT * bleu + ROUGE_WEIGHT * rouge + SEMANTIC_WEIGHT * semantic,
        }
    }
}

fn ngram_counts(units: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if units.len() >= n {
        for w in units.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with uniform 1..=4-gram weights and brevity penalty.
/// Orders 2 and up are add-one smoothed (BLEU+1); unigram precision is not,
/// so candidates sharing no unit with the reference score 0.
pub fn sentence_bleu(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean of the embedding rows of the model's tokens for `text`.
pub fn mean_embedding(embedder: &TinyLM, text: &str) -> Vec<f64> {
    let de = embedder.embed_dim();
    let ids = embedder.tokenizer().encode(text);
    let mut mean = vec![0.0; de];
    if ids.is_empty() {
        return mean;
    }
    let table = &embedder.params().embed;
    for &id in &ids {
        for (m, e) in mean.iter_mut().zip(&table[id as usize * de..(id as usize + 1) * de]) {
            *m += e;
        }
    }
    let n = ids.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Weighted form/semantics similarity of a candidate to a reference.
/// The semantic term maps embedding cosine from `[-1, 1]` to `[0, 1]`.
pub fn reference_score(candidate: &str, reference: &str, embedder: &TinyLM, unit: MetricUnit) -> ReferenceScoreBreakdown {
    let c = unit.split(candidate);
    if c.is_empty() {
        return ReferenceScoreBreakdown::from_parts(0.0, 0.0, 0.0);
    }
    let r = unit.split(reference);
    let semantic = if candidate == reference {
        1.0
    } else {
        let cos = cosine(&mean_embedding(embedder, candidate), &mean_embedding(embedder, reference));
        (cos + 1.0) / 2.0
    };
    ReferenceScoreBreakdown::from_parts(sentence_bleu(&c, &r), rouge_l(&c, &r), semantic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::TokenizerSpec;

    fn w(s: &str) -> Vec<String> {
        MetricUnit::Word.split(s)
    }

    #[test]
    fn rouge_l_hand_value() {
        // LCS("a c", "a b c") = 2, P = 1, R = 2/3, F1 = 0.8
        assert!((rouge_l(&w("a c"), &w("a b c")) - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l(&w("x"), &w("a b")), 0.0);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let s = w("the cat sat on the mat");
        assert_eq!(sentence_bleu(&s, &s), 1.0);
        assert_eq!(sentence_bleu(&w("x y z"), &w("a b c")), 0.0);
        // p1 = 1/2, p2..p4 = 1/2, 1/1, 1/1 after smoothing, no brevity penalty
        let part = sentence_bleu(&w("a x"), &w("a b"));
        assert!((part - (0.25f64).powf(0.25)).abs() < 1e-12, "{part}");
        assert_eq!(sentence_bleu(&[], &s), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // all n-gram precisions are 1; penalty exp(1 - 4/2)
        let b = sentence_bleu(&w("a b"), &w("a b c d"));
        assert!((b - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn combined_weights() {
        let b = ReferenceScoreBreakdown::from_parts(0.4, 0.6, 0.8);
        assert!((b.combined - 0.65).abs() < 1e-15);
    }

    #[test]
    fn identity_scores_one() {
        let m = TinyLM::new(TokenizerSpec::char_level("abc").unwrap(), 2, 3, 3, 5).unwrap();
        let b = reference_score("abc", "abc", &m, MetricUnit::Char);
        assert_eq!((b.bleu, b.rouge, b.semantic, b.combined), (1.0, 1.0, 1.0, 1.0));
        let e = reference_score("", "abc", &m, MetricUnit::Char);
        assert_eq!((e.bleu, e.rouge, e.semantic), (0.0, 0.0, 0.0));
    }
}
