//! n-gram statistics, ROUGE, the novelty metric and the combined RL reward.
//!
//! Every function is generic over the token type so the same code scores
//! token ids during training and strings in the CLI.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unique n-grams of one order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramSet<T: Eq + Hash> {
    pub order: usize,
    pub grams: HashSet<Vec<T>>,
}

impl<T: Eq + Hash> NgramSet<T> {
    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn contains(&self, gram: &[T]) -> bool {
        self.grams.contains(gram)
    }
}

/// All contiguous length-`n` windows, deduplicated. Sequences shorter than
/// `n` (and `n == 0`) give the empty set.
pub fn ngrams<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> NgramSet<T> {
    let grams = if n == 0 {
        HashSet::new()
    } else {
        tokens.windows(n).map(<[T]>::to_vec).collect()
    };
    NgramSet { order: n, grams }
}

/// Counts of novel and total unique n-grams of `generated` relative to `source`.
fn novel_counts<T: Eq + Hash + Clone>(generated: &[T], source: &[T], n: usize) -> (usize, usize) {
    let gen = ngrams(generated, n);
    let src = ngrams(source, n);
    let novel = gen.grams.iter().filter(|g| !src.contains(g)).count();
    (novel, gen.len())
}

/// Fraction of the unique n-grams of `generated` that do not occur in
/// `source`. A summary without any n-gram scores 0.
pub fn novelty<T: Eq + Hash + Clone>(generated: &[T], source: &[T], n: usize) -> f64 {
    match novel_counts(generated, source, n) {
        (_, 0) => 0.0,
        (novel, total) => novel as f64 / total as f64,
    }
}

/// Novelty scaled by the word-count ratio of generated to ground-truth
/// summary, so short outputs cannot collect a high reward.
pub fn novelty_reward<T: Eq + Hash + Clone>(
    generated: &[T],
    source: &[T],
    ground_truth: &[T],
    n: usize,
) -> Result<f64> {
    if ground_truth.is_empty() {
        return Err(Error::Data("novelty reward needs a non-empty ground truth".into()));
    }
    let ratio = generated.len() as f64 / ground_truth.len() as f64;
    Ok(novelty(generated, source, n) * ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl RougeScore {
    fn from_counts(matched: usize, cand_len: usize, ref_len: usize, beta: f64) -> Self {
        if matched == 0 || cand_len == 0 || ref_len == 0 {
            return Self::default();
        }
        let precision = matched as f64 / cand_len as f64;
        let recall = matched as f64 / ref_len as f64;
        let b2 = beta * beta;
        let f_score = (1.0 + b2) * precision * recall / (recall + b2 * precision);
        Self {
            precision,
            recall,
            f_score,
        }
    }
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Summary-level ROUGE-L with F1.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    rouge_l_beta(candidate, reference, 1.0)
}

pub fn rouge_l_beta<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> RougeScore {
    let lcs = lcs_len(candidate, reference);
    RougeScore::from_counts(lcs, candidate.len(), reference.len(), beta)
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram counts and F1.
pub fn rouge_n<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |m: &HashMap<&[T], usize>| m.values().sum::<usize>();
    RougeScore::from_counts(matched, total(&cand), total(&refc), 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_rouge: f64,
    pub lambda_novel: f64,
    pub novelty_n: usize,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_rouge: 0.9,
            lambda_novel: 0.1,
            novelty_n: 3,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda_rouge) || !ok(self.lambda_novel) {
            return Err(Error::Config(format!(
                "reward weights must be finite and non-negative, got {} / {}",
                self.lambda_rouge, self.lambda_novel
            )));
        }
        if self.novelty_n == 0 {
            return Err(Error::Config("novelty order must be at least 1".into()));
        }
        Ok(())
    }
}

/// `λ_rouge · ROUGE-L F + λ_novel · R_nov` for a sampled summary.
pub fn combined_reward<T: Eq + Hash + Clone>(
    sample: &[T],
    source: &[T],
    ground_truth: &[T],
    weights: &RewardWeights,
) -> Result<f64> {
    weights.validate()?;
    let rouge = rouge_l(sample, ground_truth).f_score;
    let nov = novelty_reward(sample, source, ground_truth, weights.novelty_n)?;
    Ok(weights.lambda_rouge * rouge + weights.lambda_novel * nov)
}

/// Scores of one system output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScores {
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    /// Percentage of novel unique n-grams for n = 1..=4.
    pub novel_ngrams: [f64; 4],
}

/// Corpus-level ROUGE F-scores (means, in percent) and NN-1..4 percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub documents: usize,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub novel_ngrams: [f64; 4],
}

pub fn score_document<T: Eq + Hash + Clone>(output: &[T], source: &[T], reference: &[T]) -> DocumentScores {
    let mut novel_ngrams = [0.0; 4];
    for (k, slot) in novel_ngrams.iter_mut().enumerate() {
        *slot = 100.0 * novelty(output, source, k + 1);
    }
    DocumentScores {
        rouge_1: 100.0 * rouge_n(output, reference, 1).f_score,
        rouge_2: 100.0 * rouge_n(output, reference, 2).f_score,
        rouge_l: 100.0 * rouge_l(output, reference).f_score,
        novel_ngrams,
    }
}

/// NN-n is pooled: per order, novel unique n-grams summed over documents
/// divided by unique n-grams summed over documents.
pub fn nn_report<T: Eq + Hash + Clone>(
    outputs: &[Vec<T>],
    sources: &[Vec<T>],
    references: &[Vec<T>],
) -> Result<MetricsReport> {
    if outputs.len() != sources.len() {
        return Err(Error::Alignment {
            left: outputs.len(),
            right: sources.len(),
        });
    }
    if outputs.len() != references.len() {
        return Err(Error::Alignment {
            left: outputs.len(),
            right: references.len(),
        });
    }
    let mut novel = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut r1, mut r2, mut rl) = (0.0, 0.0, 0.0);
    for ((out, src), reference) in outputs.iter().zip(sources).zip(references) {
        for k in 0..4 {
            let (nv, tot) = novel_counts(out, src, k + 1);
            novel[k] += nv;
            total[k] += tot;
        }
        r1 += rouge_n(out, reference, 1).f_score;
        r2 += rouge_n(out, reference, 2).f_score;
        rl += rouge_l(out, reference).f_score;
    }
    let docs = outputs.len();
    let mean = |x: f64| if docs == 0 { 0.0 } else { 100.0 * x / docs as f64 };
    let mut novel_ngrams = [0.0; 4];
    for k in 0..4 {
        if total[k] > 0 {
            novel_ngrams[k] = 100.0 * novel[k] as f64 / total[k] as f64;
        }
    }
    Ok(MetricsReport {
        documents: docs,
        rouge_1: mean(r1),
        rouge_2: mean(r2),
        rouge_l: mean(rl),
        novel_ngrams,
    })
}
