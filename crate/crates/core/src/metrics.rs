//! Corpus-level distances and knowledge-retention scores.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{Document, KrQuestion};
use crate::error::{Error, Result};
use crate::tinylm::{sequence_log_prob, TinyLmParams};

pub const DEFAULT_SMOOTHING: f64 = 1e-6;
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.75;

pub type Ngram = Vec<usize>;

/// An additively smoothed n-gram distribution over an explicit support.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramDistribution {
    pub order: usize,
    pub probs: BTreeMap<Ngram, f64>,
}

fn ngrams(corpus: &[Document], n: usize) -> impl Iterator<Item = &[usize]> {
    corpus.iter().flat_map(move |doc| doc.windows(n))
}

/// Every n-gram occurring in any of the corpora.
pub fn observed_support(corpora: &[&[Document]], n: usize) -> BTreeSet<Ngram> {
    corpora.iter().flat_map(|c| ngrams(c, n).map(<[usize]>::to_vec)).collect()
}

/// All unigrams `0..vocab`.
pub fn vocab_support(vocab: usize) -> BTreeSet<Ngram> {
    (0..vocab).map(|t| vec![t]).collect()
}

/// `p(e) = (count(e) + eps) / (total + eps * |support|)`, with n-grams taken
/// within documents. Fails if the corpus holds an n-gram outside `support`.
pub fn ngram_distribution(
    corpus: &[Document],
    n: usize,
    support: &BTreeSet<Ngram>,
    epsilon: f64,
) -> Result<NgramDistribution> {
    if !(1..=2).contains(&n) {
        return Err(Error::invalid("n", format!("n-gram order must be 1 or 2, got {n}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon", format!("smoothing must be positive, got {epsilon}")));
    }
    if support.is_empty() {
        return Err(Error::Empty("n-gram support"));
    }
    let mut counts: BTreeMap<Ngram, f64> = support.iter().map(|e| (e.clone(), 0.0)).collect();
    let mut total = 0.0;
    for gram in ngrams(corpus, n) {
        match counts.get_mut(gram) {
            Some(c) => *c += 1.0,
            None => return Err(Error::invalid("support", format!("n-gram {gram:?} is outside the support"))),
        }
        total += 1.0;
    }
    let denom = total + epsilon * support.len() as f64;
    let probs = counts.into_iter().map(|(e, c)| (e, (c + epsilon) / denom)).collect();
    Ok(NgramDistribution { order: n, probs })
}

/// `D(p || q) = sum_e p(e) ln(p(e) / q(e))` over a shared support.
pub fn kl_divergence(p: &NgramDistribution, q: &NgramDistribution) -> Result<f64> {
    if p.probs.len() != q.probs.len() || p.probs.keys().ne(q.probs.keys()) {
        return Err(Error::invalid("support", "distributions are defined on different supports"));
    }
    Ok(p.probs
        .values()
        .zip(q.probs.values())
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum())
}

/// Unigram and bigram KL from `original` to `generated`, each smoothed over
/// the union of what either corpus contains.
pub fn corpus_kl(original: &[Document], generated: &[Document], vocab: usize, epsilon: f64) -> Result<(f64, f64)> {
    let uni = vocab_support(vocab);
    let uni_kl = kl_divergence(
        &ngram_distribution(original, 1, &uni, epsilon)?,
        &ngram_distribution(generated, 1, &uni, epsilon)?,
    )?;
    let bi = observed_support(&[original, generated], 2);
    let bi_kl = kl_divergence(
        &ngram_distribution(original, 2, &bi, epsilon)?,
        &ngram_distribution(generated, 2, &bi, epsilon)?,
    )?;
    Ok((uni_kl, bi_kl))
}

/// Whether the model scores the true continuation strictly higher.
pub fn kr_correct(params: &TinyLmParams, q: &KrQuestion) -> Result<bool> {
    let seq = |cont: &[usize]| [q.context.as_slice(), cont].concat();
    let t = sequence_log_prob(params, &seq(&q.true_continuation))?;
    let f = sequence_log_prob(params, &seq(&q.false_continuation))?;
    Ok(t > f)
}

/// Fraction of questions answered correctly; ties count as wrong.
pub fn kr_score(params: &TinyLmParams, questions: &[KrQuestion]) -> Result<f64> {
    if questions.is_empty() {
        return Err(Error::Empty("question set"));
    }
    let mut correct = 0usize;
    for q in questions {
        correct += usize::from(kr_correct(params, q)?);
    }
    Ok(correct as f64 / questions.len() as f64)
}

/// First index whose score falls strictly below `tau`.
pub fn time_to_failure(scores: &[f64], tau: f64) -> Option<usize> {
    scores.iter().position(|&s| s < tau)
}
