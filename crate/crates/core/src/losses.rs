//! Confidence-aware classification losses.
//!
//! All losses are functions of `p_t`, the probability the model assigns to the
//! correct class. TCE zeroes the cross entropy of tokens whose `p_t` exceeds a
//! threshold; Focal scales it by `(1 - p_t)^gamma`.

use std::fmt;

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Probability of the correct class, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TokenProbability(f64);

impl TokenProbability {
    pub fn new(p: f64) -> Result<Self> {
        if p > 0.0 && p <= 1.0 {
            Ok(TokenProbability(p))
        } else {
            Err(Error::invalid("p", format!("probability must lie in (0, 1], got {p}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    Truncated { threshold: f64 },
    Focal { exponent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    MeanOverUnmasked,
    MeanOverAll,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub reduction: Reduction,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            reduction: Reduction::default(),
        }
    }

    pub fn truncated(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::invalid("tce_threshold", format!("must lie in (0, 1], got {threshold}")));
        }
        Ok(LossSpec {
            kind: LossKind::Truncated { threshold },
            reduction: Reduction::default(),
        })
    }

    pub fn focal(exponent: f64) -> Result<Self> {
        if !(exponent >= 0.0 && exponent.is_finite()) {
            return Err(Error::invalid("focal_exponent", format!("must be finite and >= 0, got {exponent}")));
        }
        Ok(LossSpec {
            kind: LossKind::Focal { exponent },
            reduction: Reduction::default(),
        })
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    /// Whether a token with correct-class probability `p` is excluded from the loss.
    pub fn is_masked(&self, p: f64) -> bool {
        match self.kind {
            LossKind::Truncated { threshold } => p > threshold,
            _ => false,
        }
    }

    /// Per-token loss value.
    pub fn token_loss(&self, p: TokenProbability) -> f64 {
        match self.kind {
            LossKind::CrossEntropy => ce(p),
            LossKind::Truncated { threshold } => tce(p, threshold),
            LossKind::Focal { exponent } => focal(p, exponent),
        }
    }

    /// Short label used for run directories and stream ids, e.g. `tce0.9`.
    pub fn label(&self) -> String {
        match self.kind {
            LossKind::CrossEntropy => "ce".to_string(),
            LossKind::Truncated { threshold } => format!("tce{threshold}"),
            LossKind::Focal { exponent } => format!("focal{exponent}"),
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

pub fn ce(p: TokenProbability) -> f64 {
    neg_log(p.get())
}

/// Indicator `1[p <= gamma]`.
pub fn chi(p: TokenProbability, gamma: f64) -> u8 {
    u8::from(p.get() <= gamma)
}

pub fn tce(p: TokenProbability, gamma: f64) -> f64 {
    if chi(p, gamma) == 1 {
        ce(p)
    } else {
        0.0
    }
}

/// `-(1 - p)^exponent * ln p`
pub fn focal(p: TokenProbability, exponent: f64) -> f64 {
    let weight = if exponent == 0.0 {
        1.0
    } else {
        (1.0 - p.get()).powf(exponent)
    };
    weight * neg_log(p.get())
}

/// Combines per-token losses according to `spec.reduction`. An all-masked
/// batch has loss 0 under either mean.
pub fn batch_loss(probs: &[TokenProbability], spec: &LossSpec) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Empty("batch of token probabilities"));
    }
    let mut total = 0.0;
    let mut unmasked = 0usize;
    for &p in probs {
        if !spec.is_masked(p.get()) {
            total += spec.token_loss(p);
            unmasked += 1;
        }
    }
    Ok(match spec.reduction {
        Reduction::Sum => total,
        Reduction::MeanOverAll => total / probs.len() as f64,
        Reduction::MeanOverUnmasked if unmasked == 0 => 0.0,
        Reduction::MeanOverUnmasked => total / unmasked as f64,
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `dL/dp_t * p_t` for the loss of one token; the logit gradient is this
/// factor times `onehot(target) - softmax`.
fn loss_slope_times_p(spec: &LossSpec, p: f64) -> f64 {
    match spec.kind {
        LossKind::CrossEntropy => -1.0,
        LossKind::Truncated { threshold } => {
            if p > threshold {
                0.0
            } else {
                -1.0
            }
        }
        LossKind::Focal { exponent } => {
            if exponent == 0.0 {
                return -1.0;
            }
            let q = 1.0 - p;
            if q <= 0.0 {
                return 0.0;
            }
            let ln_p = p.max(PROB_FLOOR).ln();
            exponent * q.powf(exponent - 1.0) * p * ln_p - q.powf(exponent)
        }
    }
}

/// Gradient of the single-token loss of `softmax(logits)` at `target` with
/// respect to the logits. For CE this is `softmax - onehot`; a TCE-masked
/// token yields the zero vector.
pub fn loss_grad_wrt_logits(logits: &[f64], target: usize, spec: &LossSpec) -> Result<Vec<f64>> {
    if target >= logits.len() {
        return Err(Error::TokenOutOfRange {
            token: target,
            vocab: logits.len(),
        });
    }
    let probs = softmax(logits);
    let mut grad = probs;
    let p_t = grad[target];
    grad_from_probs_in_place(&mut grad, target, p_t, spec);
    Ok(grad)
}

/// Overwrites `probs` (a softmax output) with the logit gradient. Returns
/// `false` if the token is masked, in which case `probs` is zeroed.
pub(crate) fn grad_from_probs_in_place(probs: &mut [f64], target: usize, p_t: f64, spec: &LossSpec) -> bool {
    let slope = loss_slope_times_p(spec, p_t);
    if slope == 0.0 && spec.is_masked(p_t) {
        probs.iter_mut().for_each(|g| *g = 0.0);
        return false;
    }
    // dL/dz_j = slope * (onehot_j - p_j)
    for (j, g) in probs.iter_mut().enumerate() {
        let onehot = if j == target { 1.0 } else { 0.0 };
        *g = slope * (onehot - *g);
    }
    true
}

/// Reconstruction term of the clipped ELBO: the sum of per-datum
/// log-likelihoods whose likelihood `exp(term)` is at most `gamma`.
pub fn clipped_elbo_recon(loglik_terms: &[f64], gamma: f64) -> f64 {
    loglik_terms.iter().filter(|t| t.exp() <= gamma).sum()
}
