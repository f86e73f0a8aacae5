//! A small fixed-window next-token model: token embeddings for the last `c`
//! tokens are concatenated, passed through one tanh layer, and projected to
//! vocabulary logits. Training is plain minibatch SGD under any [`LossSpec`].
//!
//! Token id 0 is reserved for padding: it fills short contexts, is never a
//! training target and is never generated.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::losses::{grad_from_probs_in_place, softmax, LossSpec, Reduction, TokenProbability, PROB_FLOOR};
use crate::rng::RngStream;

pub const PAD: usize = 0;

/// Checkpoint magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TINYLM\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters. Matrices are row-major:
/// `embedding` is `V x d`, `w_hidden` is `(c*d) x h`, `w_out` is `h x V`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLmParams {
    pub vocab_size: usize,
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub embedding: Vec<f64>,
    pub w_hidden: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.3,
            batch_size: 16,
            epochs: 100,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingPolicy {
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean per-token value of the training loss (masked tokens count as 0).
    pub mean_loss: f64,
    /// Mean per-token cross entropy, for comparing arms.
    pub mean_ce: f64,
    pub masked_fraction: f64,
    pub tokens: usize,
}

/// Intermediate values of one forward pass.
struct Activations {
    input: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn uniform_block(rng: &mut RngStream, len: usize, fan_in: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| (2.0 * rng.next_f64() - 1.0) * s).collect()
}

/// Weights uniform in `[-s, s]` with `s = 1/sqrt(fan_in)`; the embedding's
/// fan-in is the one-hot width `V`. Biases start at zero.
pub fn lm_init(
    vocab_size: usize,
    context: usize,
    embed_dim: usize,
    hidden_dim: usize,
    rng: &mut RngStream,
) -> Result<TinyLmParams> {
    if vocab_size < 2 || context == 0 || embed_dim == 0 || hidden_dim == 0 {
        return Err(Error::invalid(
            "dims",
            format!("need V >= 2 and c, d, h >= 1; got V={vocab_size} c={context} d={embed_dim} h={hidden_dim}"),
        ));
    }
    let embedding = uniform_block(rng, vocab_size * embed_dim, vocab_size);
    let w_hidden = uniform_block(rng, context * embed_dim * hidden_dim, context * embed_dim);
    let w_out = uniform_block(rng, hidden_dim * vocab_size, hidden_dim);
    Ok(TinyLmParams {
        vocab_size,
        context,
        embed_dim,
        hidden_dim,
        embedding,
        w_hidden,
        b_hidden: vec![0.0; hidden_dim],
        w_out,
        b_out: vec![0.0; vocab_size],
    })
}

/// The `c` tokens preceding position `pos`, left-padded.
pub fn context_at(tokens: &[usize], pos: usize, c: usize) -> Vec<usize> {
    (0..c)
        .map(|j| {
            let back = c - j;
            if pos >= back {
                tokens[pos - back]
            } else {
                PAD
            }
        })
        .collect()
}

impl TinyLmParams {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab_size) {
            Some(&t) => Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn blocks(&self) -> [&Vec<f64>; 5] {
        [&self.embedding, &self.w_hidden, &self.b_hidden, &self.w_out, &self.b_out]
    }

    fn logits_and_hidden(&self, context: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (d, h, v) = (self.embed_dim, self.hidden_dim, self.vocab_size);
        let mut input = Vec::with_capacity(context.len() * d);
        for &t in context {
            input.extend_from_slice(&self.embedding[t * d..(t + 1) * d]);
        }
        let mut hidden = self.b_hidden.clone();
        for (i, x) in input.iter().enumerate() {
            let row = &self.w_hidden[i * h..(i + 1) * h];
            for (acc, w) in hidden.iter_mut().zip(row) {
                *acc += x * w;
            }
        }
        hidden.iter_mut().for_each(|a| *a = a.tanh());
        let mut logits = self.b_out.clone();
        for (j, a) in hidden.iter().enumerate() {
            let row = &self.w_out[j * v..(j + 1) * v];
            for (acc, w) in logits.iter_mut().zip(row) {
                *acc += a * w;
            }
        }
        (logits, hidden, input)
    }

    fn activations(&self, context: &[usize]) -> Activations {
        let (logits, hidden, input) = self.logits_and_hidden(context);
        Activations {
            input,
            hidden,
            probs: softmax(&logits),
        }
    }

    /// Raw output logits for a context window.
    pub fn logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        Ok(self.logits_and_hidden(context).0)
    }

    fn check_context(&self, context: &[usize]) -> Result<()> {
        if context.len() != self.context {
            return Err(Error::LengthMismatch {
                what: "context window",
                left: context.len(),
                right: self.context,
            });
        }
        self.check_tokens(context)
    }
}

/// Next-token distribution for a window of exactly `c` tokens.
pub fn lm_forward(params: &TinyLmParams, context: &[usize]) -> Result<Vec<f64>> {
    params.check_context(context)?;
    Ok(params.activations(context).probs)
}

/// Every `(context, target)` pair of the corpus; padding is never a target.
fn training_pairs(corpus: &[Vec<usize>], c: usize) -> Vec<(Vec<usize>, usize)> {
    corpus
        .iter()
        .flat_map(|doc| {
            (0..doc.len())
                .filter(|&pos| doc[pos] != PAD)
                .map(move |pos| (context_at(doc, pos, c), doc[pos]))
        })
        .collect()
}

struct Gradients {
    embedding: Vec<f64>,
    w_hidden: Vec<f64>,
    b_hidden: Vec<f64>,
    w_out: Vec<f64>,
    b_out: Vec<f64>,
}

impl Gradients {
    fn zeros(p: &TinyLmParams) -> Self {
        Gradients {
            embedding: vec![0.0; p.embedding.len()],
            w_hidden: vec![0.0; p.w_hidden.len()],
            b_hidden: vec![0.0; p.b_hidden.len()],
            w_out: vec![0.0; p.w_out.len()],
            b_out: vec![0.0; p.b_out.len()],
        }
    }

    /// Backpropagates one example's logit gradient, scaled by `scale`.
    fn accumulate(&mut self, p: &TinyLmParams, ctx: &[usize], act: &Activations, dlogits: &[f64], scale: f64) {
        let (d, h, v) = (p.embed_dim, p.hidden_dim, p.vocab_size);
        let mut dhidden = vec![0.0; h];
        for (j, a) in act.hidden.iter().enumerate() {
            let row = j * v..(j + 1) * v;
            let mut acc = 0.0;
            for ((gw, w), g) in self.w_out[row.clone()].iter_mut().zip(&p.w_out[row]).zip(dlogits) {
                let g = g * scale;
                *gw += a * g;
                acc += w * g;
            }
            dhidden[j] = acc * (1.0 - a * a);
        }
        for (gb, g) in self.b_out.iter_mut().zip(dlogits) {
            *gb += g * scale;
        }
        for (gb, g) in self.b_hidden.iter_mut().zip(&dhidden) {
            *gb += g;
        }
        for (i, x) in act.input.iter().enumerate() {
            let row = i * h..(i + 1) * h;
            let mut dx = 0.0;
            for ((gw, w), g) in self.w_hidden[row.clone()].iter_mut().zip(&p.w_hidden[row]).zip(&dhidden) {
                *gw += x * g;
                dx += w * g;
            }
            let token = ctx[i / d];
            self.embedding[token * d + i % d] += dx;
        }
    }

    fn apply(&self, p: &mut TinyLmParams, lr: f64) {
        let pairs = [
            (&mut p.embedding, &self.embedding),
            (&mut p.w_hidden, &self.w_hidden),
            (&mut p.b_hidden, &self.b_hidden),
            (&mut p.w_out, &self.w_out),
            (&mut p.b_out, &self.b_out),
        ];
        for (param, grad) in pairs {
            for (w, g) in param.iter_mut().zip(grad) {
                *w -= lr * g;
            }
        }
    }
}

/// One epoch of minibatch SGD over every `(context, next token)` pair of the
/// corpus, in an order shuffled by `rng`. Masked tokens are dropped from the
/// batch before backpropagation, so they contribute exactly nothing.
pub fn lm_train_epoch(
    params: &mut TinyLmParams,
    corpus: &[Vec<usize>],
    spec: &LossSpec,
    hyper: &TrainHyper,
    rng: &mut RngStream,
) -> Result<EpochStats> {
    hyper.validate()?;
    for doc in corpus {
        params.check_tokens(doc)?;
    }
    let mut pairs = training_pairs(corpus, params.context);
    if pairs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    rng.shuffle(&mut pairs);

    let mut loss_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut masked = 0usize;
    for batch in pairs.chunks(hyper.batch_size) {
        let mut kept = Vec::with_capacity(batch.len());
        for (ctx, target) in batch {
            let act = params.activations(ctx);
            let p_t = act.probs[*target];
            let prob = TokenProbability::new(p_t.max(PROB_FLOOR)).expect("softmax output is a probability");
            ce_sum += -p_t.max(PROB_FLOOR).ln();
            if spec.is_masked(p_t) {
                masked += 1;
                continue;
            }
            loss_sum += spec.token_loss(prob);
            kept.push((ctx, *target, act));
        }
        if kept.is_empty() {
            continue;
        }
        let scale = match spec.reduction {
            Reduction::MeanOverUnmasked => 1.0 / kept.len() as f64,
            Reduction::MeanOverAll => 1.0 / batch.len() as f64,
            Reduction::Sum => 1.0,
        };
        let mut grads = Gradients::zeros(params);
        for (ctx, target, mut act) in kept {
            let mut dlogits = std::mem::take(&mut act.probs);
            let p_t = dlogits[target];
            grad_from_probs_in_place(&mut dlogits, target, p_t, spec);
            grads.accumulate(params, ctx, &act, &dlogits, scale);
        }
        grads.apply(params, hyper.learning_rate);
    }
    let n = pairs.len() as f64;
    Ok(EpochStats {
        mean_loss: loss_sum / n,
        mean_ce: ce_sum / n,
        masked_fraction: masked as f64 / n,
        tokens: pairs.len(),
    })
}

fn pick_token(probs: &mut [f64], policy: SamplingPolicy, rng: &mut RngStream) -> usize {
    probs[PAD] = 0.0;
    match policy {
        SamplingPolicy::Greedy => {
            let mut best = 1;
            for (t, &p) in probs.iter().enumerate().skip(1) {
                if p > probs[best] {
                    best = t;
                }
            }
            best
        }
        SamplingPolicy::Temperature(temp) => {
            if temp != 1.0 {
                probs.iter_mut().for_each(|p| *p = p.powf(1.0 / temp));
            }
            let total: f64 = probs.iter().sum();
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            for (t, &p) in probs.iter().enumerate() {
                acc += p;
                if acc > target && p > 0.0 {
                    return t;
                }
            }
            // rounding left the target past the last bucket
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(1)
        }
    }
}

/// Appends `length` generated tokens to `prefix`. Greedy breaks ties toward
/// the lowest token id.
pub fn lm_generate(
    params: &TinyLmParams,
    prefix: &[usize],
    length: usize,
    policy: SamplingPolicy,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    params.check_tokens(prefix)?;
    if let SamplingPolicy::Temperature(t) = policy {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid("temperature", format!("must be positive, got {t}")));
        }
    }
    let mut out = prefix.to_vec();
    for _ in 0..length {
        let ctx = context_at(&out, out.len(), params.context);
        let mut probs = params.activations(&ctx).probs;
        out.push(pick_token(&mut probs, policy, rng));
    }
    Ok(out)
}

/// `sum_j ln p(tokens[j] | preceding window)`, with left padding at the start.
pub fn sequence_log_prob(params: &TinyLmParams, tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    conditional_log_prob(params, &[], tokens)
}

/// Log probability of `continuation` given that `prefix` precedes it.
pub fn conditional_log_prob(params: &TinyLmParams, prefix: &[usize], continuation: &[usize]) -> Result<f64> {
    params.check_tokens(prefix)?;
    params.check_tokens(continuation)?;
    let mut seq = prefix.to_vec();
    seq.extend_from_slice(continuation);
    Ok((prefix.len()..seq.len())
        .map(|pos| {
            let ctx = context_at(&seq, pos, params.context);
            params.activations(&ctx).probs[seq[pos]].max(PROB_FLOOR).ln()
        })
        .sum())
}

pub const CONFIDENCE_BINS: usize = 20;

/// Distribution of the probability the model assigns to each realized token.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceProfile {
    pub mean: f64,
    pub histogram: [usize; CONFIDENCE_BINS],
    pub count: usize,
}

pub fn confidence_profile(params: &TinyLmParams, corpus: &[Vec<usize>]) -> Result<ConfidenceProfile> {
    let mut histogram = [0usize; CONFIDENCE_BINS];
    let mut sum = 0.0;
    let mut count = 0usize;
    for doc in corpus {
        params.check_tokens(doc)?;
        for pos in 0..doc.len() {
            if doc[pos] == PAD {
                continue;
            }
            let ctx = context_at(doc, pos, params.context);
            let p = params.activations(&ctx).probs[doc[pos]];
            let bin = ((p * CONFIDENCE_BINS as f64) as usize).min(CONFIDENCE_BINS - 1);
            histogram[bin] += 1;
            sum += p;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("corpus for confidence profile"));
    }
    Ok(ConfidenceProfile {
        mean: sum / count as f64,
        histogram,
        count,
    })
}

/// Writes a checkpoint: magic, `u32` version, then `V c d h` as `u32`, then
/// the five blocks (embedding, hidden weights, hidden bias, output weights,
/// output bias) as row-major `f64`, all little-endian.
pub fn write_checkpoint<W: Write>(params: &TinyLmParams, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for dim in [params.vocab_size, params.context, params.embed_dim, params.hidden_dim] {
        let dim = u32::try_from(dim).map_err(|_| Error::Checkpoint(format!("dimension {dim} exceeds u32")))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    for block in params.blocks() {
        for v in block {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<TinyLmParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    let mut read_u32 = |input: &mut R| -> Result<u32> {
        input.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(&mut input)? as usize;
    }
    let [v, c, d, h] = dims;
    if v < 2 || c == 0 || d == 0 || h == 0 {
        return Err(Error::Checkpoint(format!("invalid dimensions V={v} c={c} d={d} h={h}")));
    }
    let mut read_block = |len: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        input.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect())
    };
    Ok(TinyLmParams {
        vocab_size: v,
        context: c,
        embed_dim: d,
        hidden_dim: h,
        embedding: read_block(v * d)?,
        w_hidden: read_block(c * d * h)?,
        b_hidden: read_block(h)?,
        w_out: read_block(h * v)?,
        b_out: read_block(v)?,
    })
}
