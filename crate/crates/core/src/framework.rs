//! Staged training on a corpus that is progressively rewritten by the model.
//!
//! The corpus is cut into `N + 1` splits. At stage `i` the model trains on
//! the fresh split `i` together with every earlier split, each of which has
//! already been rewritten by the previous models. After training, every split
//! seen so far is regenerated by the current model: the first part of each
//! document is kept and the rest is generated.

use crate::corpus::{make_fact_corpus, make_splits, CorpusConfig, Document, FactCorpus, KrQuestion, Split};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::metrics::{corpus_kl, kr_score, DEFAULT_SMOOTHING};
use crate::rng::RngStream;
use crate::tinylm::{confidence_profile, lm_generate, lm_init, lm_train_epoch, SamplingPolicy, TinyLmParams, TrainHyper};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmDims {
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for LmDims {
    fn default() -> Self {
        LmDims {
            context: 4,
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Number of synthetic stages; the corpus is cut into `stages + 1` splits.
    pub stages: usize,
    pub loss: LossSpec,
    pub dims: LmDims,
    pub hyper: TrainHyper,
    pub corpus: CorpusConfig,
    pub regen_policy: SamplingPolicy,
    pub prefix_fraction: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stages: 5,
            loss: LossSpec::cross_entropy(),
            dims: LmDims::default(),
            hyper: TrainHyper::default(),
            corpus: CorpusConfig::default(),
            regen_policy: SamplingPolicy::Temperature(1.0),
            prefix_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::invalid("stages", format!("must be >= 2, got {}", self.stages)));
        }
        if !(self.prefix_fraction > 0.0 && self.prefix_fraction <= 1.0) {
            return Err(Error::invalid(
                "prefix_fraction",
                format!("must lie in (0, 1], got {}", self.prefix_fraction),
            ));
        }
        if self.corpus.n_facts < self.stages + 1 {
            return Err(Error::invalid(
                "n_facts",
                format!("need at least one fact per split ({} < {})", self.corpus.n_facts, self.stages + 1),
            ));
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub real_docs: usize,
    pub synthetic_docs: usize,
    /// Generation tag of each split in the stage's training set.
    pub split_generations: Vec<usize>,
    /// Retention score on the questions of each split trained on so far.
    pub kr_splits: Vec<f64>,
    pub kr_total: f64,
    /// KL from split 0 as written to this stage's regeneration of it.
    pub kl_unigram: f64,
    pub kl_bigram: f64,
    /// Mean confidence on the model's own greedy rewrite of split 0.
    pub conf_self: f64,
    /// Mean confidence on the next, still unseen, real split.
    pub conf_heldout: Option<f64>,
    pub masked_fraction: f64,
    pub mean_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl StageRecord {
    pub fn real_fraction(&self) -> f64 {
        self.real_docs as f64 / (self.real_docs + self.synthetic_docs) as f64
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub corpus: FactCorpus,
    pub records: Vec<StageRecord>,
    /// The model after each stage.
    pub checkpoints: Vec<TinyLmParams>,
    /// Split 0 as rewritten after each stage.
    pub split0_rewrites: Vec<Vec<Document>>,
}

impl ExperimentRun {
    pub fn kr_split0(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.kr_splits[0]).collect()
    }

    pub fn kr_total(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.kr_total).collect()
    }
}

/// Keeps the first `max(ceil(fraction * len), 2)` tokens of every document
/// (or all of a shorter one) and generates the remainder.
pub fn regenerate_split(
    params: &TinyLmParams,
    split: &Split,
    policy: SamplingPolicy,
    prefix_fraction: f64,
    rng: &mut RngStream,
) -> Result<Split> {
    if !(prefix_fraction > 0.0 && prefix_fraction <= 1.0) {
        return Err(Error::invalid("prefix_fraction", format!("must lie in (0, 1], got {prefix_fraction}")));
    }
    let documents = split
        .documents
        .iter()
        .map(|doc| {
            let keep = ((prefix_fraction * doc.len() as f64).ceil() as usize).max(2).min(doc.len());
            lm_generate(params, &doc[..keep], doc.len() - keep, policy, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        index: split.index,
        generation: split.generation + 1,
        documents,
        questions: split.questions.clone(),
    })
}

fn docs_of(splits: &[Split]) -> Vec<Document> {
    splits.iter().flat_map(|s| s.documents.iter().cloned()).collect()
}

/// Runs stages `0..=N`. The corpus and initial weights depend only on the
/// seed; training order and regeneration also depend on `arm`, so arms
/// sharing a seed start from identical data and weights.
pub fn run_stages(config: &ExperimentConfig, arm: &str) -> Result<ExperimentRun> {
    config.validate()?;
    let seed = config.seed;
    let cc = config.corpus;
    let corpus = make_fact_corpus(cc.n_facts, cc.n_subjects, cc.n_objects, &mut RngStream::from_label(seed, "corpus"))?;
    let real = make_splits(&corpus, config.stages)?;
    let dims = config.dims;
    let mut params = lm_init(
        corpus.symbols.len(),
        dims.context,
        dims.embed_dim,
        dims.hidden_dim,
        &mut RngStream::from_label(seed, "init"),
    )?;
    let arm_rng = RngStream::from_label(seed, "arm");
    let mut train_rng = arm_rng.fork(&format!("{arm}/train"));
    let mut regen_rng = arm_rng.fork(&format!("{arm}/regen"));
    let mut probe_rng = arm_rng.fork(&format!("{arm}/probe"));

    let vocab = corpus.symbols.len();
    let mut current: Vec<Split> = Vec::new();
    let mut records = Vec::with_capacity(config.stages + 1);
    let mut checkpoints = Vec::with_capacity(config.stages + 1);
    let mut split0_rewrites = Vec::with_capacity(config.stages + 1);

    for stage in 0..=config.stages {
        current.push(real[stage].clone());
        let training = docs_of(&current);
        let at = |e: Error| Error::AtGeneration {
            generation: stage,
            source: Box::new(e),
        };

        let mut epoch_losses = Vec::with_capacity(config.hyper.epochs);
        let mut last = None;
        for _ in 0..config.hyper.epochs {
            let stats = lm_train_epoch(&mut params, &training, &config.loss, &config.hyper, &mut train_rng).map_err(at)?;
            if !params.all_finite() {
                return Err(at(Error::invalid("parameters", "training produced non-finite weights")));
            }
            epoch_losses.push(stats.mean_loss);
            last = Some(stats);
        }
        let last = last.expect("at least one epoch");

        let kr_splits = current
            .iter()
            .map(|s| kr_score(&params, &s.questions))
            .collect::<Result<Vec<_>>>()
            .map_err(at)?;
        let all_questions: Vec<KrQuestion> = current.iter().flat_map(|s| s.questions.iter().cloned()).collect();
        let kr_total = kr_score(&params, &all_questions).map_err(at)?;

        let self_rewrite = regenerate_split(&params, &real[0], SamplingPolicy::Greedy, config.prefix_fraction, &mut probe_rng)
            .map_err(at)?;
        let conf_self = confidence_profile(&params, &self_rewrite.documents).map_err(at)?.mean;
        let conf_heldout = match real.get(stage + 1) {
            Some(next) => Some(confidence_profile(&params, &next.documents).map_err(at)?.mean),
            None => None,
        };

        let real_docs = current[stage].documents.len();
        let synthetic_docs = current[..stage].iter().map(|s| s.documents.len()).sum();
        let split_generations = current.iter().map(|s| s.generation).collect();

        for split in current.iter_mut() {
            *split = regenerate_split(&params, split, config.regen_policy, config.prefix_fraction, &mut regen_rng)
                .map_err(at)?;
        }
        let (kl_unigram, kl_bigram) =
            corpus_kl(&real[0].documents, &current[0].documents, vocab, DEFAULT_SMOOTHING).map_err(at)?;

        records.push(StageRecord {
            stage,
            real_docs,
            synthetic_docs,
            split_generations,
            kr_splits,
            kr_total,
            kl_unigram,
            kl_bigram,
            conf_self,
            conf_heldout,
            masked_fraction: last.masked_fraction,
            mean_loss: last.mean_loss,
            epoch_losses,
        });
        checkpoints.push(params.clone());
        split0_rewrites.push(current[0].documents.clone());
    }

    Ok(ExperimentRun {
        corpus,
        records,
        checkpoints,
        split0_rewrites,
    })
}
