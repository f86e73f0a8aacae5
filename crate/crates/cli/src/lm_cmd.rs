use std::io::Write;

use collapse_core::corpus::{make_splits, write_corpus_text, write_questions_tsv, CorpusConfig};
use collapse_core::framework::{run_stages, ExperimentConfig, ExperimentRun, LmDims};
use collapse_core::losses::{LossSpec, Reduction};
use collapse_core::metrics::{time_to_failure, DEFAULT_FAILURE_THRESHOLD};
use collapse_core::tinylm::{write_checkpoint, SamplingPolicy, TrainHyper};
use rayon::prelude::*;

use crate::config::Config;
use crate::run::{f, median, scalar, RunDir};
use crate::CliError;

pub const STAGES_HEADER: &str = "stage,real_docs,synthetic_docs,real_fraction,split0_generation,kr_split0,kr_total,\
kl_unigram,kl_bigram,conf_self,conf_heldout,masked_fraction,mean_loss";
pub const SUMMARY_HEADER: &str =
    "arm,seed,time_to_failure,final_kr_split0,final_kr_total,final_kl_unigram,final_kl_bigram";

/// Parses an arm such as `ce`, `tce:0.9` or `focal:2`.
pub fn parse_arm(text: &str) -> Result<LossSpec, String> {
    let number = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    match text.split_once(':') {
        None if text == "ce" => Ok(LossSpec::cross_entropy()),
        Some(("tce", g)) => LossSpec::truncated(number(g)?).map_err(|e| e.to_string()),
        Some(("focal", e)) => LossSpec::focal(number(e)?).map_err(|e| e.to_string()),
        _ => Err(format!("unknown arm `{text}` (expected ce, tce:<gamma> or focal:<exponent>)")),
    }
}

fn parse_policy(text: &str) -> Result<SamplingPolicy, String> {
    match text.split_once(':') {
        None if text == "greedy" => Ok(SamplingPolicy::Greedy),
        Some(("temperature", t)) => match t.trim().parse::<f64>() {
            Ok(t) if t > 0.0 && t.is_finite() => Ok(SamplingPolicy::Temperature(t)),
            _ => Err(format!("temperature must be a positive number, got `{t}`")),
        },
        _ => Err(format!("unknown policy `{text}` (expected greedy or temperature:<t>)")),
    }
}

fn parse_reduction(text: &str) -> Result<Reduction, String> {
    match text {
        "mean_unmasked" => Ok(Reduction::MeanOverUnmasked),
        "mean_all" => Ok(Reduction::MeanOverAll),
        "sum" => Ok(Reduction::Sum),
        other => Err(format!("unknown reduction `{other}` (expected mean_unmasked, mean_all or sum)")),
    }
}

fn write_arm(run: &mut RunDir, dir: &str, exp: &ExperimentRun) -> Result<(), CliError> {
    let mut out = run.file(&format!("{dir}/stages.csv"))?;
    writeln!(out, "{STAGES_HEADER}")?;
    for r in &exp.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.stage,
            r.real_docs,
            r.synthetic_docs,
            f(r.real_fraction()),
            r.split_generations[0],
            f(r.kr_splits[0]),
            f(r.kr_total),
            f(r.kl_unigram),
            f(r.kl_bigram),
            f(r.conf_self),
            f(r.conf_heldout.unwrap_or(f64::NAN)),
            f(r.masked_fraction),
            f(r.mean_loss),
        )?;
    }
    out.flush()?;

    let mut out = run.file(&format!("{dir}/kr_splits.csv"))?;
    writeln!(out, "stage,split,score")?;
    for r in &exp.records {
        for (k, score) in r.kr_splits.iter().enumerate() {
            writeln!(out, "{},{k},{}", r.stage, f(*score))?;
        }
    }
    out.flush()?;

    let mut out = run.file(&format!("{dir}/epoch_losses.csv"))?;
    writeln!(out, "stage,epoch,loss")?;
    for r in &exp.records {
        for (e, loss) in r.epoch_losses.iter().enumerate() {
            writeln!(out, "{},{e},{}", r.stage, f(*loss))?;
        }
    }
    out.flush()?;

    for (i, params) in exp.checkpoints.iter().enumerate() {
        let mut out = run.file(&format!("{dir}/checkpoints/stage{i}.bin"))?;
        write_checkpoint(params, &mut out)?;
        out.flush()?;
    }
    for (i, docs) in exp.split0_rewrites.iter().enumerate() {
        let mut out = run.file(&format!("{dir}/regen/split0_stage{i}.txt"))?;
        write_corpus_text(&exp.corpus.symbols, docs, &mut out)?;
        out.flush()?;
    }
    Ok(())
}

fn write_corpus(run: &mut RunDir, seed: u64, exp: &ExperimentRun, stages: usize) -> Result<(), CliError> {
    let dir = format!("corpus/seed{seed}");
    let corpus = &exp.corpus;
    let mut out = run.file(&format!("{dir}/corpus.txt"))?;
    write_corpus_text(&corpus.symbols, &corpus.documents, &mut out)?;
    out.flush()?;
    let mut out = run.file(&format!("{dir}/symbols.tsv"))?;
    corpus.symbols.write_tsv(&mut out)?;
    out.flush()?;
    let mut out = run.file(&format!("{dir}/questions.tsv"))?;
    write_questions_tsv(&corpus.questions, &mut out)?;
    out.flush()?;
    for split in make_splits(corpus, stages)? {
        let mut out = run.file(&format!("{dir}/questions_split{}.tsv", split.index))?;
        write_questions_tsv(&split.questions, &mut out)?;
        out.flush()?;
    }
    Ok(())
}

pub fn run(cfg: &Config) -> Result<(), CliError> {
    let defaults = ExperimentConfig::default();
    let name: String = cfg.get("run.name", "lm".to_string())?;
    let seed: u64 = cfg.get("seed", 0)?;
    let seeds: usize = cfg.get("seeds", 5)?;
    let arm_texts: Vec<String> = cfg.get_list("lm.arms", &["ce".into(), "tce:0.9".into(), "focal:2".into()])?;
    let reduction = parse_reduction(&cfg.get("lm.reduction", "mean_unmasked".to_string())?)
        .map_err(|e| Config::config_error("lm.reduction", e))?;
    let arms = arm_texts
        .iter()
        .map(|a| parse_arm(a).map(|s| s.with_reduction(reduction)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Config::config_error("lm.arms", e))?;
    let regen_policy =
        parse_policy(&cfg.get("lm.regen", "temperature:1".to_string())?).map_err(|e| Config::config_error("lm.regen", e))?;
    let tau: f64 = cfg.get("lm.tau", DEFAULT_FAILURE_THRESHOLD)?;
    let base = ExperimentConfig {
        stages: cfg.get("lm.stages", defaults.stages)?,
        loss: LossSpec::cross_entropy(),
        dims: LmDims {
            context: cfg.get("lm.context", defaults.dims.context)?,
            embed_dim: cfg.get("lm.embed_dim", defaults.dims.embed_dim)?,
            hidden_dim: cfg.get("lm.hidden_dim", defaults.dims.hidden_dim)?,
        },
        hyper: TrainHyper {
            learning_rate: cfg.get("lm.learning_rate", defaults.hyper.learning_rate)?,
            batch_size: cfg.get("lm.batch_size", defaults.hyper.batch_size)?,
            epochs: cfg.get("lm.epochs", defaults.hyper.epochs)?,
        },
        corpus: CorpusConfig {
            n_facts: cfg.get("corpus.n_facts", defaults.corpus.n_facts)?,
            n_subjects: cfg.get("corpus.n_subjects", defaults.corpus.n_subjects)?,
            n_objects: cfg.get("corpus.n_objects", defaults.corpus.n_objects)?,
        },
        regen_policy,
        prefix_fraction: cfg.get("lm.prefix_fraction", defaults.prefix_fraction)?,
        seed,
    };
    if seeds == 0 {
        return Err(Config::config_error("seeds", "must be >= 1"));
    }
    if arms.is_empty() {
        return Err(Config::config_error("lm.arms", "need at least one arm"));
    }
    let labels: Vec<String> = arms.iter().map(LossSpec::label).collect();
    if let Some(dup) = labels.iter().enumerate().find(|(i, l)| labels[..*i].contains(l)) {
        return Err(Config::config_error("lm.arms", format!("arm `{}` listed twice", dup.1)));
    }
    base.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.ensure_all_used()?;

    let mut run = RunDir::create("lm", &name, seed)?;
    let jobs: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|a| (0..seeds as u64).map(move |r| (a, seed + r)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(a, s)| {
            let config = ExperimentConfig {
                loss: arms[a],
                seed: s,
                ..base.clone()
            };
            run_stages(&config, &labels[a])
        })
        .collect::<Result<Vec<_>, _>>()?;

    for (&(a, s), exp) in jobs.iter().zip(&results) {
        if a == 0 {
            write_corpus(&mut run, s, exp, base.stages)?;
        }
        write_arm(&mut run, &format!("{}/seed{s}", labels[a]), exp)?;
    }

    let mut out = run.file("summary.csv")?;
    writeln!(out, "{SUMMARY_HEADER}")?;
    for (&(a, s), exp) in jobs.iter().zip(&results) {
        let last = exp.records.last().expect("at least one stage");
        let ttf = time_to_failure(&exp.kr_split0(), tau).map_or("none".to_string(), |t| t.to_string());
        writeln!(
            out,
            "{},{s},{ttf},{},{},{},{}",
            labels[a],
            f(last.kr_splits[0]),
            f(last.kr_total),
            f(last.kl_unigram),
            f(last.kl_bigram)
        )?;
    }
    out.flush()?;
    drop(out);

    let never = (base.stages + 1) as f64;
    for (a, label) in labels.iter().enumerate() {
        let mine: Vec<&ExperimentRun> = jobs.iter().zip(&results).filter(|((i, _), _)| *i == a).map(|(_, e)| e).collect();
        let ttf: Vec<f64> = mine
            .iter()
            .map(|e| time_to_failure(&e.kr_split0(), tau).map_or(never, |t| t as f64))
            .collect();
        let kl: Vec<f64> = mine.iter().map(|e| e.records.last().expect("stage").kl_unigram).collect();
        println!("{label}\t{}\t{}", scalar(median(&ttf)), scalar(median(&kl)));
    }
    run.finish(cfg.resolved())?;
    Ok(())
}
