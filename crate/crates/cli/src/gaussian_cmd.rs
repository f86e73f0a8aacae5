use std::io::Write;

use collapse_core::gaussian_loop::{
    analytic_variance_trajectory, confidence_threshold_to_tail, run_gaussian_loop, Estimator, GaussianLoopConfig,
    SampleFilter,
};
use collapse_core::mathcore::{stabilizing_threshold, SamplingBias, TailThreshold};

use crate::config::Config;
use crate::run::{f, scalar, RunDir};
use crate::CliError;

fn parse_filter(text: &str, lambda: SamplingBias) -> Result<SampleFilter, CliError> {
    const KEY: &str = "gaussian.filter";
    let bad = |reason: String| Config::config_error(KEY, reason);
    let number = |v: &str| v.trim().parse::<f64>().map_err(|e| bad(format!("`{v}`: {e}")));
    match text.split_once(':') {
        None if text == "none" => Ok(SampleFilter::None),
        None if text == "stabilizing" => Ok(SampleFilter::Tail(stabilizing_threshold(lambda))),
        Some(("tail", a)) => Ok(SampleFilter::Tail(TailThreshold::new(number(a)?).map_err(|e| bad(e.to_string()))?)),
        Some(("confidence", g)) => {
            let g = number(g)?;
            confidence_threshold_to_tail(g).map_err(|e| bad(e.to_string()))?;
            Ok(SampleFilter::Confidence(g))
        }
        _ => Err(bad(format!(
            "unknown filter `{text}` (expected none, stabilizing, tail:<a> or confidence:<gamma>)"
        ))),
    }
}

pub fn run(cfg: &Config) -> Result<(), CliError> {
    let name: String = cfg.get("run.name", "gaussian".to_string())?;
    let seed: u64 = cfg.get("seed", 0)?;
    let seeds: usize = cfg.get("seeds", 1)?;
    let lambda_raw: f64 = cfg.get("gaussian.lambda", 0.9)?;
    let lambda = SamplingBias::new(lambda_raw).map_err(|e| Config::config_error("gaussian.lambda", e))?;
    let filter = parse_filter(&cfg.get("gaussian.filter", "none".to_string())?, lambda)?;
    let estimator = match cfg.get("gaussian.estimator", "perfect".to_string())?.as_str() {
        "perfect" => Estimator::Perfect,
        "noisy" => Estimator::Noisy,
        other => return Err(Config::config_error("gaussian.estimator", format!("unknown estimator `{other}`"))),
    };
    let base = GaussianLoopConfig {
        mu0: cfg.get("gaussian.mu0", 0.0)?,
        sigma0: cfg.get("gaussian.sigma0", 1.0)?,
        n_samples: cfg.get("gaussian.n_samples", 10_000)?,
        generations: cfg.get("gaussian.generations", 100)?,
        lambda,
        filter,
        estimator,
        seed,
    };
    if seeds == 0 {
        return Err(Config::config_error("seeds", "must be >= 1"));
    }
    base.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.ensure_all_used()?;

    let mut run = RunDir::create("gaussian", &name, seed)?;
    let mut finals = Vec::with_capacity(seeds);
    for r in 0..seeds as u64 {
        let config = GaussianLoopConfig {
            seed: seed + r,
            ..base.clone()
        };
        let traj = run_gaussian_loop(&config)?;
        let mut out = run.file(&format!("trajectory_seed{}.csv", seed + r))?;
        traj.write_csv(&mut out)?;
        out.flush()?;
        finals.push(traj.last().sigma_hat);
    }

    let a = match base.filter {
        SampleFilter::None => TailThreshold::NONE,
        SampleFilter::Tail(a) => a,
        SampleFilter::Confidence(g) => confidence_threshold_to_tail(g)?,
    };
    let mut out = run.file("analytic.csv")?;
    writeln!(out, "generation,sigma")?;
    let analytic = analytic_variance_trajectory(base.sigma0 * base.sigma0, lambda, a, base.generations);
    for (t, v) in analytic.iter().enumerate() {
        writeln!(out, "{t},{}", f(v.sqrt()))?;
    }
    out.flush()?;
    drop(out);

    let mean_final = finals.iter().sum::<f64>() / finals.len() as f64;
    println!("{}", scalar(mean_final));
    run.finish(cfg.resolved())?;
    Ok(())
}
