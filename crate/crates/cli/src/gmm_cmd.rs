use std::io::Write;

use collapse_core::gmm::{run_gmm_loop, write_generations_csv, write_points_csv, ClusterDataset, EmOptions, GmmLoopConfig};
use rayon::prelude::*;

use crate::config::Config;
use crate::run::{median, scalar, RunDir};
use crate::CliError;

/// Directory name for one clipping arm, e.g. `q80`.
pub fn arm_name(q: f64) -> String {
    format!("q{q}")
}

pub fn run(cfg: &Config) -> Result<(), CliError> {
    let defaults = GmmLoopConfig::default();
    let name: String = cfg.get("run.name", "gmm".to_string())?;
    let seed: u64 = cfg.get("seed", 0)?;
    let seeds: usize = cfg.get("seeds", 5)?;
    let arms: Vec<f64> = cfg.get_list("gmm.clip_percentiles", &[100.0, 80.0])?;
    let scatter: Vec<usize> = cfg.get_list("gmm.scatter_generations", &[0, 10, 50])?;
    let base = GmmLoopConfig {
        k: cfg.get("gmm.k", defaults.k)?,
        n_samples: cfg.get("gmm.n_samples", defaults.n_samples)?,
        generations: cfg.get("gmm.generations", defaults.generations)?,
        clip_percentile: 100.0,
        em: EmOptions {
            max_iters: cfg.get("gmm.max_iters", defaults.em.max_iters)?,
            tol: cfg.get("gmm.tol", defaults.em.tol)?,
            reg_epsilon: cfg.get("gmm.reg_epsilon", defaults.em.reg_epsilon)?,
            seed: 0,
        },
        dataset: ClusterDataset::two_clusters(
            cfg.get("gmm.offset", 5.0)?,
            cfg.get("gmm.std", defaults.dataset.std)?,
            cfg.get("gmm.points_per_cluster", defaults.dataset.points_per_cluster)?,
        ),
        kl_samples: cfg.get("gmm.kl_samples", defaults.kl_samples)?,
        seed,
    };
    if seeds == 0 {
        return Err(Config::config_error("seeds", "must be >= 1"));
    }
    if arms.is_empty() {
        return Err(Config::config_error("gmm.clip_percentiles", "need at least one arm"));
    }
    for &q in &arms {
        GmmLoopConfig {
            clip_percentile: q,
            ..base.clone()
        }
        .validate()
        .map_err(|e| Config::config_error("gmm.clip_percentiles", e))?;
    }
    cfg.ensure_all_used()?;

    let mut run = RunDir::create("gmm", &name, seed)?;
    let jobs: Vec<(f64, u64)> = arms
        .iter()
        .flat_map(|&q| (0..seeds as u64).map(move |r| (q, seed + r)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(q, s)| {
            run_gmm_loop(&GmmLoopConfig {
                clip_percentile: q,
                seed: s,
                ..base.clone()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    for (&(q, s), gens) in jobs.iter().zip(&results) {
        let arm = arm_name(q);
        let mut out = run.file(&format!("{arm}/generations_seed{s}.csv"))?;
        write_generations_csv(gens, &mut out)?;
        out.flush()?;
        for &g in scatter.iter().filter(|&&g| g < gens.len()) {
            let mut out = run.file(&format!("{arm}/points_seed{s}_gen{g}.csv"))?;
            write_points_csv(&gens[g].points, &mut out)?;
            out.flush()?;
        }
    }

    for (i, &q) in arms.iter().enumerate() {
        let ratios: Vec<f64> = results[i * seeds..(i + 1) * seeds]
            .iter()
            .map(|g| g[g.len() - 1].trace / g[0].trace)
            .collect();
        println!("{}\t{}", arm_name(q), scalar(median(&ratios)));
    }
    run.finish(cfg.resolved())?;
    Ok(())
}
