//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use collapse_core::framework::{run_stages, ExperimentConfig, ExperimentRun};
use collapse_core::gaussian_loop::{run_gaussian_loop, Estimator, GaussianLoopConfig, SampleFilter};
use collapse_core::gmm::{run_gmm_loop, GmmLoopConfig};
use collapse_core::losses::{batch_loss, ce, focal, loss_grad_wrt_logits, softmax, tce, LossSpec, TokenProbability};
use collapse_core::mathcore::{eta, stabilizing_threshold, SamplingBias, TailThreshold};
use collapse_core::metrics::{time_to_failure, DEFAULT_FAILURE_THRESHOLD};
use collapse_core::tinylm::{lm_init, lm_train_epoch, TinyLmParams, TrainHyper};
use collapse_core::RngStream;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `E[X^2 | X >= a]` for a standard normal by composite Simpson quadrature.
fn eta_by_quadrature(a: f64) -> f64 {
    let upper = a + 40.0;
    let n = 400_000;
    let h = (upper - a) / n as f64;
    let simpson = |g: &dyn Fn(f64) -> f64| {
        let mut s = g(a) + g(upper);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * g(a + i as f64 * h);
        }
        s * h / 3.0
    };
    let density = |x: f64| (-0.5 * x * x).exp();
    simpson(&|x| x * x * density(x)) / simpson(&density)
}

/// Sample variance of the standard-normal draws with `|x| >= a`.
fn eta_by_monte_carlo(a: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let kept: Vec<f64> = (0..draws)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .filter(|x| x.abs() >= a)
        .collect();
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    kept.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

fn criterion_1() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, a) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let module = eta(TailThreshold::new(a).unwrap());
        let mc = eta_by_monte_carlo(a, 1_000_000, 100 + i as u64);
        let rel = (module / mc - 1.0).abs();
        pass &= rel < 0.01;
        parts.push(format!("eta({a})={module:.6} mc={mc:.6} rel={rel:.2e}"));
    }
    let module = eta(TailThreshold::new(1.0).unwrap());
    let oracle = eta_by_quadrature(1.0);
    let diff = (module - oracle).abs();
    pass &= diff < 1e-6 && format!("{oracle:.5}") == "2.52514";
    parts.push(format!("quadrature eta(1)={oracle:.9} |diff|={diff:.1e}"));
    Outcome::new(pass, parts.join("; "))
}

fn gaussian(lambda: f64, a: f64, generations: usize, seed: u64) -> Vec<f64> {
    let traj = run_gaussian_loop(&GaussianLoopConfig {
        mu0: 0.0,
        sigma0: 1.0,
        n_samples: 10_000,
        generations,
        lambda: SamplingBias::new(lambda).unwrap(),
        filter: SampleFilter::Tail(TailThreshold::new(a).unwrap()),
        estimator: Estimator::Perfect,
        seed,
    })
    .unwrap();
    assert!(!traj.truncated);
    traj.sigmas()
}

fn criterion_2() -> Outcome {
    let a_star = stabilizing_threshold(SamplingBias::new(0.9).unwrap()).get();
    let mut pass = true;
    let mut parts = Vec::new();
    for a in [0.0, 0.5, a_star] {
        let expected = 0.9 * eta(TailThreshold::new(a).unwrap());
        let ratios: Vec<f64> = (0..20)
            .into_par_iter()
            .flat_map_iter(|seed| {
                let s = gaussian(0.9, a, 50, seed);
                (1..s.len()).map(move |t| (s[t] / s[t - 1]).powi(2)).collect::<Vec<_>>()
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let rel = (mean / expected - 1.0).abs();
        pass &= rel < 0.05;
        parts.push(format!("a={a:.4}: ratio={mean:.4} expected={expected:.4} rel={rel:.2e}"));
    }
    Outcome::new(pass, parts.join("; "))
}

fn criterion_3() -> Outcome {
    let finals = |a: f64| -> Vec<f64> { (0..5u64).into_par_iter().map(|s| *gaussian(0.9, a, 100, s).last().unwrap()).collect() };
    let a_star = stabilizing_threshold(SamplingBias::new(0.9).unwrap()).get();
    assert!(0.9 * eta(TailThreshold::new(0.5).unwrap()) > 1.05);

    let collapse = finals(0.0);
    let stable = finals(a_star);
    let diverge = finals(0.5);
    let collapsed = collapse.iter().all(|&s| s < 0.1);
    let in_band = stable.iter().filter(|&&s| (0.5..=2.0).contains(&s)).count();
    let diverge_mean = diverge.iter().sum::<f64>() / diverge.len() as f64;
    Outcome::new(
        collapsed && in_band >= 4 && diverge_mean > 2.0,
        format!(
            "collapse max sigma_T={:.3e}; stabilized in [0.5,2] {in_band}/5 {stable:.3?}; diverging mean sigma_T={diverge_mean:.3e}",
            collapse.iter().copied().fold(0.0, f64::max)
        ),
    )
}

fn flat(p: &TinyLmParams) -> Vec<f64> {
    [&p.embedding, &p.w_hidden, &p.b_hidden, &p.w_out, &p.b_out].map(|b| b.clone()).concat()
}

fn criterion_4() -> Outcome {
    let prob = |p: f64| TokenProbability::new(p).unwrap();
    let grid: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
    let mut rng = RngStream::new(4, 4);
    let logit_sets: Vec<Vec<f64>> = (0..200).map(|_| (0..7).map(|_| 3.0 * rng.standard_normal()).collect()).collect();

    let confident: Vec<(&Vec<f64>, usize)> = logit_sets
        .iter()
        .filter_map(|z| {
            let t = (0..z.len()).max_by(|&i, &j| z[i].total_cmp(&z[j])).unwrap();
            (softmax(z)[t] > 0.9).then_some((z, t))
        })
        .collect();
    let masked_zero = grid.iter().filter(|&&p| p > 0.9).all(|&p| tce(prob(p), 0.9) == 0.0)
        && !confident.is_empty()
        && confident
            .iter()
            .all(|(z, t)| loss_grad_wrt_logits(z, *t, &LossSpec::truncated(0.9).unwrap()).unwrap().iter().all(|&g| g == 0.0));
    let probs: Vec<TokenProbability> = grid.iter().map(|&p| prob(p)).collect();
    let unmasked: Vec<TokenProbability> = grid.iter().filter(|&&p| p <= 0.9).map(|&p| prob(p)).collect();
    let tce09 = LossSpec::truncated(0.9).unwrap();
    let batch_exact = batch_loss(&probs, &tce09).unwrap() == batch_loss(&unmasked, &tce09).unwrap();

    let memorized = vec![vec![2, 3, 4, 5, 6, 7, 1]];
    let fresh = vec![vec![8, 9, 10, 11]];
    let mut params = lm_init(12, 3, 6, 10, &mut RngStream::new(4, 0)).unwrap();
    let warm = TrainHyper {
        learning_rate: 0.3,
        batch_size: 8,
        epochs: 1,
    };
    let mut warm_rng = RngStream::new(1, 0);
    for _ in 0..200 {
        lm_train_epoch(&mut params, &memorized, &LossSpec::cross_entropy(), &warm, &mut warm_rng).unwrap();
    }
    let one_batch = TrainHyper {
        batch_size: 64,
        ..warm
    };
    let mixed: Vec<Vec<usize>> = memorized.iter().chain(&fresh).cloned().collect();
    let mut with_masked = params.clone();
    let stats = lm_train_epoch(&mut with_masked, &mixed, &tce09, &one_batch, &mut RngStream::new(0, 0)).unwrap();
    let mut without = params.clone();
    lm_train_epoch(&mut without, &fresh, &tce09, &one_batch, &mut RngStream::new(0, 0)).unwrap();
    let update_gap = flat(&with_masked)
        .iter()
        .zip(flat(&without))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let update_exact = stats.masked_fraction > 0.5 && update_gap <= 1e-12;

    let gamma_one = grid.iter().all(|&p| tce(prob(p), 1.0) == ce(prob(p)) && (ce(prob(p)) + p.ln()).abs() < 1e-15)
        && logit_sets.iter().all(|z| {
            (0..z.len()).all(|t| {
                loss_grad_wrt_logits(z, t, &LossSpec::truncated(1.0).unwrap()).unwrap()
                    == loss_grad_wrt_logits(z, t, &LossSpec::cross_entropy()).unwrap()
            })
        });
    let focal_zero = grid.iter().all(|&p| focal(prob(p), 0.0) == ce(prob(p)))
        && logit_sets.iter().all(|z| {
            (0..z.len()).all(|t| {
                let f = loss_grad_wrt_logits(z, t, &LossSpec::focal(0.0).unwrap()).unwrap();
                let c = loss_grad_wrt_logits(z, t, &LossSpec::cross_entropy()).unwrap();
                f.iter().zip(&c).all(|(a, b)| (a - b).abs() <= 1e-15)
            })
        });
    let focal_value = grid
        .iter()
        .filter(|&&p| p < 1.0)
        .all(|&p| (focal(prob(p), 2.0) - (-(1.0 - p).powi(2) * p.ln())).abs() <= 1e-12);

    let specs = [
        LossSpec::cross_entropy(),
        LossSpec::truncated(0.9).unwrap(),
        LossSpec::focal(2.0).unwrap(),
        LossSpec::focal(0.5).unwrap(),
    ];
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for spec in &specs {
        for z in &logit_sets {
            for t in 0..z.len() {
                let p_t = softmax(z)[t];
                if spec.is_masked(p_t) || (p_t - 0.9).abs() < 1e-3 || p_t > 1.0 - 1e-6 {
                    continue;
                }
                let loss = |z: &[f64]| spec.token_loss(prob(softmax(z)[t]));
                let h = 1e-5;
                let fd: Vec<f64> = (0..z.len())
                    .map(|j| {
                        let mut up = z.clone();
                        let mut down = z.clone();
                        up[j] += h;
                        down[j] -= h;
                        (loss(&up) - loss(&down)) / (2.0 * h)
                    })
                    .collect();
                let g = loss_grad_wrt_logits(z, t, spec).unwrap();
                let num = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
                if den > 1e-6 {
                    worst = worst.max(num / den);
                    checked += 1;
                }
            }
        }
    }
    let grad_ok = checked > 1000 && worst < 1e-5;

    Outcome::new(
        masked_zero && batch_exact && update_exact && gamma_one && focal_zero && focal_value && grad_ok,
        format!(
            "masking: zero grads {masked_zero} ({} masked cases), batch {batch_exact}, model update gap {update_gap:.1e}; \
             gamma=1 equals CE {gamma_one}; focal exponent 0 equals CE {focal_zero}; focal values {focal_value}; \
             finite-difference worst rel err {worst:.1e} over {checked} gradients",
            confident.len()
        ),
    )
}

fn criterion_5() -> Outcome {
    let arm = |q: f64| -> Vec<(f64, f64)> {
        (0..5u64)
            .into_par_iter()
            .map(|seed| {
                let gens = run_gmm_loop(&GmmLoopConfig {
                    clip_percentile: q,
                    generations: 50,
                    seed,
                    ..GmmLoopConfig::default()
                })
                .unwrap();
                (gens[0].trace, gens[50].trace)
            })
            .collect()
    };
    let base = arm(100.0);
    let clipped = arm(80.0);
    let collapsed = base.iter().filter(|(t0, t50)| t50 / t0 < 0.2).count();
    let retained = base.iter().zip(&clipped).filter(|(b, c)| c.1 > b.1).count();
    let ratios = |arm: &[(f64, f64)]| arm.iter().map(|(t0, t50)| t50 / t0).collect::<Vec<_>>();
    Outcome::new(
        collapsed >= 4 && retained >= 4,
        format!(
            "baseline gen-50 trace below 20% in {collapsed}/5 (ratios {:.3?}); q80 retains more in {retained}/5 (ratios {:.3?})",
            ratios(&base),
            ratios(&clipped)
        ),
    )
}

struct LmArms {
    ce: Vec<ExperimentRun>,
    tce: Vec<ExperimentRun>,
    focal: Vec<ExperimentRun>,
}

fn lm_arms() -> LmArms {
    let specs = [
        LossSpec::cross_entropy(),
        LossSpec::truncated(0.9).unwrap(),
        LossSpec::focal(2.0).unwrap(),
    ];
    let jobs: Vec<(usize, u64)> = (0..specs.len()).flat_map(|a| (0..5u64).map(move |s| (a, s))).collect();
    let mut runs: Vec<ExperimentRun> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let config = ExperimentConfig {
                loss: specs[a],
                seed,
                ..ExperimentConfig::default()
            };
            assert_eq!((config.corpus.n_facts, config.stages), (200, 5));
            run_stages(&config, &specs[a].label()).unwrap()
        })
        .collect();
    let focal = runs.split_off(10);
    let tce = runs.split_off(5);
    LmArms { ce: runs, tce, focal }
}

fn median_ttf(runs: &[ExperimentRun]) -> (f64, Vec<usize>) {
    let ttf: Vec<usize> = runs
        .iter()
        .map(|r| time_to_failure(&r.kr_split0(), DEFAULT_FAILURE_THRESHOLD).unwrap_or(r.records.len()))
        .collect();
    (median(&ttf.iter().map(|&t| t as f64).collect::<Vec<_>>()), ttf)
}

fn median_final_kl(runs: &[ExperimentRun]) -> f64 {
    median(&runs.iter().map(|r| r.records.last().unwrap().kl_unigram).collect::<Vec<_>>())
}

fn criterion_6(arms: &LmArms) -> Outcome {
    let (ce_ttf, ce_all) = median_ttf(&arms.ce);
    let (tce_ttf, tce_all) = median_ttf(&arms.tce);
    let (focal_ttf, focal_all) = median_ttf(&arms.focal);
    let ce_kl = median_final_kl(&arms.ce);
    let tce_kl = median_final_kl(&arms.tce);
    let a = tce_ttf >= ce_ttf;
    let b = tce_kl <= ce_kl;
    let c = focal_ttf >= ce_ttf;
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    Outcome::new(
        a && b && c,
        format!(
            "(a) {} median ttf TCE {tce_ttf} {tce_all:?} vs CE {ce_ttf} {ce_all:?}; \
             (b) {} median final unigram KL TCE {tce_kl:.4} vs CE {ce_kl:.4}; \
             (c) {} median ttf Focal {focal_ttf} {focal_all:?} vs CE {ce_ttf}",
            mark(a),
            mark(b),
            mark(c)
        ),
    )
}

fn criterion_7(arms: &LmArms) -> Outcome {
    let gaps: Vec<(f64, f64)> = arms
        .ce
        .iter()
        .map(|r| (r.records[0].conf_self, r.records[0].conf_heldout.unwrap()))
        .collect();
    let wins = gaps.iter().filter(|(s, h)| s > h).count();
    Outcome::new(wins == 5, format!("self > held-out in {wins}/5 seeds; (self, held-out) = {gaps:.4?}"))
}

fn criterion_8() -> Outcome {
    let mut config = ExperimentConfig {
        seed: 8,
        ..ExperimentConfig::default()
    };
    config.corpus.n_facts = 210;
    config.corpus.n_subjects = 210;
    config.hyper.epochs = 2;
    let run = run_stages(&config, "bookkeeping").unwrap();
    let fractions: Vec<f64> = run.records.iter().map(|r| r.real_fraction()).collect();
    let exact = run.records.len() == 6
        && run.records.iter().enumerate().all(|(i, r)| {
            r.real_docs * (i + 1) == r.real_docs + r.synthetic_docs && r.real_fraction() == 1.0 / (i + 1) as f64
        });
    let tags: Vec<usize> = run.records.iter().map(|r| r.split_generations[0]).collect();
    let tagged = tags.iter().enumerate().all(|(i, &g)| g == i);
    Outcome::new(exact && tagged, format!("real fractions {fractions:.4?}; split-0 generation tags {tags:?}"))
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "manifest.json") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_collapse-lab");
    let configs = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let path = configs.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    };
    let gaussian = write("gaussian.cfg", "seed = 3\nseeds = 2\ngaussian.filter = tail:0.5\ngaussian.estimator = noisy\ngaussian.n_samples = 2000\ngaussian.generations = 20\n");
    let gmm = write("gmm.cfg", "seed = 3\nseeds = 2\ngmm.generations = 6\ngmm.kl_samples = 500\ngmm.scatter_generations = 0, 6\n");
    let lm = write(
        "lm.cfg",
        "seed = 3\nseeds = 2\nlm.stages = 2\nlm.epochs = 4\ncorpus.n_facts = 30\ncorpus.n_subjects = 30\ncorpus.n_objects = 8\n",
    );

    let replay = |out: &Path| -> (Vec<Vec<u8>>, BTreeMap<PathBuf, Vec<u8>>) {
        let run = |args: &[&std::ffi::OsStr]| {
            let output = Command::new(bin).args(args).env("COLLAPSE_LAB_OUT", out).output().unwrap();
            assert!(output.status.success(), "{args:?}: {}", String::from_utf8_lossy(&output.stderr));
            output.stdout
        };
        let os = |s: &str| std::ffi::OsString::from(s);
        let mut stdout = vec![
            run(&[&os("eta"), &os("--a"), &os("1.5")]),
            run(&[&os("stabilize"), &os("--lambda"), &os("0.7")]),
            run(&[&os("gaussian"), &os("--config"), gaussian.as_os_str()]),
            run(&[&os("gmm"), &os("--config"), gmm.as_os_str()]),
            run(&[&os("lm"), &os("--config"), lm.as_os_str()]),
        ];
        let checkpoint = out.join("lm/ce/seed3/checkpoints/stage2.bin");
        let questions = out.join("lm/corpus/seed3/questions_split0.tsv");
        stdout.push(run(&[&os("kr-eval"), &os("--checkpoint"), checkpoint.as_os_str(), &os("--questions"), questions.as_os_str()]));
        for name in ["gaussian", "gmm", "lm"] {
            stdout.push(run(&[&os("report"), &os("--run"), out.join(name).as_os_str(), &os("--svg")]));
        }
        (stdout, files_under(out))
    };
    let first_dir = tempfile::tempdir().unwrap();
    let second_dir = tempfile::tempdir().unwrap();
    let (stdout_a, files_a) = replay(first_dir.path());
    let (stdout_b, files_b) = replay(second_dir.path());
    let csvs = files_a.keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    let differing: Vec<&PathBuf> = files_a
        .iter()
        .filter(|(p, bytes)| files_b.get(*p) != Some(bytes))
        .map(|(p, _)| p)
        .chain(files_b.keys().filter(|p| !files_a.contains_key(*p)))
        .collect();
    Outcome::new(
        differing.is_empty() && stdout_a == stdout_b && csvs > 20,
        format!(
            "{} files ({csvs} CSVs) over 9 invocations; stdout identical {}; differing files {differing:?}",
            files_a.len(),
            stdout_a == stdout_b
        ),
    )
}

fn main() {
    let mut outcomes: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        outcomes.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    let arms = lm_arms();
    report(6, criterion_6(&arms));
    report(7, criterion_7(&arms));
    report(8, criterion_8());
    report(9, criterion_9());

    let failed: Vec<usize> = outcomes.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", outcomes.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
