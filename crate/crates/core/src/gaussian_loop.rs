//! One-dimensional Gaussian trained recursively on its own samples.
//!
//! Each generation draws `n_samples` points from the current model, optionally
//! keeps only tail samples, refits mean and variance, and shrinks the fitted
//! standard deviation by `sqrt(lambda)`. Under a tail filter with threshold `a`
//! the expected variance evolves as `var_{t+1} = lambda * eta(a) * var_t`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::mathcore::{eta, sample_normal, SamplingBias, TailThreshold};
use crate::rng::RngStream;

/// Variance floor applied to noisy estimates.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleFilter {
    None,
    Tail(TailThreshold),
    /// Keep samples whose normalized density `exp(-(x-mu)^2 / (2 sigma^2))`
    /// is at most `gamma_c`.
    Confidence(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Perfect,
    Noisy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLoopConfig {
    pub mu0: f64,
    pub sigma0: f64,
    pub n_samples: usize,
    pub generations: usize,
    pub lambda: SamplingBias,
    pub filter: SampleFilter,
    pub estimator: Estimator,
    pub seed: u64,
}

impl GaussianLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::invalid("sigma0", format!("must be positive, got {}", self.sigma0)));
        }
        if !self.mu0.is_finite() {
            return Err(Error::invalid("mu0", "must be finite"));
        }
        if self.n_samples < 2 {
            return Err(Error::invalid("n_samples", "need at least 2 samples per generation"));
        }
        if self.generations == 0 {
            return Err(Error::invalid("generations", "need at least 1 generation"));
        }
        if let SampleFilter::Confidence(g) = self.filter {
            confidence_threshold_to_tail(g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub retained_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTrajectory {
    pub records: Vec<GenerationRecord>,
    /// Set when a filter left fewer than two samples and the run stopped early.
    pub truncated: bool,
}

impl GaussianTrajectory {
    pub fn last(&self) -> &GenerationRecord {
        self.records.last().expect("trajectory always holds generation 0")
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.sigma_hat).collect()
    }

    /// Writes `generation,mu_hat,sigma_hat,retained_count`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "generation,mu_hat,sigma_hat,retained_count")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:.11e},{:.11e},{}",
                r.generation, r.mu_hat, r.sigma_hat, r.retained_count
            )?;
        }
        Ok(())
    }
}

/// Sample mean and `1/n` variance.
pub fn mle_fit(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::invalid("samples", format!("need at least 2 samples, got {}", samples.len())));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    Ok((mu, var))
}

/// [`mle_fit`] with independent standard-normal noise added to both
/// estimates. The variance is floored at [`VAR_FLOOR`].
pub fn noisy_fit(samples: &[f64], rng: &mut RngStream) -> Result<(f64, f64)> {
    let (mu, var) = mle_fit(samples)?;
    let mu = mu + rng.standard_normal();
    let var = (var + rng.standard_normal()).max(VAR_FLOOR);
    Ok((mu, var))
}

/// Keeps samples with `|x - mu| >= a * sigma`, preserving order.
pub fn tail_filter(samples: &[f64], mu: f64, sigma: f64, a: TailThreshold) -> Vec<f64> {
    let cut = a.get() * sigma;
    samples.iter().copied().filter(|x| (x - mu).abs() >= cut).collect()
}

/// Maps a density-confidence threshold to the equivalent tail threshold
/// `sqrt(-2 ln gamma_c)`.
pub fn confidence_threshold_to_tail(gamma_c: f64) -> Result<TailThreshold> {
    if !(gamma_c > 0.0 && gamma_c < 1.0) {
        return Err(Error::invalid("gamma_c", format!("must lie in (0, 1), got {gamma_c}")));
    }
    TailThreshold::new((-2.0 * gamma_c.ln()).sqrt())
}

pub fn confidence_filter(samples: &[f64], mu: f64, sigma: f64, gamma_c: f64) -> Result<Vec<f64>> {
    let a = confidence_threshold_to_tail(gamma_c)?;
    Ok(tail_filter(samples, mu, sigma, a))
}

pub fn run_gaussian_loop(config: &GaussianLoopConfig) -> Result<GaussianTrajectory> {
    config.validate()?;
    let mut sample_rng = RngStream::new(config.seed, 0);
    let mut noise_rng = RngStream::new(config.seed, 1);
    let shrink = config.lambda.get().sqrt();

    let mut mu = config.mu0;
    let mut sigma = config.sigma0;
    let mut records = Vec::with_capacity(config.generations + 1);
    records.push(GenerationRecord {
        generation: 0,
        mu_hat: mu,
        sigma_hat: sigma,
        retained_count: config.n_samples,
    });

    for t in 1..=config.generations {
        let drawn = sample_normal(&mut sample_rng, mu, sigma, config.n_samples)?;
        let kept = match config.filter {
            SampleFilter::None => drawn,
            SampleFilter::Tail(a) => tail_filter(&drawn, mu, sigma, a),
            SampleFilter::Confidence(g) => confidence_filter(&drawn, mu, sigma, g)?,
        };
        if kept.len() < 2 {
            return Ok(GaussianTrajectory { records, truncated: true });
        }
        let (mu_hat, var_hat) = match config.estimator {
            Estimator::Perfect => mle_fit(&kept)?,
            Estimator::Noisy => noisy_fit(&kept, &mut noise_rng)?,
        };
        mu = mu_hat;
        sigma = var_hat.sqrt() * shrink;
        records.push(GenerationRecord {
            generation: t,
            mu_hat: mu,
            sigma_hat: sigma,
            retained_count: kept.len(),
        });
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Ok(GaussianTrajectory { records, truncated: true });
        }
    }
    Ok(GaussianTrajectory { records, truncated: false })
}

/// Expected variance `var0 * (lambda * eta(a))^t` for `t = 0..=generations`.
pub fn analytic_variance_trajectory(
    var0: f64,
    lambda: SamplingBias,
    a: TailThreshold,
    generations: usize,
) -> Vec<f64> {
    let factor = lambda.get() * eta(a);
    let mut out = Vec::with_capacity(generations + 1);
    let mut v = var0;
    for _ in 0..=generations {
        out.push(v);
        v *= factor;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::stabilizing_threshold;
    use approx::assert_abs_diff_eq;

    fn base_config() -> GaussianLoopConfig {
        GaussianLoopConfig {
            mu0: 0.0,
            sigma0: 1.0,
            n_samples: 10_000,
            generations: 100,
            lambda: SamplingBias::new(0.9).unwrap(),
            filter: SampleFilter::None,
            estimator: Estimator::Perfect,
            seed: 1,
        }
    }

    #[test]
    fn mle_fit_examples() {
        assert_eq!(mle_fit(&[1.0, 1.0, 1.0]).unwrap(), (1.0, 0.0));
        assert_eq!(mle_fit(&[-1.0, 1.0]).unwrap(), (0.0, 1.0));
        assert!(mle_fit(&[1.0]).is_err());

        let xs = sample_normal(&mut RngStream::new(4, 0), 3.0, 2.0, 1_000_000).unwrap();
        let (mu, var) = mle_fit(&xs).unwrap();
        assert!((mu - 3.0).abs() < 0.02);
        assert!((var / 4.0 - 1.0).abs() < 0.02);
    }

    #[test]
    fn noisy_fit_is_deterministic_and_floored() {
        let data = [0.5, -0.25, 1.5, 2.0];
        let a = noisy_fit(&data, &mut RngStream::new(8, 0)).unwrap();
        let b = noisy_fit(&data, &mut RngStream::new(8, 0)).unwrap();
        assert_eq!(a, b);
        for seed in 0..200 {
            let (_, var) = noisy_fit(&[-1.0, 1.0], &mut RngStream::new(seed, 0)).unwrap();
            assert!(var >= VAR_FLOOR);
        }
    }

    #[test]
    fn noisy_fit_averages_to_mle() {
        // variance 18: the 1e-12 floor never binds for unit-variance noise
        let data = [-3.0, 3.0, 0.0, 6.0, -6.0];
        let (mu, var) = mle_fit(&data).unwrap();
        let n = 10_000;
        let (mut sm, mut sv) = (0.0, 0.0);
        for seed in 0..n {
            let (m, v) = noisy_fit(&data, &mut RngStream::new(seed, 0)).unwrap();
            sm += m;
            sv += v;
        }
        assert!((sm / n as f64 - mu).abs() < 0.05);
        assert!((sv / n as f64 - var).abs() < 0.05);
    }

    #[test]
    fn tail_filter_examples() {
        let a2 = TailThreshold::new(2.0).unwrap();
        assert_eq!(tail_filter(&[-3.0, 0.0, 3.0], 0.0, 1.0, a2), vec![-3.0, 3.0]);
        let xs = [0.3, -1.0, 0.0, 5.0];
        assert_eq!(tail_filter(&xs, 0.1, 2.0, TailThreshold::NONE), xs.to_vec());

        let draws = sample_normal(&mut RngStream::new(21, 0), 0.0, 1.0, 1_000_000).unwrap();
        let kept = tail_filter(&draws, 0.0, 1.0, TailThreshold::new(1.0).unwrap());
        let var = kept.iter().map(|x| x * x).sum::<f64>() / kept.len() as f64;
        assert!((var / 2.525_135_276 - 1.0).abs() < 0.02, "var = {var}");
    }

    #[test]
    fn confidence_filter_mapping() {
        let a = confidence_threshold_to_tail(0.85).unwrap();
        assert_abs_diff_eq!(a.get(), 0.570_120_916_118_282_6, epsilon = 1e-12);
        let near_one = confidence_threshold_to_tail(1.0 - 1e-12).unwrap();
        assert!(near_one.get() < 2e-6);
        assert!(confidence_filter(&[0.0, 3.0], 0.0, 1.0, 0.5).unwrap() == vec![3.0]);
        assert!(confidence_filter(&[0.0], 0.0, 1.0, 1.0).is_err());
        assert!(confidence_filter(&[0.0], 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn unfiltered_loop_collapses() {
        let traj = run_gaussian_loop(&base_config()).unwrap();
        assert_eq!(traj.records.len(), 101);
        assert_eq!(traj.records[0].sigma_hat, 1.0);
        assert!(traj.last().sigma_hat < 0.01);
    }

    #[test]
    fn stabilized_loop_holds_scale() {
        let a = stabilizing_threshold(SamplingBias::new(0.9).unwrap());
        let mut hits = 0;
        for seed in 0..5 {
            let cfg = GaussianLoopConfig {
                filter: SampleFilter::Tail(a),
                seed,
                ..base_config()
            };
            let s = run_gaussian_loop(&cfg).unwrap().last().sigma_hat;
            if (0.5..=2.0).contains(&s) {
                hits += 1;
            }
        }
        assert!(hits >= 4);
    }

    #[test]
    fn unbiased_loop_barely_drifts() {
        let cfg = GaussianLoopConfig {
            lambda: SamplingBias::new(1.0).unwrap(),
            n_samples: 1_000_000,
            generations: 10,
            ..base_config()
        };
        let s = run_gaussian_loop(&cfg).unwrap().last().sigma_hat;
        assert!((s - 1.0).abs() < 0.02);
    }

    #[test]
    fn early_stop_marks_truncation() {
        let cfg = GaussianLoopConfig {
            n_samples: 3,
            filter: SampleFilter::Tail(TailThreshold::new(6.0).unwrap()),
            ..base_config()
        };
        let traj = run_gaussian_loop(&cfg).unwrap();
        assert!(traj.truncated);
        assert_eq!(traj.records.len(), 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            GaussianLoopConfig { n_samples: 1, ..base_config() },
            GaussianLoopConfig { generations: 0, ..base_config() },
            GaussianLoopConfig { sigma0: 0.0, ..base_config() },
            GaussianLoopConfig { filter: SampleFilter::Confidence(1.0), ..base_config() },
        ] {
            assert!(run_gaussian_loop(&cfg).is_err());
        }
    }

    #[test]
    fn analytic_trajectory() {
        let l09 = SamplingBias::new(0.9).unwrap();
        let got = analytic_variance_trajectory(1.0, l09, TailThreshold::NONE, 2);
        assert_abs_diff_eq!(got[0], 1.0);
        assert_abs_diff_eq!(got[1], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(got[2], 0.81, epsilon = 1e-15);
        let flat = analytic_variance_trajectory(1.0, SamplingBias::new(1.0).unwrap(), TailThreshold::NONE, 7);
        assert!(flat.iter().all(|v| *v == 1.0));
        let stab = analytic_variance_trajectory(1.0, l09, stabilizing_threshold(l09), 50);
        assert!(stab.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn csv_layout() {
        let cfg = GaussianLoopConfig { generations: 2, n_samples: 10, ..base_config() };
        let mut buf = Vec::new();
        run_gaussian_loop(&cfg).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "generation,mu_hat,sigma_hat,retained_count");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
    }
}
