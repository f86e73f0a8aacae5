//! Gaussian mixtures fitted by EM and retrained on their own samples.
//!
//! The recursive loop fits a mixture, samples from it, scores the samples
//! under the fitted model and keeps only those at or below the `q`-th
//! percentile of log-likelihood before the next fit. `q = 100` keeps every
//! sample and gives the unclipped baseline.

use std::f64::consts::PI;
use std::io::Write;

use itertools::Itertools;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::mathcore::percentile;
use crate::rng::{label_id, RngStream};

pub type Point = DVector<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Point>,
    pub covariances: Vec<DMatrix<f64>>,
}

/// Per-component quantities needed for density evaluation.
struct Prepared {
    log_weight: f64,
    mean: Point,
    chol: Cholesky<f64, Dyn>,
    lower: DMatrix<f64>,
    log_norm: f64,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Sum of the component covariance traces.
    pub fn total_trace(&self) -> f64 {
        self.covariances.iter().map(|c| c.trace()).sum()
    }

    fn prepare(&self) -> Result<Vec<Prepared>> {
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((&w, mean), cov)| {
                let chol = Cholesky::new(cov.clone())
                    .ok_or_else(|| Error::invalid("covariance", "not positive definite"))?;
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Ok(Prepared {
                    log_weight: w.ln(),
                    mean: mean.clone(),
                    lower: chol.l(),
                    chol,
                    log_norm: -0.5 * (d * (2.0 * PI).ln() + log_det),
                })
            })
            .collect()
    }
}

impl Prepared {
    fn log_density(&self, x: &Point) -> f64 {
        let diff = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once the mean per-point log-likelihood improves by less than this.
    pub tol: f64,
    /// Added to every covariance diagonal in each M-step.
    pub reg_epsilon: f64,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iters: 200,
            tol: 1e-6,
            reg_epsilon: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: GmmModel,
    /// Mean per-point log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// All points were identical; the model is a single regularized point mass.
    pub degenerate: bool,
}

fn check_points(points: &[Point]) -> Result<usize> {
    let first = points.first().ok_or(Error::Empty("point set"))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::invalid("points", "zero-dimensional points"));
    }
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::LengthMismatch {
            what: "point dimension",
            left: d,
            right: p.len(),
        });
    }
    Ok(d)
}

fn sample_covariance(points: &[Point], mean: &Point) -> DMatrix<f64> {
    let d = mean.len();
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let diff = p - mean;
        cov += &diff * diff.transpose();
    }
    cov / points.len() as f64
}

/// k-means++ seeding: the first center uniformly, the rest with probability
/// proportional to squared distance from the nearest chosen center.
fn kmeans_pp(points: &[Point], k: usize, rng: &mut RngStream) -> Vec<Point> {
    let mut centers = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&v| {
                    acc += v;
                    acc > target
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.below(points.len())
        };
        let c = points[idx].clone();
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min((p - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

/// M-step from a responsibility matrix (`resp[i][k]`). Components with
/// vanishing mass keep their previous mean and covariance.
fn m_step(points: &[Point], resp: &[Vec<f64>], prev: &GmmModel, reg: f64) -> GmmModel {
    let n = points.len() as f64;
    let k = prev.k();
    let d = prev.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut model = prev.clone();
    for c in 0..k {
        let nk: f64 = resp.iter().map(|r| r[c]).sum();
        model.weights[c] = nk / n;
        if nk < 1e-10 {
            continue;
        }
        let mut mean = DVector::zeros(d);
        for (p, r) in points.iter().zip(resp) {
            mean.axpy(r[c], p, 1.0);
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(d, d);
        for (p, r) in points.iter().zip(resp) {
            let diff = p - &mean;
            cov += r[c] * &diff * diff.transpose();
        }
        model.means[c] = mean;
        model.covariances[c] = cov / nk + &eye * reg;
    }
    let total: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= total);
    model
}

/// Responsibilities and mean log-likelihood under `model`.
fn e_step(points: &[Point], model: &GmmModel) -> Result<(Vec<Vec<f64>>, f64)> {
    let prepared = model.prepare()?;
    let mut total = 0.0;
    let mut comp = vec![0.0; prepared.len()];
    let resp = points
        .iter()
        .map(|x| {
            for (c, p) in comp.iter_mut().zip(&prepared) {
                *c = p.log_weight + p.log_density(x);
            }
            let lse = log_sum_exp(&comp);
            total += lse;
            comp.iter().map(|c| (c - lse).exp()).collect()
        })
        .collect();
    Ok((resp, total / points.len() as f64))
}

pub fn em_fit(points: &[Point], k: usize, opts: &EmOptions) -> Result<EmFit> {
    let d = check_points(points)?;
    if k == 0 {
        return Err(Error::invalid("k", "need at least one component"));
    }
    if points.len() < k * (d + 1) {
        return Err(Error::invalid(
            "points",
            format!("{} points are too few for {k} components in {d} dimensions", points.len()),
        ));
    }
    let eye = DMatrix::<f64>::identity(d, d);

    if points.iter().all(|p| p == &points[0]) {
        let model = GmmModel {
            weights: vec![1.0],
            means: vec![points[0].clone()],
            covariances: vec![&eye * opts.reg_epsilon],
        };
        let (_, ll) = e_step(points, &model)?;
        return Ok(EmFit {
            model,
            log_likelihood: vec![ll],
            converged: true,
            degenerate: true,
        });
    }

    let mut rng = RngStream::new(opts.seed, label_id("em-init"));
    let centers = kmeans_pp(points, k, &mut rng);
    let overall_mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / points.len() as f64;
    let overall_cov = sample_covariance(points, &overall_mean) + &eye * opts.reg_epsilon;
    let init = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: centers.clone(),
        covariances: vec![overall_cov; k],
    };
    // hard assignment to the nearest center for the first M-step
    let hard: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let nearest = centers
                .iter()
                .map(|c| (p - c).norm_squared())
                .position_min_by(f64::total_cmp)
                .unwrap_or(0);
            (0..k).map(|c| if c == nearest { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    let mut model = m_step(points, &hard, &init, opts.reg_epsilon);

    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 0..=opts.max_iters {
        let (resp, ll) = e_step(points, &model)?;
        let improved = trace.last().map(|prev| ll - prev);
        trace.push(ll);
        if matches!(improved, Some(delta) if delta < opts.tol) {
            converged = true;
            break;
        }
        if iter == opts.max_iters {
            break;
        }
        model = m_step(points, &resp, &model, opts.reg_epsilon);
    }
    Ok(EmFit {
        model,
        log_likelihood: trace,
        converged,
        degenerate: false,
    })
}

/// Per-point log density under the mixture.
pub fn gmm_log_likelihood(model: &GmmModel, points: &[Point]) -> Result<Vec<f64>> {
    let d = model.dim();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::LengthMismatch {
            what: "point dimension vs model dimension",
            left: p.len(),
            right: d,
        });
    }
    let prepared = model.prepare()?;
    let mut comp = vec![0.0; prepared.len()];
    Ok(points
        .iter()
        .map(|x| {
            for (c, p) in comp.iter_mut().zip(&prepared) {
                *c = p.log_weight + p.log_density(x);
            }
            log_sum_exp(&comp)
        })
        .collect())
}

/// Draws `n` points: a component by weight, then `mean + L z`.
pub fn gmm_sample(model: &GmmModel, n: usize, rng: &mut RngStream) -> Result<Vec<Point>> {
    let prepared = model.prepare()?;
    let d = model.dim();
    let cumulative: Vec<f64> = model
        .weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().expect("model has components");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.next_f64() * total;
        let c = cumulative.iter().position(|&cw| cw > u).unwrap_or(model.k() - 1);
        let z = DVector::from_fn(d, |_, _| rng.standard_normal());
        out.push(&prepared[c].mean + &prepared[c].lower * z);
    }
    Ok(out)
}

/// Keeps the points whose score is at most the nearest-rank `q`-th percentile
/// of `scores`; ties at the cut are kept.
pub fn clip_by_likelihood(points: &[Point], scores: &[f64], q: f64) -> Result<Vec<Point>> {
    if points.len() != scores.len() {
        return Err(Error::LengthMismatch {
            what: "points vs scores",
            left: points.len(),
            right: scores.len(),
        });
    }
    let cut = percentile(scores, q)?;
    Ok(points
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s <= cut)
        .map(|(p, _)| p.clone())
        .collect())
}

/// Isotropic Gaussian clusters used as the seed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataset {
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
    pub points_per_cluster: usize,
}

impl ClusterDataset {
    /// Two clusters at `(-offset, 0)` and `(offset, 0)`.
    pub fn two_clusters(offset: f64, std: f64, points_per_cluster: usize) -> Self {
        ClusterDataset {
            centers: vec![vec![-offset, 0.0], vec![offset, 0.0]],
            std,
            points_per_cluster,
        }
    }

    pub fn generate(&self, rng: &mut RngStream) -> Vec<Point> {
        self.centers
            .iter()
            .flat_map(|c| {
                (0..self.points_per_cluster)
                    .map(|_| DVector::from_iterator(c.len(), c.iter().map(|m| m + self.std * rng.standard_normal())))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmLoopConfig {
    pub k: usize,
    pub n_samples: usize,
    pub generations: usize,
    pub clip_percentile: f64,
    pub em: EmOptions,
    pub dataset: ClusterDataset,
    pub kl_samples: usize,
    pub seed: u64,
}

impl Default for GmmLoopConfig {
    fn default() -> Self {
        GmmLoopConfig {
            k: 2,
            n_samples: 40,
            generations: 50,
            clip_percentile: 80.0,
            em: EmOptions::default(),
            dataset: ClusterDataset::two_clusters(5.0, 1.0, 20),
            kl_samples: 10_000,
            seed: 0,
        }
    }
}

impl GmmLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generations == 0 {
            return Err(Error::invalid("generations", "need at least 1 generation"));
        }
        if !(0.0..=100.0).contains(&self.clip_percentile) {
            return Err(Error::invalid("clip_percentile", format!("must lie in [0, 100], got {}", self.clip_percentile)));
        }
        if self.k == 0 || self.n_samples == 0 || self.kl_samples == 0 {
            return Err(Error::invalid("gmm", "k, n_samples and kl_samples must be >= 1"));
        }
        if self.dataset.centers.is_empty() || self.dataset.points_per_cluster == 0 || !(self.dataset.std > 0.0 && self.dataset.std.is_finite()) {
            return Err(Error::invalid("dataset", "need at least one cluster, one point per cluster and std > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmGeneration {
    pub generation: usize,
    pub model: GmmModel,
    pub trace: f64,
    pub mean_displacement: f64,
    pub sym_kl: f64,
    /// Size of the dataset this generation's model was fitted on.
    pub points_kept: usize,
    /// That dataset, for scatter plots.
    pub points: Vec<Point>,
}

/// Smallest average distance between the two mean sets over all component
/// matchings.
pub fn mean_displacement(a: &GmmModel, b: &GmmModel) -> f64 {
    let k = a.k().min(b.k());
    (0..b.k())
        .permutations(k)
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| (&a.means[i] - &b.means[j]).norm())
                .sum::<f64>()
                / k as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Monte-Carlo `KL(p||q) + KL(q||p)` with `n` samples per direction.
pub fn symmetric_kl(p: &GmmModel, q: &GmmModel, n: usize, rng: &mut RngStream) -> Result<f64> {
    let mut one_way = |from: &GmmModel, to: &GmmModel| -> Result<f64> {
        let xs = gmm_sample(from, n, rng)?;
        let lf = gmm_log_likelihood(from, &xs)?;
        let lt = gmm_log_likelihood(to, &xs)?;
        Ok(lf.iter().zip(&lt).map(|(a, b)| a - b).sum::<f64>() / n as f64)
    };
    Ok(one_way(p, q)? + one_way(q, p)?)
}

pub fn run_gmm_loop(config: &GmmLoopConfig) -> Result<Vec<GmmGeneration>> {
    config.validate()?;
    let mut data_rng = RngStream::new(config.seed, label_id("gmm-data"));
    let mut sample_rng = RngStream::new(config.seed, label_id("gmm-sample"));

    let mut data = config.dataset.generate(&mut data_rng);
    let mut out: Vec<GmmGeneration> = Vec::with_capacity(config.generations + 1);
    for g in 0..=config.generations {
        let at = |e: Error| Error::AtGeneration {
            generation: g,
            source: Box::new(e),
        };
        let opts = EmOptions {
            seed: config.em.seed ^ config.seed.rotate_left(32) ^ g as u64,
            ..config.em
        };
        let fit = em_fit(&data, config.k, &opts).map_err(at)?;
        let model = fit.model;
        let (displacement, sym_kl) = match out.first() {
            None => (0.0, 0.0),
            Some(first) => {
                let mut kl_rng = RngStream::new(config.seed, label_id("gmm-kl") ^ g as u64);
                (
                    mean_displacement(&first.model, &model),
                    symmetric_kl(&first.model, &model, config.kl_samples, &mut kl_rng).map_err(at)?,
                )
            }
        };
        let next = if g < config.generations {
            let sampled = gmm_sample(&model, config.n_samples, &mut sample_rng).map_err(at)?;
            let scores = gmm_log_likelihood(&model, &sampled).map_err(at)?;
            clip_by_likelihood(&sampled, &scores, config.clip_percentile).map_err(at)?
        } else {
            Vec::new()
        };
        out.push(GmmGeneration {
            generation: g,
            trace: model.total_trace(),
            mean_displacement: displacement,
            sym_kl,
            points_kept: data.len(),
            points: std::mem::replace(&mut data, next),
            model,
        });
    }
    Ok(out)
}

/// Writes `generation,trace,mean_displacement,sym_kl,points_kept`.
pub fn write_generations_csv<W: Write>(gens: &[GmmGeneration], mut out: W) -> std::io::Result<()> {
    writeln!(out, "generation,trace,mean_displacement,sym_kl,points_kept")?;
    for g in gens {
        writeln!(
            out,
            "{},{:.11e},{:.11e},{:.11e},{}",
            g.generation, g.trace, g.mean_displacement, g.sym_kl, g.points_kept
        )?;
    }
    Ok(())
}

/// Writes one point set as `x,y` rows (first two coordinates).
pub fn write_points_csv<W: Write>(points: &[Point], mut out: W) -> std::io::Result<()> {
    writeln!(out, "x,y")?;
    for p in points {
        let y = if p.len() > 1 { p[1] } else { 0.0 };
        writeln!(out, "{:.11e},{:.11e}", p[0], y)?;
    }
    Ok(())
}
