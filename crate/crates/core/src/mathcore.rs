//! Standard and truncated normal statistics, normal sampling and percentiles.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Truncation point `a`, in standard deviations. Samples with `|x - mu| >= a*sigma`
/// are kept by a tail filter.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TailThreshold(f64);

impl TailThreshold {
    pub const NONE: TailThreshold = TailThreshold(0.0);

    pub fn new(a: f64) -> Result<Self> {
        if a.is_finite() && a >= 0.0 {
            Ok(TailThreshold(a))
        } else {
            Err(Error::invalid("a", format!("tail threshold must be finite and >= 0, got {a}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Per-generation contraction `lambda` of the estimated variance, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SamplingBias(f64);

impl SamplingBias {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda > 0.0 && lambda <= 1.0 {
            Ok(SamplingBias(lambda))
        } else {
            Err(Error::invalid("lambda", format!("sampling bias must lie in (0, 1], got {lambda}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `Phi(x) = erfc(-x / sqrt 2) / 2`.
///
/// `erfc` is the fdlibm/musl implementation (piecewise rational minimax fits,
/// error below 1 ulp), which keeps the upper tail accurate in relative terms.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Phi(x)`, computed without cancellation.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Variance amplification of a standard normal conditioned on `|X| >= a`:
/// `1 + a*phi(a) / (1 - Phi(a))`.
pub fn eta(a: TailThreshold) -> f64 {
    let a = a.get();
    if a == 0.0 {
        return 1.0;
    }
    let tail = std_normal_sf(a);
    if tail > 0.0 {
        1.0 + a * std_normal_pdf(a) / tail
    } else {
        // Mills-ratio asymptote once the tail underflows (a > ~37).
        1.0 + a * a + 1.0
    }
}

/// Truncation level `a` at which `lambda * eta(a) = 1`, found by bisection on
/// the monotone map `a -> lambda * eta(a)`.
pub fn stabilizing_threshold(lambda: SamplingBias) -> TailThreshold {
    let lambda = lambda.get();
    let target = 1.0 / lambda;
    if lambda >= 1.0 {
        return TailThreshold::NONE;
    }
    let f = |a: f64| lambda * eta(TailThreshold(a)) - 1.0;

    let mut lo = 0.0;
    let mut hi = 1.0;
    while eta(TailThreshold(hi)) < target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() < 1e-12 || hi - lo <= f64::EPSILON * hi {
            return TailThreshold(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    TailThreshold(0.5 * (lo + hi))
}

/// `n` draws from `N(mu, sigma^2)` using the stream's Box–Muller normals.
pub fn sample_normal(rng: &mut RngStream, mu: f64, sigma: f64, n: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("must be positive and finite, got {sigma}")));
    }
    if n == 0 {
        return Err(Error::invalid("n", "sample count must be >= 1"));
    }
    Ok((0..n).map(|_| mu + sigma * rng.standard_normal()).collect())
}

/// Nearest-rank percentile: the `ceil(q/100 * n)`-th smallest value, with
/// `q = 0` giving the minimum.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of an empty vector"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid("q", format!("percentile must lie in [0, 100], got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
