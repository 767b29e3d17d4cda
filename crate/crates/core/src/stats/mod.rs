//! Sampling and probability primitives.

pub mod normal;

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic RNG used throughout; one independent stream per purpose.
pub type StreamRng = ChaCha8Rng;

/// splitmix64 finaliser.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a tuple of counters, used to derive seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// A ChaCha stream keyed by `seed` on stream number `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform on the open interval (0, 1).
#[inline]
pub fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
pub fn standard_normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    normal::quantile(open_unit(rng))
}

/// Normal distribution with mean `mu` and variance `delta2`, truncated to `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    pub mu: f64,
    pub delta2: f64,
    pub a: f64,
    pub b: f64,
}

impl TruncatedNormal {
    pub fn new(mu: f64, delta2: f64, a: f64, b: f64) -> Result<Self> {
        if !(delta2 > 0.0 && delta2.is_finite()) {
            return Err(Error::Domain("truncated normal variance must be positive"));
        }
        if !(a < b) || mu.is_nan() {
            return Err(Error::Domain("truncated normal needs a < b"));
        }
        Ok(TruncatedNormal { mu, delta2, a, b })
    }

    fn scale(&self) -> f64 {
        libm::sqrt(self.delta2)
    }

    fn standardized_bounds(&self) -> (f64, f64) {
        let s = self.scale();
        ((self.a - self.mu) / s, (self.b - self.mu) / s)
    }

    /// Normal mass inside `[a, b]`.
    pub fn mass(&self) -> f64 {
        let (alpha, beta) = self.standardized_bounds();
        if alpha > 0.0 {
            normal::sf(alpha) - normal::sf(beta)
        } else {
            normal::cdf(beta) - normal::cdf(alpha)
        }
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        if !(x >= self.a && x <= self.b) {
            return f64::NEG_INFINITY;
        }
        let s = self.scale();
        let z = (x - self.mu) / s;
        -0.5 * z * z - normal::HALF_LN_2PI - libm::log(s) - libm::log(self.mass())
    }

    /// Derivative of [`logpdf`](Self::logpdf) inside the support.
    pub fn dlogpdf(&self, x: f64) -> f64 {
        -(x - self.mu) / self.delta2
    }

    /// Inverse-CDF draw.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> f64 {
        let (alpha, beta) = self.standardized_bounds();
        let u = open_unit(rng);
        let s = self.scale();
        let z = if alpha > 0.0 {
            // Mirror into the lower tail to keep precision.
            let lo = normal::cdf(-beta);
            let hi = normal::cdf(-alpha);
            -normal::quantile(lo + u * (hi - lo))
        } else {
            let lo = normal::cdf(alpha);
            let hi = normal::cdf(beta);
            normal::quantile(lo + u * (hi - lo))
        };
        (self.mu + s * z).clamp(self.a, self.b)
    }

    pub fn mean(&self) -> f64 {
        let (alpha, beta) = self.standardized_bounds();
        self.mu + self.scale() * (normal::pdf(alpha) - normal::pdf(beta)) / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let (alpha, beta) = self.standardized_bounds();
        let z = self.mass();
        let (pa, pb) = (normal::pdf(alpha), normal::pdf(beta));
        let t1 = (alpha * pa - beta * pb) / z;
        let t2 = (pa - pb) / z;
        self.delta2 * (1.0 + t1 - t2 * t2)
    }
}

pub const MAX_MVN_DIM: usize = 16;

/// Gaussian with dense covariance, factorised once at construction.
#[derive(Debug, Clone)]
pub struct MultivariateNormal {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    log_det: f64,
}

impl MultivariateNormal {
    pub fn new(mean: &[f64], cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || d > MAX_MVN_DIM {
            return Err(Error::Domain("multivariate normal dimension out of range"));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Domain("covariance shape does not match mean"));
        }
        let scale = cov.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Domain("covariance is not symmetric"));
                }
            }
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite(" (covariance)"))?;
        let chol_l = chol.l();
        let log_det = 2.0 * chol_l.diagonal().iter().map(|v| libm::log(*v)).sum::<f64>();
        Ok(MultivariateNormal {
            mean: DVector::from_column_slice(mean),
            cov,
            chol_l,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol_l
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        -0.5 * z.norm_squared() - 0.5 * self.log_det - d as f64 * normal::HALF_LN_2PI
    }

    pub fn sample_into<R: RngCore + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let mut buf = [0.0_f64; MAX_MVN_DIM];
        let z = &mut buf[..d];
        for zi in z.iter_mut() {
            *zi = standard_normal(rng);
        }
        for i in 0..d {
            let mut acc = self.mean[i];
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                acc += self.chol_l[(i, j)] * zj;
            }
            out[i] = acc;
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    r
}

/// `n` Halton points starting at sequence index 1, scaled to `bounds`.
pub fn halton(dim: usize, n: usize, bounds: &[(f64, f64)]) -> Result<Vec<Vec<f64>>> {
    halton_from(dim, 1, n, bounds)
}

/// `n` Halton points starting at sequence index `start` (index 0 is the
/// origin and is normally skipped).
pub fn halton_from(dim: usize, start: u64, n: usize, bounds: &[(f64, f64)]) -> Result<Vec<Vec<f64>>> {
    if dim > PRIMES.len() {
        return Err(Error::Domain("too many Halton dimensions"));
    }
    if bounds.len() != dim {
        return Err(Error::Domain("one bound pair per Halton dimension"));
    }
    Ok((0..n as u64)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let (lo, hi) = bounds[d];
                    lo + (hi - lo) * radical_inverse(start + i, PRIMES[d])
                })
                .collect()
        })
        .collect())
}

/// Five-number summary plus mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Linear-interpolation (type 7) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(samples: &[f64]) -> Result<BoxStats> {
    if samples.is_empty() {
        return Err(Error::Empty("box_stats needs at least one sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(BoxStats {
        min: sorted[0],
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        mean,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Uniform draw on `[lo, hi)`; thin wrapper so callers need not import `Rng`.
pub fn uniform<R: RngCore + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
