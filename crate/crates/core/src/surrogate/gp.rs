//! Zero-mean Gaussian process regression with an anisotropic squared
//! exponential kernel, on inputs scaled to the unit box.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{minimize_box, MinimizeOptions};
use crate::stats::radical_inverse;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Kernel hyperparameters in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    /// `ln l_d` per input dimension, in unit-box coordinates.
    pub log_length_scales: Vec<f64>,
    /// `ln s^2` of the standardized targets.
    pub log_signal_variance: f64,
    /// `ln` of a learned noise variance on the standardized targets, when
    /// the fit was asked to learn one.
    #[serde(default)]
    pub log_nugget: Option<f64>,
}

impl GpHyperparameters {
    pub fn length_scales(&self) -> Vec<f64> {
        self.log_length_scales.iter().map(|v| libm::exp(*v)).collect()
    }

    pub fn signal_variance(&self) -> f64 {
        libm::exp(self.log_signal_variance)
    }

    pub fn nugget(&self) -> f64 {
        self.log_nugget.map_or(0.0, libm::exp)
    }

    fn from_slice(v: &[f64], dim: usize) -> Self {
        GpHyperparameters {
            log_length_scales: v[..dim].to_vec(),
            log_signal_variance: v[dim],
            log_nugget: v.get(dim + 1).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpFitOptions {
    /// Multi-start initialisations of the marginal likelihood search.
    pub starts: usize,
    /// How many of the best starts are refined by quasi-Newton iterations.
    pub polish: usize,
    /// Hyperparameters are searched on at most this many maximin-selected
    /// points; the final model always conditions on every point.
    pub max_search_points: usize,
    pub length_scale_bounds: (f64, f64),
    pub signal_variance_bounds: (f64, f64),
    /// When set, a noise variance on the standardized targets is learned
    /// within these bounds alongside the kernel hyperparameters.
    pub nugget_bounds: Option<(f64, f64)>,
    /// Refit with a learned nugget when the leave-one-out error of the
    /// first fit is poor, keeping whichever model cross-validates better.
    pub nugget_fallback: Option<NuggetFallback>,
    /// Box the starting points are drawn from, as `(length, variance)` ranges.
    pub start_length_scales: (f64, f64),
    pub start_signal_variance: (f64, f64),
    /// First jitter tried, relative to the signal variance.
    pub jitter_start: f64,
    /// Relative jitter floor while searching hyperparameters. A slightly
    /// larger nugget keeps the likelihood gradient accurate when the kernel
    /// matrix is nearly singular.
    pub search_jitter: f64,
    /// Largest relative jitter before giving up.
    pub jitter_max: f64,
    pub minimize: MinimizeOptions,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions {
            starts: 8,
            polish: 2,
            max_search_points: 200,
            length_scale_bounds: (1e-3, 1e3),
            signal_variance_bounds: (1e-3, 1e6),
            nugget_bounds: None,
            nugget_fallback: None,
            start_length_scales: (0.05, 5.0),
            start_signal_variance: (0.1, 100.0),
            jitter_start: 1e-10,
            search_jitter: 1e-8,
            jitter_max: 1e-4,
            minimize: MinimizeOptions {
                max_iter: 80,
                grad_tol: 1e-3,
                f_tol: 1e-9,
                max_backtracks: 30,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuggetFallback {
    pub bounds: (f64, f64),
    /// Leave-one-out mean absolute percentage error that triggers a refit.
    pub loo_threshold_percent: f64,
}

/// Kernel matrix of `x` (row major, `n x dim`) without the diagonal jitter.
fn kernel_matrix(x: &[f64], dim: usize, inv_l2: &[f64], s2: f64) -> DMatrix<f64> {
    let n = x.len() / dim;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = s2;
        let xi = &x[i * dim..(i + 1) * dim];
        for j in 0..i {
            let xj = &x[j * dim..(j + 1) * dim];
            let mut r2 = 0.0;
            for d in 0..dim {
                let t = xi[d] - xj[d];
                r2 += t * t * inv_l2[d];
            }
            let v = s2 * libm::exp(-0.5 * r2);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorises `k + jitter * s2 * I`, escalating the jitter tenfold on failure.
fn factor_with_jitter(
    k: &DMatrix<f64>,
    s2: f64,
    opts: &GpFitOptions,
) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let mut rel = opts.jitter_start;
    while rel <= opts.jitter_max * (1.0 + 1e-9) {
        let mut kj = k.clone();
        let jitter = rel * s2;
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Some((c, jitter));
        }
        rel *= 10.0;
    }
    None
}

/// Negative log marginal likelihood and its gradient in log hyperparameters.
fn neg_log_marginal(
    x: &[f64],
    dim: usize,
    y: &DVector<f64>,
    h: &[f64],
    grad: &mut [f64],
    opts: &GpFitOptions,
) -> f64 {
    let n = y.len();
    let inv_l2: Vec<f64> = h[..dim].iter().map(|v| libm::exp(-2.0 * v)).collect();
    let s2 = libm::exp(h[dim]);
    let nugget = h.get(dim + 1).map_or(0.0, |v| libm::exp(*v));
    let mut k = kernel_matrix(x, dim, &inv_l2, s2);
    for i in 0..n {
        k[(i, i)] += nugget;
    }
    let search = GpFitOptions {
        jitter_start: opts.search_jitter.max(opts.jitter_start),
        ..opts.clone()
    };
    let Some((chol, jitter)) = factor_with_jitter(&k, s2, &search) else {
        return f64::INFINITY;
    };
    let alpha = chol.solve(y);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| libm::log(*v)).sum::<f64>();
    let nll = 0.5 * y.dot(&alpha) + 0.5 * log_det + 0.5 * n as f64 * LN_2PI;

    // dNLL/dh = -1/2 tr((a a^T - K^-1) dK/dh)
    let kinv = chol.inverse();
    for g in grad.iter_mut() {
        *g = 0.0;
    }
    for i in 0..n {
        // The diagonal carries the signal variance, the jitter (which scales
        // with it) and the nugget.
        let w_ii = alpha[i] * alpha[i] - kinv[(i, i)];
        grad[dim] += w_ii * (s2 + jitter);
        if nugget > 0.0 {
            grad[dim + 1] += w_ii * nugget;
        }
        let xi = &x[i * dim..(i + 1) * dim];
        for j in 0..i {
            let w = 2.0 * (alpha[i] * alpha[j] - kinv[(i, j)]);
            let kij = k[(i, j)];
            grad[dim] += w * kij;
            let xj = &x[j * dim..(j + 1) * dim];
            for d in 0..dim {
                let t = xi[d] - xj[d];
                grad[d] += w * kij * t * t * inv_l2[d];
            }
        }
    }
    for g in grad.iter_mut() {
        *g *= -0.5;
    }
    nll
}

/// Greedy maximin subset of the rows of `x`, seeded with the row nearest
/// the box centre. Depends only on the set of rows, not on their order.
fn maximin_subset(x: &[f64], dim: usize, m: usize) -> Vec<usize> {
    let n = x.len() / dim;
    if m >= n {
        return (0..n).collect();
    }
    let dist2 = |i: usize, c: &[f64]| -> f64 {
        (0..dim).map(|d| { let t = x[i * dim + d] - c[d]; t * t }).sum()
    };
    let centre = vec![0.5; dim];
    let first = (0..n)
        .min_by(|&a, &b| {
            dist2(a, &centre)
                .total_cmp(&dist2(b, &centre))
                .then_with(|| lexicographic(&x[a * dim..(a + 1) * dim], &x[b * dim..(b + 1) * dim]))
        })
        .unwrap_or(0);
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, &x[first * dim..(first + 1) * dim])).collect();
    while chosen.len() < m {
        // Ties are broken by coordinates so the choice is order independent.
        let next = (0..n)
            .max_by(|&a, &b| {
                nearest[a]
                    .total_cmp(&nearest[b])
                    .then_with(|| lexicographic(&x[b * dim..(b + 1) * dim], &x[a * dim..(a + 1) * dim]))
            })
            .unwrap_or(0);
        chosen.push(next);
        let row = &x[next * dim..(next + 1) * dim];
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(dist2(i, row));
        }
    }
    chosen.sort_unstable();
    chosen
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// Row permutation that sorts `x` lexicographically.
pub fn canonical_order(x: &[f64], dim: usize) -> Vec<usize> {
    let n = x.len() / dim;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| lexicographic(&x[a * dim..(a + 1) * dim], &x[b * dim..(b + 1) * dim]));
    idx
}

/// Target standardisation; constant targets get unit scale.
fn standardize(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var);
    if sd > 1e-13 * (1.0 + mean.abs()) {
        (mean, sd)
    } else {
        (mean, 0.0)
    }
}

/// Maximises the marginal likelihood of standardized targets `z` at inputs
/// `x`, which are assumed to be in canonical order.
pub fn optimize_hyperparameters(
    x: &[f64],
    dim: usize,
    z: &[f64],
    opts: &GpFitOptions,
) -> Result<GpHyperparameters> {
    let subset = maximin_subset(x, dim, opts.max_search_points.max(dim + 2));
    let xs: Vec<f64> = subset
        .iter()
        .flat_map(|&i| x[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    let ys = DVector::from_iterator(subset.len(), subset.iter().map(|&i| z[i]));

    let ln = |v: f64| libm::log(v);
    let mut lower = vec![ln(opts.length_scale_bounds.0); dim];
    let mut upper = vec![ln(opts.length_scale_bounds.1); dim];
    lower.push(ln(opts.signal_variance_bounds.0));
    upper.push(ln(opts.signal_variance_bounds.1));
    if let Some((a, b)) = opts.nugget_bounds {
        lower.push(ln(a));
        upper.push(ln(b));
    }
    let n_hyper = lower.len();

    let (l0, l1) = (ln(opts.start_length_scales.0), ln(opts.start_length_scales.1));
    let (s0, s1) = (ln(opts.start_signal_variance.0), ln(opts.start_signal_variance.1));
    const BASES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    let mut grad = vec![0.0; n_hyper];
    let mut screened: Vec<(f64, Vec<f64>)> = (0..opts.starts.max(1) as u64)
        .map(|k| {
            let h: Vec<f64> = (0..n_hyper)
                .map(|d| {
                    let u = radical_inverse(k + 1, BASES[d % BASES.len()]);
                    match d.cmp(&dim) {
                        Ordering::Less => l0 + (l1 - l0) * u,
                        Ordering::Equal => s0 + (s1 - s0) * u,
                        Ordering::Greater => lower[d] + (upper[d] - lower[d]) * u,
                    }
                })
                .collect();
            let f = neg_log_marginal(&xs, dim, &ys, &h, &mut grad, opts);
            (f, h)
        })
        .collect();
    screened.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<(f64, Vec<f64>)> = None;
    for (f0, h0) in screened.into_iter().take(opts.polish.max(1)) {
        if !f0.is_finite() {
            continue;
        }
        let m = minimize_box(
            |h, g| neg_log_marginal(&xs, dim, &ys, h, g, opts),
            &h0,
            &lower,
            &upper,
            &opts.minimize,
        );
        if m.f.is_finite() && best.as_ref().map_or(true, |b| m.f < b.0) {
            best = Some((m.f, m.x));
        }
    }
    best.map(|(_, h)| GpHyperparameters::from_slice(&h, dim))
        .ok_or_else(|| Error::GpFit("no start produced a positive definite kernel".into()))
}

/// A fitted GP that keeps its factorisation, so it can also report
/// predictive variance.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    dim: usize,
    inputs: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    jitter: f64,
    predictor: GpPredictor,
}

/// Everything needed for mean predictions given the training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpPredictor {
    pub hyperparameters: GpHyperparameters,
    pub target_mean: f64,
    pub target_scale: f64,
    /// Mean weights in target units: `scale * s^2 * K^-1 z`.
    pub weights: Vec<f64>,
    /// `1 / l_d^2`, cached.
    #[serde(skip)]
    inv_l2: Vec<f64>,
}

impl GpPredictor {
    fn new(hyperparameters: GpHyperparameters, target_mean: f64, target_scale: f64, weights: Vec<f64>) -> Self {
        let mut p = GpPredictor {
            hyperparameters,
            target_mean,
            target_scale,
            weights,
            inv_l2: Vec::new(),
        };
        p.refresh();
        p
    }

    /// Rebuilds cached quantities, e.g. after deserialisation.
    pub fn refresh(&mut self) {
        self.inv_l2 = self
            .hyperparameters
            .log_length_scales
            .iter()
            .map(|v| libm::exp(-2.0 * v))
            .collect();
    }

    pub fn dim(&self) -> usize {
        self.hyperparameters.log_length_scales.len()
    }

    /// Posterior mean at unit-box point `u` given training inputs `x`.
    pub fn mean(&self, x: &[f64], u: &[f64]) -> f64 {
        let dim = self.dim();
        let mut acc = 0.0;
        for (w, xi) in self.weights.iter().zip(x.chunks_exact(dim)) {
            let mut r2 = 0.0;
            for d in 0..dim {
                let t = u[d] - xi[d];
                r2 += t * t * self.inv_l2[d];
            }
            acc += w * libm::exp(-0.5 * r2);
        }
        self.target_mean + acc
    }

    /// Posterior mean and its gradient with respect to `u`.
    pub fn mean_with_gradient(&self, x: &[f64], u: &[f64], grad: &mut [f64]) -> f64 {
        let dim = self.dim();
        for g in grad.iter_mut() {
            *g = 0.0;
        }
        let mut acc = 0.0;
        for (w, xi) in self.weights.iter().zip(x.chunks_exact(dim)) {
            let mut r2 = 0.0;
            for d in 0..dim {
                let t = u[d] - xi[d];
                r2 += t * t * self.inv_l2[d];
            }
            let c = w * libm::exp(-0.5 * r2);
            acc += c;
            for d in 0..dim {
                grad[d] -= c * (u[d] - xi[d]) * self.inv_l2[d];
            }
        }
        self.target_mean + acc
    }
}

impl GpSurrogate {
    /// Fits a GP to `targets` at unit-box `inputs` (row major, `n x dim`).
    pub fn fit(inputs: &[f64], dim: usize, targets: &[f64], opts: &GpFitOptions) -> Result<Self> {
        let n = targets.len();
        if dim == 0 || inputs.len() != n * dim {
            return Err(Error::GpFit("inputs and targets disagree in size".into()));
        }
        if n < dim + 2 {
            return Err(Error::GpFit(alloc::format!("need at least {} points, got {n}", dim + 2)));
        }
        let order = canonical_order(inputs, dim);
        let x: Vec<f64> = order
            .iter()
            .flat_map(|&i| inputs[i * dim..(i + 1) * dim].iter().copied())
            .collect();
        let y: Vec<f64> = order.iter().map(|&i| targets[i]).collect();
        let (mean, scale) = standardize(&y);
        if scale == 0.0 {
            return Ok(Self::constant(x, dim, mean));
        }
        let z: Vec<f64> = y.iter().map(|v| (v - mean) / scale).collect();
        let hyper = optimize_hyperparameters(&x, dim, &z, opts)?;
        let gp = Self::condition(x, dim, &z, mean, scale, hyper, opts)?;
        let Some(fallback) = opts.nugget_fallback else {
            return Ok(gp);
        };
        let loo = gp.loo_mape_percent(&y);
        if loo <= fallback.loo_threshold_percent {
            return Ok(gp);
        }
        let mut noisy = opts.clone();
        noisy.nugget_bounds = Some(fallback.bounds);
        noisy.nugget_fallback = None;
        let hyper = optimize_hyperparameters(&gp.inputs, dim, &z, &noisy)?;
        let alt = Self::condition(gp.inputs.clone(), dim, &z, mean, scale, hyper, &noisy)?;
        Ok(if alt.loo_mape_percent(&y) < loo { alt } else { gp })
    }

    /// Closed-form leave-one-out mean absolute percentage error against the
    /// canonical-order training targets `y`.
    pub fn loo_mape_percent(&self, y: &[f64]) -> f64 {
        let Some(chol) = &self.chol else {
            return 0.0;
        };
        let p = &self.predictor;
        let s2 = p.hyperparameters.signal_variance();
        let inv = chol.inverse();
        let total: f64 = y
            .iter()
            .enumerate()
            .map(|(i, yi)| {
                let alpha = p.weights[i] / (s2 * p.target_scale);
                let residual = alpha / inv[(i, i)] * p.target_scale;
                (residual / yi.abs().max(f64::MIN_POSITIVE)).abs()
            })
            .sum();
        100.0 * total / y.len() as f64
    }

    /// Conditions on canonical-order inputs with given hyperparameters.
    pub fn condition(
        x: Vec<f64>,
        dim: usize,
        z: &[f64],
        mean: f64,
        scale: f64,
        hyper: GpHyperparameters,
        opts: &GpFitOptions,
    ) -> Result<Self> {
        let inv_l2: Vec<f64> = hyper.log_length_scales.iter().map(|v| libm::exp(-2.0 * v)).collect();
        let s2 = hyper.signal_variance();
        let mut k = kernel_matrix(&x, dim, &inv_l2, s2);
        let nugget = hyper.nugget();
        for i in 0..k.nrows() {
            k[(i, i)] += nugget;
        }
        let (chol, jitter) = factor_with_jitter(&k, s2, opts)
            .ok_or_else(|| Error::GpFit("kernel matrix not positive definite at maximum jitter".into()))?;
        let alpha = chol.solve(&DVector::from_column_slice(z));
        let weights = alpha.iter().map(|a| a * s2 * scale).collect();
        Ok(GpSurrogate {
            dim,
            inputs: x,
            chol: Some(chol),
            jitter,
            predictor: GpPredictor::new(hyper, mean, scale, weights),
        })
    }

    fn constant(x: Vec<f64>, dim: usize, mean: f64) -> Self {
        let n = x.len() / dim;
        let hyper = GpHyperparameters {
            log_length_scales: vec![0.0; dim],
            log_signal_variance: 0.0,
            log_nugget: None,
        };
        GpSurrogate {
            dim,
            inputs: x,
            chol: None,
            jitter: 0.0,
            predictor: GpPredictor::new(hyper, mean, 0.0, vec![0.0; n]),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Training inputs in canonical order.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn hyperparameters(&self) -> &GpHyperparameters {
        &self.predictor.hyperparameters
    }

    pub fn predictor(&self) -> &GpPredictor {
        &self.predictor
    }

    pub fn into_predictor(self) -> GpPredictor {
        self.predictor
    }

    pub fn predict_mean(&self, u: &[f64]) -> f64 {
        self.predictor.mean(&self.inputs, u)
    }

    /// Predictive variance of the latent function, in target units squared.
    pub fn predict_variance(&self, u: &[f64]) -> f64 {
        let Some(chol) = &self.chol else {
            return 0.0;
        };
        let p = &self.predictor;
        let s2 = p.hyperparameters.signal_variance();
        let kx = DVector::from_iterator(
            self.inputs.len() / self.dim,
            self.inputs.chunks_exact(self.dim).map(|xi| {
                let r2: f64 = (0..self.dim).map(|d| { let t = u[d] - xi[d]; t * t } * p.inv_l2[d]).sum();
                s2 * libm::exp(-0.5 * r2)
            }),
        );
        let v = chol.l_dirty().solve_lower_triangular(&kx).unwrap_or(kx);
        let var = (s2 - v.norm_squared()).max(0.0);
        var * p.target_scale * p.target_scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::halton;

    fn sample(n: usize, f: impl Fn(f64, f64) -> f64) -> (Vec<f64>, Vec<f64>) {
        let pts = halton(2, n, &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let x: Vec<f64> = pts.iter().flatten().copied().collect();
        let y = pts.iter().map(|p| f(p[0], p[1])).collect();
        (x, y)
    }

    #[test]
    fn constant_targets_are_reproduced() {
        let (x, _) = sample(20, |_, _| 0.0);
        let gp = GpSurrogate::fit(&x, 2, &[3.5; 20], &Default::default()).unwrap();
        for u in [[0.1, 0.9], [0.5, 0.5], [2.0, -1.0]] {
            assert!((gp.predict_mean(&u) - 3.5).abs() < 1e-10);
        }
    }

    #[test]
    fn interpolates_and_generalises() {
        let f = |a: f64, b: f64| 200.0 + 40.0 * libm::sin(2.0 * a) + 15.0 * b * b;
        let (x, y) = sample(60, f);
        let gp = GpSurrogate::fit(&x, 2, &y, &Default::default()).unwrap();
        for (xi, yi) in x.chunks_exact(2).zip(&y) {
            assert!((gp.predict_mean(xi) - yi).abs() <= 1e-6 * yi.abs());
        }
        let test = halton_from_offset(200);
        let mape = test
            .iter()
            .map(|p| ((gp.predict_mean(p) - f(p[0], p[1])) / f(p[0], p[1])).abs())
            .sum::<f64>()
            / test.len() as f64;
        assert!(mape < 1e-5, "{mape}");
        assert!(gp.predict_variance(&x[..2]) < 1e-6);
        assert!(gp.predict_variance(&[0.5, 3.0]) > gp.predict_variance(&[0.5, 0.5]));
    }

    fn halton_from_offset(start: u64) -> Vec<Vec<f64>> {
        crate::stats::halton_from(2, start, 100, &[(0.0, 1.0), (0.0, 1.0)]).unwrap()
    }

    #[test]
    fn row_permutation_does_not_change_predictions() {
        let f = |a: f64, b: f64| 10.0 + a * b + libm::cos(3.0 * a);
        let (x, y) = sample(30, f);
        let gp = GpSurrogate::fit(&x, 2, &y, &Default::default()).unwrap();
        let mut idx: Vec<usize> = (0..30).collect();
        idx.reverse();
        idx.swap(3, 17);
        let xp: Vec<f64> = idx.iter().flat_map(|&i| x[2 * i..2 * i + 2].to_vec()).collect();
        let yp: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let gpp = GpSurrogate::fit(&xp, 2, &yp, &Default::default()).unwrap();
        for u in [[0.13, 0.77], [0.5, 0.5], [0.9, 0.05]] {
            let (a, b) = (gp.predict_mean(&u), gpp.predict_mean(&u));
            assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} {b}");
        }
    }

    #[test]
    fn marginal_likelihood_gradient_matches_differences() {
        let (x, y) = sample(25, |a, b| libm::sin(4.0 * a) + b);
        let (m, s) = standardize(&y);
        let z = DVector::from_iterator(25, y.iter().map(|v| (v - m) / s));
        let opts = GpFitOptions::default();
        let h = [libm::log(0.3), libm::log(0.7), libm::log(2.0)];
        let mut g = [0.0; 3];
        neg_log_marginal(&x, 2, &z, &h, &mut g, &opts);
        let mut scratch = [0.0; 3];
        for k in 0..3 {
            let eps = 1e-5;
            let mut hp = h;
            let mut hm = h;
            hp[k] += eps;
            hm[k] -= eps;
            let fd = (neg_log_marginal(&x, 2, &z, &hp, &mut scratch, &opts)
                - neg_log_marginal(&x, 2, &z, &hm, &mut scratch, &opts))
                / (2.0 * eps);
            assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn mean_gradient_matches_differences() {
        let f = |a: f64, b: f64| 5.0 * a * a - b + libm::sin(3.0 * b);
        let (x, y) = sample(40, f);
        let gp = GpSurrogate::fit(&x, 2, &y, &Default::default()).unwrap();
        let u = [0.37, 0.61];
        let mut g = [0.0; 2];
        let m = gp.predictor().mean_with_gradient(gp.inputs(), &u, &mut g);
        assert_eq!(m, gp.predict_mean(&u));
        for d in 0..2 {
            let h = 1e-4;
            let mut up = u;
            let mut um = u;
            up[d] += h;
            um[d] -= h;
            let fd = (gp.predict_mean(&up) - gp.predict_mean(&um)) / (2.0 * h);
            assert!((fd - g[d]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(GpSurrogate::fit(&[0.1, 0.2, 0.3, 0.4], 2, &[1.0, 2.0], &Default::default()).is_err());
    }

    #[test]
    fn maximin_subset_ignores_row_order() {
        let pts = halton(2, 50, &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let x: Vec<f64> = pts.iter().flatten().copied().collect();
        let sub = maximin_subset(&x, 2, 10);
        let rev: Vec<f64> = pts.iter().rev().flatten().copied().collect();
        let sub_rev = maximin_subset(&rev, 2, 10);
        let mut a: Vec<Vec<f64>> = sub.iter().map(|&i| pts[i].clone()).collect();
        let mut b: Vec<Vec<f64>> = sub_rev.iter().map(|&i| pts[49 - i].clone()).collect();
        a.sort_by(|p, q| lexicographic(p, q));
        b.sort_by(|p, q| lexicographic(p, q));
        assert_eq!(a, b);
    }
}
