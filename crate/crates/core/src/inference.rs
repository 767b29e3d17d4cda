//! Bayesian calibration: truncated-normal priors, Gaussian likelihood, MAP
//! search and the Laplace approximation.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::constitutive::Parameter;
use crate::error::{Error, Result};
use crate::loadpath::{node_id, LoadPath};
use crate::optimize::{minimize_box, MinimizeOptions};
use crate::stats::{halton, normal, TruncatedNormal};
use crate::surrogate::SurrogateBank;

/// Deterministic map from parameters to predicted observations.
pub trait ForwardModel {
    fn n_params(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn predict(&self, theta: &[f64], out: &mut [f64]);
    /// Predictions plus the row-major `n_outputs x n_params` Jacobian.
    fn predict_with_jacobian(&self, theta: &[f64], out: &mut [f64], jac: &mut [f64]);
}

/// Surrogate predictions along the nodes visited by a path, ordered by
/// (step, point, qoi).
#[derive(Debug, Clone, Copy)]
pub struct PathModel<'a> {
    pub bank: &'a SurrogateBank,
    pub nodes: &'a [usize],
}

impl<'a> PathModel<'a> {
    pub fn new(bank: &'a SurrogateBank, nodes: &'a [usize]) -> Self {
        PathModel { bank, nodes }
    }

    fn per_node(&self) -> usize {
        2 * self.bank.spec.points_per_step()
    }
}

/// Node sequence visited by a path, or an error if it leaves the bank's tree.
pub fn path_nodes(path: &LoadPath, bank: &SurrogateBank) -> Result<Vec<usize>> {
    let mut nodes = Vec::with_capacity(path.len());
    for k in 1..=path.len() {
        let node = node_id(&path.axes[..k]);
        if node > bank.spec.n_nodes() {
            return Err(Error::MissingSurrogate { node, point: 0 });
        }
        nodes.push(node);
    }
    Ok(nodes)
}

impl ForwardModel for PathModel<'_> {
    fn n_params(&self) -> usize {
        self.bank.spec.dim()
    }

    fn n_outputs(&self) -> usize {
        self.nodes.len() * self.per_node()
    }

    fn predict(&self, theta: &[f64], out: &mut [f64]) {
        let per = self.per_node();
        for (chunk, &node) in out.chunks_exact_mut(per).zip(self.nodes) {
            self.bank.predict_node(node, theta, chunk);
        }
    }

    fn predict_with_jacobian(&self, theta: &[f64], out: &mut [f64], jac: &mut [f64]) {
        let dim = self.n_params();
        let mut i = 0;
        for &node in self.nodes {
            for k in self.bank.spec.node_keys(node) {
                out[i] = self.bank.predict_with_gradient(k, theta, &mut jac[i * dim..(i + 1) * dim]);
                i += 1;
            }
        }
    }
}

/// Independent truncated-normal priors over the calibrated parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub parameters: Vec<Parameter>,
    pub marginals: Vec<TruncatedNormal>,
}

impl PriorSpec {
    pub fn new(parameters: Vec<Parameter>, marginals: Vec<TruncatedNormal>) -> Result<Self> {
        if parameters.len() != marginals.len() || parameters.is_empty() {
            return Err(Error::Config("one prior per calibrated parameter".into()));
        }
        Ok(PriorSpec {
            parameters,
            marginals,
        })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.marginals.iter().map(|m| (m.a, m.b)).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.marginals.iter().zip(theta).all(|(m, t)| *t >= m.a && *t <= m.b)
    }

    pub fn logpdf(&self, theta: &[f64]) -> f64 {
        self.marginals.iter().zip(theta).map(|(m, t)| m.logpdf(*t)).sum()
    }
}

/// Noisy stress observations collected along a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    /// Ordered by (step, point, qoi).
    pub values: Vec<f64>,
    pub path: LoadPath,
    /// Known noise variance `psi^2`, MPa^2.
    pub noise_variance: f64,
}

impl ObservationSet {
    pub fn validate(&self, points_per_step: usize) -> Result<()> {
        if self.values.len() != self.path.len() * points_per_step * 2 {
            return Err(Error::Config("observation count does not match the path".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("observations must be finite"));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::Domain("noise variance must be positive"));
        }
        Ok(())
    }
}

/// `sum_i log N(y_i; g_i, psi^2)`.
pub fn gaussian_log_likelihood(y: &[f64], predicted: &[f64], noise_variance: f64) -> f64 {
    let ss: f64 = y.iter().zip(predicted).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * ss / noise_variance
        - 0.5 * y.len() as f64 * (2.0 * normal::HALF_LN_2PI + libm::log(noise_variance))
}

pub fn log_likelihood<M: ForwardModel>(theta: &[f64], y: &[f64], noise_variance: f64, model: &M) -> f64 {
    let mut g = vec![0.0; model.n_outputs()];
    model.predict(theta, &mut g);
    gaussian_log_likelihood(y, &g, noise_variance)
}

/// Unnormalised log posterior; `-inf` outside the prior support.
pub fn log_posterior<M: ForwardModel>(
    theta: &[f64],
    y: &[f64],
    noise_variance: f64,
    model: &M,
    prior: &PriorSpec,
) -> f64 {
    let lp = prior.logpdf(theta);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + log_likelihood(theta, y, noise_variance, model)
}

/// The calibration objective `J = -log posterior` with its gradient.
pub struct Objective<'a, M> {
    pub model: &'a M,
    pub prior: &'a PriorSpec,
    pub y: &'a [f64],
    pub noise_variance: f64,
}

impl<M: ForwardModel> Objective<'_, M> {
    pub fn value(&self, theta: &[f64]) -> f64 {
        -log_posterior(theta, self.y, self.noise_variance, self.model, self.prior)
    }

    pub fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.model.n_params();
        let n = self.model.n_outputs();
        let lp = self.prior.logpdf(theta);
        if lp == f64::NEG_INFINITY {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return f64::INFINITY;
        }
        let mut g = vec![0.0; n];
        let mut jac = vec![0.0; n * d];
        self.model.predict_with_jacobian(theta, &mut g, &mut jac);
        for (k, gk) in grad.iter_mut().enumerate() {
            *gk = -self.prior.marginals[k].dlogpdf(theta[k]);
        }
        for i in 0..n {
            let r = (self.y[i] - g[i]) / self.noise_variance;
            for k in 0..d {
                grad[k] -= r * jac[i * d + k];
            }
        }
        -(lp + gaussian_log_likelihood(self.y, &g, self.noise_variance))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    /// Halton restarts in the prior box, in addition to any warm start.
    pub restarts: usize,
    pub minimize: MinimizeOptionsSpec,
}

/// Serializable mirror of [`MinimizeOptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptionsSpec {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
}

impl From<MinimizeOptionsSpec> for MinimizeOptions {
    fn from(s: MinimizeOptionsSpec) -> Self {
        MinimizeOptions {
            max_iter: s.max_iter,
            grad_tol: s.grad_tol,
            f_tol: s.f_tol,
            ..MinimizeOptions::default()
        }
    }
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            restarts: 4,
            minimize: MinimizeOptionsSpec {
                max_iter: 300,
                grad_tol: 1e-7,
                f_tol: 1e-13,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEstimate {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub starts: usize,
    pub converged_starts: usize,
}

/// Multi-start bounded minimisation of `J`. Runs in unit-box coordinates so
/// parameters of very different magnitude are treated alike.
pub fn map_estimate<M: ForwardModel>(
    objective: &Objective<'_, M>,
    warm_start: Option<&[f64]>,
    opts: &MapOptions,
) -> Result<MapEstimate> {
    let bounds = objective.prior.bounds();
    let d = bounds.len();
    let width: Vec<f64> = bounds.iter().map(|(a, b)| b - a).collect();
    let to_theta = |u: &[f64], theta: &mut [f64]| {
        for k in 0..d {
            theta[k] = bounds[k].0 + u[k] * width[k];
        }
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = warm_start {
        starts.push((0..d).map(|k| ((w[k] - bounds[k].0) / width[k]).clamp(0.0, 1.0)).collect());
    }
    starts.extend(halton(d, opts.restarts, &vec![(0.0, 1.0); d])?);

    let lower = vec![0.0; d];
    let upper = vec![1.0; d];
    let mopts: MinimizeOptions = opts.minimize.into();
    let mut theta = vec![0.0; d];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut converged = 0;
    for u0 in &starts {
        let m = minimize_box(
            |u, g| {
                to_theta(u, &mut theta);
                let f = objective.value_and_gradient(&theta, g);
                for k in 0..d {
                    g[k] *= width[k];
                }
                f
            },
            u0,
            &lower,
            &upper,
            &mopts,
        );
        if m.converged {
            converged += 1;
        }
        if m.f.is_finite() && best.as_ref().map_or(true, |b| m.f < b.0) {
            best = Some((m.f, m.x));
        }
    }
    let (f, u) = best.ok_or(Error::Estimation {
        starts: starts.len(),
    })?;
    let mut out = vec![0.0; d];
    to_theta(&u, &mut out);
    Ok(MapEstimate {
        theta: out,
        objective: f,
        starts: starts.len(),
        converged_starts: converged,
    })
}

/// Gaussian approximation of the posterior about the MAP point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplacePosterior {
    pub map_point: Vec<f64>,
    /// Row-major `D x D` covariance.
    pub covariance: Vec<f64>,
    pub objective_value: f64,
    /// Set when the Hessian needed eigenvalue flooring to become SPD.
    pub repaired: bool,
    pub hessian_eigenvalues: Vec<f64>,
}

impl LaplacePosterior {
    pub fn dim(&self) -> usize {
        self.map_point.len()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.covariance)
    }

    pub fn variance(&self, k: usize) -> f64 {
        self.covariance[k * self.dim() + k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceOptions {
    /// Finite-difference step as a fraction of each parameter's prior width.
    pub relative_step: f64,
    /// Eigenvalue floor relative to the largest Hessian eigenvalue.
    pub eigen_floor: f64,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        LaplaceOptions {
            relative_step: 1e-4,
            eigen_floor: 1e-12,
        }
    }
}

/// Central-difference Hessian of `f` within `bounds`. Near a bound the
/// stencil centre is shifted inward so every evaluation stays feasible.
pub fn fd_hessian(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    bounds: &[(f64, f64)],
    relative_step: f64,
) -> DMatrix<f64> {
    let d = x.len();
    let h: Vec<f64> = bounds.iter().map(|(a, b)| relative_step * (b - a)).collect();
    let c: Vec<f64> = (0..d)
        .map(|k| x[k].clamp(bounds[k].0 + h[k], bounds[k].1 - h[k]))
        .collect();
    let f0 = f(&c);
    let mut p = c.clone();
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        p[i] = c[i] + h[i];
        let fp = f(&p);
        p[i] = c[i] - h[i];
        let fm = f(&p);
        p[i] = c[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                p[i] = c[i] + si * h[i];
                p[j] = c[j] + sj * h[j];
                let v = f(&p);
                p[i] = c[i];
                p[j] = c[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Hessian from central differences of an analytic gradient, symmetrised.
/// Differencing the gradient rather than `f` keeps cancellation error at
/// O(eps / h) instead of O(eps / h^2). Near a bound the stencil centre is
/// shifted inward as in [`fd_hessian`].
pub fn fd_hessian_from_gradient(
    mut grad: impl FnMut(&[f64], &mut [f64]),
    x: &[f64],
    bounds: &[(f64, f64)],
    relative_step: f64,
) -> DMatrix<f64> {
    let d = x.len();
    let h: Vec<f64> = bounds.iter().map(|(a, b)| relative_step * (b - a)).collect();
    let c: Vec<f64> = (0..d)
        .map(|k| x[k].clamp(bounds[k].0 + h[k], bounds[k].1 - h[k]))
        .collect();
    let mut p = c.clone();
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    let mut hess = DMatrix::zeros(d, d);
    for k in 0..d {
        p[k] = c[k] + h[k];
        grad(&p, &mut gp);
        p[k] = c[k] - h[k];
        grad(&p, &mut gm);
        p[k] = c[k];
        for j in 0..d {
            hess[(j, k)] = (gp[j] - gm[j]) / (2.0 * h[k]);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// Inverts a symmetric Hessian, flooring its eigenvalues if needed.
pub fn covariance_from_hessian(hess: &DMatrix<f64>, eigen_floor: f64) -> Result<(DMatrix<f64>, bool, Vec<f64>)> {
    let sym = (hess + hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegeneratePosterior { eigenvalues: values });
    }
    let floor = eigen_floor * max;
    let repaired = values.iter().any(|&v| v < floor);
    let inv = DVector::from_iterator(values.len(), values.iter().map(|&v| 1.0 / v.max(floor)));
    let q = &eig.eigenvectors;
    let cov = q * DMatrix::from_diagonal(&inv) * q.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((cov, repaired, values))
}

pub fn laplace<M: ForwardModel>(
    objective: &Objective<'_, M>,
    map: &MapEstimate,
    opts: &LaplaceOptions,
) -> Result<LaplacePosterior> {
    let bounds = objective.prior.bounds();
    let hess = fd_hessian_from_gradient(
        |t, g| {
            objective.value_and_gradient(t, g);
        },
        &map.theta,
        &bounds,
        opts.relative_step,
    );
    let (cov, repaired, eigenvalues) = covariance_from_hessian(&hess, opts.eigen_floor)?;
    let d = map.theta.len();
    let mut covariance = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            covariance[i * d + j] = cov[(i, j)];
        }
    }
    Ok(LaplacePosterior {
        map_point: map.theta.clone(),
        covariance,
        objective_value: map.objective,
        repaired,
        hessian_eigenvalues: eigenvalues,
    })
}

/// Two-sided 95% standard-normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub mean: f64,
    pub variance: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Standard deviation over the absolute mean.
    pub cv: f64,
    /// `100 |mean - true| / |true|`, when the truth is known.
    pub map_ape_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub marginals: Vec<MarginalSummary>,
    pub generalized_variance: f64,
    pub total_variance: f64,
    pub mahalanobis: Option<f64>,
}

pub fn mahalanobis(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Option<f64> {
    let diff = DVector::from_iterator(x.len(), x.iter().zip(mean).map(|(a, b)| a - b));
    let chol = cov.clone().cholesky()?;
    let z = chol.l().solve_lower_triangular(&diff)?;
    Some(z.norm())
}

pub fn summarize(post: &LaplacePosterior, theta_true: Option<&[f64]>) -> PosteriorSummary {
    let d = post.dim();
    let marginals: Vec<MarginalSummary> = (0..d)
        .map(|k| {
            let mean = post.map_point[k];
            let variance = post.variance(k);
            let sd = libm::sqrt(variance.max(0.0));
            MarginalSummary {
                mean,
                variance,
                ci_lower: mean - Z_95 * sd,
                ci_upper: mean + Z_95 * sd,
                cv: sd / mean.abs(),
                map_ape_percent: theta_true.map(|t| 100.0 * (mean - t[k]).abs() / t[k].abs()),
            }
        })
        .collect();
    let cov = post.covariance_matrix();
    let total_variance = marginals.iter().map(|m| m.variance).sum();
    PosteriorSummary {
        marginals,
        generalized_variance: cov.determinant(),
        total_variance,
        mahalanobis: theta_true.and_then(|t| mahalanobis(t, &post.map_point, &cov)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `g(theta) = a theta + b`, row-major `a`.
    struct Linear {
        a: Vec<f64>,
        b: Vec<f64>,
        d: usize,
    }

    impl ForwardModel for Linear {
        fn n_params(&self) -> usize {
            self.d
        }
        fn n_outputs(&self) -> usize {
            self.b.len()
        }
        fn predict(&self, theta: &[f64], out: &mut [f64]) {
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.b[i] + (0..self.d).map(|k| self.a[i * self.d + k] * theta[k]).sum::<f64>();
            }
        }
        fn predict_with_jacobian(&self, theta: &[f64], out: &mut [f64], jac: &mut [f64]) {
            self.predict(theta, out);
            jac.copy_from_slice(&self.a);
        }
    }

    /// Smooth nonlinear model for gradient checks.
    struct Curved;

    impl ForwardModel for Curved {
        fn n_params(&self) -> usize {
            2
        }
        fn n_outputs(&self) -> usize {
            3
        }
        fn predict(&self, t: &[f64], out: &mut [f64]) {
            out[0] = libm::sin(t[0]) * t[1];
            out[1] = libm::exp(0.3 * t[0]) + t[1] * t[1];
            out[2] = t[0] * t[1] * t[1];
        }
        fn predict_with_jacobian(&self, t: &[f64], out: &mut [f64], jac: &mut [f64]) {
            self.predict(t, out);
            jac.copy_from_slice(&[
                libm::cos(t[0]) * t[1],
                libm::sin(t[0]),
                0.3 * libm::exp(0.3 * t[0]),
                2.0 * t[1],
                t[1] * t[1],
                2.0 * t[0] * t[1],
            ]);
        }
    }

    fn wide_prior(d: usize, lo: f64, hi: f64) -> PriorSpec {
        PriorSpec::new(
            vec![Parameter::HillF; d],
            (0..d).map(|_| TruncatedNormal::new(0.5 * (lo + hi), 1e12, lo, hi).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_residual_likelihood() {
        let ll = gaussian_log_likelihood(&[1.0, 2.0], &[1.0, 2.0], 10.0);
        assert!((ll + 4.1405).abs() < 1e-4, "{ll}");
    }

    #[test]
    fn posterior_is_minus_infinity_outside_support() {
        let model = Linear { a: vec![1.0], b: vec![0.0], d: 1 };
        let prior = wide_prior(1, 0.0, 1.0);
        assert_eq!(log_posterior(&[1.5], &[0.5], 1.0, &model, &prior), f64::NEG_INFINITY);
        assert!(log_posterior(&[0.5], &[0.5], 1.0, &model, &prior).is_finite());
    }

    #[test]
    fn conjugate_normal_variance() {
        // y_i = theta + noise, N observations: posterior variance psi^2 / N.
        let n = 6;
        let psi2 = 4.0;
        let model = Linear { a: vec![1.0; n], b: vec![0.0; n], d: 1 };
        let y = [9.0, 11.5, 10.2, 8.7, 10.9, 10.1];
        let prior = wide_prior(1, 0.0, 20.0);
        let obj = Objective { model: &model, prior: &prior, y: &y, noise_variance: psi2 };
        let map = map_estimate(&obj, None, &MapOptions::default()).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        assert!((map.theta[0] - mean).abs() < 1e-6, "{map:?}");
        let post = laplace(&obj, &map, &LaplaceOptions::default()).unwrap();
        let expect = psi2 / n as f64;
        assert!((post.variance(0) / expect - 1.0).abs() < 1e-6, "{}", post.variance(0));
        assert!(!post.repaired);
    }

    #[test]
    fn laplace_is_exact_for_linear_gaussian() {
        let a = vec![1.0, 0.5, -0.3, 2.0, 0.7, 0.7, 1.5, -1.0];
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let model = Linear { a: a.clone(), b, d: 2 };
        let y = [0.9, 1.1, 1.3, 0.2];
        let psi2 = 0.25;
        let (mu, delta2) = ([0.4, 0.6], [0.5, 2.0]);
        let prior = PriorSpec::new(
            vec![Parameter::HillF, Parameter::HillG],
            (0..2).map(|k| TruncatedNormal::new(mu[k], delta2[k], -10.0, 10.0).unwrap()).collect(),
        )
        .unwrap();
        let obj = Objective { model: &model, prior: &prior, y: &y, noise_variance: psi2 };
        let map = map_estimate(&obj, None, &MapOptions::default()).unwrap();
        let post = laplace(&obj, &map, &LaplaceOptions::default()).unwrap();

        let am = DMatrix::from_row_slice(4, 2, &a);
        let precision = am.transpose() * &am / psi2 + DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / delta2[0], 1.0 / delta2[1]]));
        let cov = precision.clone().try_inverse().unwrap();
        let rhs = am.transpose() * (DVector::from_row_slice(&y) - DVector::from_row_slice(&[0.1, -0.2, 0.3, 0.0])) / psi2
            + DVector::from_vec(vec![mu[0] / delta2[0], mu[1] / delta2[1]]);
        let mean = &cov * rhs;
        for k in 0..2 {
            assert!((map.theta[k] - mean[k]).abs() < 1e-6, "{map:?} vs {mean}");
        }
        let got = post.covariance_matrix();
        for i in 0..2 {
            for j in 0..2 {
                let scale = libm::sqrt(cov[(i, i)] * cov[(j, j)]);
                assert!((got[(i, j)] - cov[(i, j)]).abs() < 1e-6 * scale, "{got} vs {cov}");
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_fourth_order_differences() {
        let prior = PriorSpec::new(
            vec![Parameter::HillF, Parameter::HillG],
            vec![
                TruncatedNormal::new(0.5, 1.0, -2.0, 2.0).unwrap(),
                TruncatedNormal::new(0.2, 0.3, -2.0, 2.0).unwrap(),
            ],
        )
        .unwrap();
        let y = [0.3, 1.4, -0.2];
        let obj = Objective { model: &Curved, prior: &prior, y: &y, noise_variance: 0.05 };
        let pts = halton(2, 10, &[(-1.5, 1.5), (-1.5, 1.5)]).unwrap();
        for p in pts {
            let mut g = [0.0; 2];
            obj.value_and_gradient(&p, &mut g);
            for k in 0..2 {
                let h = 1e-3;
                let at = |s: f64| {
                    let mut q = p.clone();
                    q[k] += s * h;
                    obj.value(&q)
                };
                let fd = (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h);
                assert!((g[k] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{p:?} {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn map_stops_at_the_prior_bound() {
        let model = Linear { a: vec![1.0; 3], b: vec![0.0; 3], d: 1 };
        let prior = wide_prior(1, 0.0, 1.0);
        let y = [2.0, 2.1, 1.9];
        let obj = Objective { model: &model, prior: &prior, y: &y, noise_variance: 1.0 };
        let map = map_estimate(&obj, Some(&[0.3]), &MapOptions::default()).unwrap();
        assert_eq!(map.theta, [1.0]);
        assert_eq!(map.starts, 5);
        // The stencil shifts inward, so the curvature is still recovered.
        let post = laplace(&obj, &map, &LaplaceOptions::default()).unwrap();
        assert!((post.variance(0) * 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn indefinite_hessian_is_repaired_and_flagged() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let (cov, repaired, eig) = covariance_from_hessian(&h, 1e-12).unwrap();
        assert!(repaired);
        assert_eq!(eig.len(), 2);
        assert!(cov.clone().cholesky().is_some());
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((cov[(1, 1)] - 0.5e12).abs() < 1e-3);

        let neg = DMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, -1.0]);
        assert!(matches!(covariance_from_hessian(&neg, 1e-12), Err(Error::DegeneratePosterior { .. })));
    }

    fn posterior(mean: Vec<f64>, cov: Vec<f64>) -> LaplacePosterior {
        LaplacePosterior {
            map_point: mean,
            covariance: cov,
            objective_value: 0.0,
            repaired: false,
            hessian_eigenvalues: Vec::new(),
        }
    }

    #[test]
    fn credible_interval_matches_reported_values() {
        let s = summarize(&posterior(vec![0.55, 0.45], vec![6.75e-5, 0.0, 0.0, 4.57e-5]), None);
        let m = s.marginals[0];
        assert!((m.ci_lower - 0.534).abs() < 5e-4 && (m.ci_upper - 0.566).abs() < 5e-4, "{m:?}");
        assert!((s.total_variance - 1.13e-4).abs() < 5e-7);
        assert!((s.generalized_variance - 6.75e-5 * 4.57e-5).abs() < 1e-15);
        assert!(s.mahalanobis.is_none());
    }

    #[test]
    fn mahalanobis_reduces_to_euclidean() {
        let s = summarize(&posterior(vec![1.0, 2.0], vec![1.0, 0.0, 0.0, 1.0]), Some(&[4.0, 6.0]));
        assert!((s.mahalanobis.unwrap() - 5.0).abs() < 1e-12);
        let ape = s.marginals[1].map_ape_percent.unwrap();
        assert!((ape - 100.0 * 4.0 / 6.0).abs() < 1e-12);
    }
}
