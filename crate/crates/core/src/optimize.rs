//! Bound-constrained quasi-Newton minimisation (projected BFGS).

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient's largest component falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step changes `f` by less than `f_tol * (1 + |f|)`.
    pub f_tol: f64,
    pub max_backtracks: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            max_iter: 200,
            grad_tol: 1e-7,
            f_tol: 1e-14,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((xi, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.clamp(*lo, *hi);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let step = (x[i] - g[i]).clamp(lower[i], upper[i]);
        worst = worst.max(libm::fabs(x[i] - step));
    }
    worst
}

/// Minimises `f` over the box `[lower, upper]`.
///
/// `f(x, grad)` returns the objective and writes its gradient. Non-finite
/// values are treated as +infinity by the line search, so the objective may
/// signal infeasible points that way.
pub fn minimize_box<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &MinimizeOptions,
) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    assert!(lower.len() == n && upper.len() == n, "bounds must match x0");

    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Minimum {
            x,
            f: f64::INFINITY,
            iterations: 0,
            converged: false,
        };
    }

    // Inverse Hessian approximation, row major.
    let mut hinv = identity(n);
    let mut d = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut free = vec![true; n];

    for iter in 0..opts.max_iter {
        if projected_gradient_norm(&x, &g, lower, upper) <= opts.grad_tol {
            return Minimum {
                x,
                f: fx,
                iterations: iter,
                converged: true,
            };
        }

        // Variables pinned at a bound by the gradient are held fixed.
        for i in 0..n {
            free[i] = !((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0));
        }
        let mut slope = 0.0;
        for i in 0..n {
            d[i] = 0.0;
            if free[i] {
                for j in 0..n {
                    if free[j] {
                        d[i] -= hinv[i * n + j] * g[j];
                    }
                }
                slope += d[i] * g[i];
            }
        }
        if !(slope < 0.0) {
            hinv = identity(n);
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..opts.max_backtracks {
            for i in 0..n {
                xn[i] = x[i] + t * d[i];
            }
            project(&mut xn, lower, upper);
            let fn_ = f(&xn, &mut gn);
            let mut decrease = 0.0;
            for i in 0..n {
                decrease += g[i] * (xn[i] - x[i]);
            }
            if fn_.is_finite() && fn_ <= fx + 1e-4 * decrease.min(0.0) {
                accepted = true;
                let change = fx - fn_;
                update_inverse_hessian(&mut hinv, &x, &xn, &g, &gn);
                core::mem::swap(&mut x, &mut xn);
                core::mem::swap(&mut g, &mut gn);
                fx = fn_;
                if change.abs() <= opts.f_tol * (1.0 + fx.abs()) {
                    let converged =
                        projected_gradient_norm(&x, &g, lower, upper) <= libm::sqrt(opts.grad_tol);
                    return Minimum {
                        x,
                        f: fx,
                        iterations: iter + 1,
                        converged,
                    };
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // A failed search along a quasi-Newton direction gets one more
            // chance along steepest descent.
            if hinv != identity(n) {
                hinv = identity(n);
                continue;
            }
            let converged = projected_gradient_norm(&x, &g, lower, upper) <= libm::sqrt(opts.grad_tol);
            return Minimum {
                x,
                f: fx,
                iterations: iter,
                converged,
            };
        }
    }
    let converged = projected_gradient_norm(&x, &g, lower, upper) <= opts.grad_tol;
    Minimum {
        x,
        f: fx,
        iterations: opts.max_iter,
        converged,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn update_inverse_hessian(h: &mut [f64], x: &[f64], xn: &[f64], g: &[f64], gn: &[f64]) {
    let n = x.len();
    let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
    let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
    let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
    let ss: f64 = s.iter().map(|a| a * a).sum();
    let yy: f64 = y.iter().map(|a| a * a).sum();
    if !(sy > 1e-12 * libm::sqrt(ss * yy)) {
        return;
    }
    let first = h.iter().enumerate().all(|(k, v)| *v == if k % (n + 1) == 0 { 1.0 } else { 0.0 });
    if first {
        // Scale the initial identity to the observed curvature.
        let gamma = sy / yy;
        for i in 0..n {
            h[i * n + i] = gamma;
        }
    }
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum())
        .collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - (hy[i] * s[j] + s[i] * hy[j]));
        }
    }
}
