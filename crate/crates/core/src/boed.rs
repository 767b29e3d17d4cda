//! Expected information gain by nested Monte Carlo, and greedy selection of
//! the next load step.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{ForwardModel, LaplacePosterior, PriorSpec};
use crate::loadpath::{Axis, LoadStep};
use crate::stats::{mix_seed, normal, standard_normal, stream_rng, MultivariateNormal};

/// What to do when an inner evidence average underflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnderflowPolicy {
    ErrorOut,
    /// Redo the affected outer term with ten times as many inner samples.
    #[default]
    EscalateM,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigSettings {
    pub n_outer: usize,
    pub n_inner: usize,
    /// One set of inner samples serves every outer term.
    pub reuse_inner_across_outer: bool,
    /// Candidates see identical outer samples and noise.
    pub reuse_outer_across_candidates: bool,
    pub underflow_policy: UnderflowPolicy,
    /// Tenfold increases of M allowed per term under `EscalateM`.
    pub max_escalations: u32,
}

impl Default for EigSettings {
    fn default() -> Self {
        EigSettings {
            n_outer: 10_000,
            n_inner: 100,
            reuse_inner_across_outer: true,
            reuse_outer_across_candidates: true,
            underflow_policy: UnderflowPolicy::EscalateM,
            max_escalations: 2,
        }
    }
}

impl EigSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_outer == 0 || self.n_inner == 0 {
            return Err(Error::Config("EIG sample counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    /// Nats.
    pub value: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub underflow_count: usize,
    /// Outer terms recomputed with a larger inner sample.
    pub escalated_terms: usize,
    /// Belief draws that hit the rejection cap and were clamped to the box.
    pub clamped_samples: usize,
    pub candidate: LoadStep,
}

/// Source of parameter draws representing the current state of knowledge.
pub trait BeliefSampler {
    fn dim(&self) -> usize;
    /// Writes one draw into `out`; returns `true` if it had to be clamped.
    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> bool;
}

/// Draws from the truncated-normal prior.
#[derive(Debug, Clone, Copy)]
pub struct PriorBelief<'a>(pub &'a PriorSpec);

impl BeliefSampler for PriorBelief<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> bool {
        for (o, m) in out.iter_mut().zip(&self.0.marginals) {
            *o = m.sample(rng);
        }
        false
    }
}

/// The Laplace Gaussian restricted to the prior box by rejection.
#[derive(Debug, Clone)]
pub struct LaplaceBelief {
    mvn: MultivariateNormal,
    bounds: Vec<(f64, f64)>,
    pub max_attempts: usize,
}

impl LaplaceBelief {
    pub fn new(post: &LaplacePosterior, bounds: Vec<(f64, f64)>) -> Result<Self> {
        Ok(LaplaceBelief {
            mvn: MultivariateNormal::new(&post.map_point, post.covariance_matrix())?,
            bounds,
            max_attempts: 10_000,
        })
    }
}

impl BeliefSampler for LaplaceBelief {
    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> bool {
        for _ in 0..self.max_attempts {
            self.mvn.sample_into(rng, out);
            if out.iter().zip(&self.bounds).all(|(x, (a, b))| *x >= *a && *x <= *b) {
                return false;
            }
        }
        for (x, (a, b)) in out.iter_mut().zip(&self.bounds) {
            *x = x.clamp(*a, *b);
        }
        true
    }
}

/// Pre-drawn samples, so candidates can be compared on identical streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Row-major draws, `n x dim`.
    pub theta: Vec<f64>,
    pub dim: usize,
    pub clamped: usize,
}

impl SampleSet {
    pub fn draw<B: BeliefSampler + ?Sized>(belief: &B, n: usize, rng: &mut dyn RngCore) -> Self {
        let dim = belief.dim();
        let mut theta = vec![0.0; n * dim];
        let mut clamped = 0;
        for row in theta.chunks_exact_mut(dim) {
            clamped += belief.sample_into(rng, row) as usize;
        }
        SampleSet { theta, dim, clamped }
    }

    pub fn len(&self) -> usize {
        self.theta.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Outer draws together with their standard-normal measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterSamples {
    pub theta: SampleSet,
    /// Row-major, `n x outputs`.
    pub noise: Vec<f64>,
    pub outputs: usize,
}

impl OuterSamples {
    pub fn draw<B: BeliefSampler + ?Sized>(belief: &B, n: usize, outputs: usize, rng: &mut dyn RngCore) -> Self {
        let theta = SampleSet::draw(belief, n, rng);
        let noise = (0..n * outputs).map(|_| standard_normal(rng)).collect();
        OuterSamples { theta, noise, outputs }
    }
}

const OUTER_STREAM: u64 = 1;
const INNER_STREAM: u64 = 2;
const ESCALATION_STREAM: u64 = 3;

/// `ln` of the smallest normal double; an inner average whose largest term
/// falls below this would underflow if evaluated directly.
const LN_MIN_POSITIVE: f64 = -708.396_418_532_264_1;

/// Running state of one estimator evaluation.
struct Terms {
    sum: f64,
    underflow: usize,
    escalated: usize,
    clamped: usize,
}

fn predict_all<M: ForwardModel>(model: &M, samples: &SampleSet) -> Vec<f64> {
    let k = model.n_outputs();
    let mut out = vec![0.0; samples.len() * k];
    for (row, g) in samples.theta.chunks_exact(samples.dim).zip(out.chunks_exact_mut(k)) {
        model.predict(row, g);
    }
    out
}

/// `ln (1/M) sum_m exp(l_m)` with `l_m = -|y - g_m|^2 / (2 psi^2)`, plus the
/// largest `l_m`, which signals underflow of the direct form.
fn log_mean_likelihood(y: &[f64], inner_pred: &[f64], noise_variance: f64, scratch: &mut Vec<f64>) -> (f64, f64) {
    let k = y.len();
    scratch.clear();
    let inv = 0.5 / noise_variance;
    let mut max = f64::NEG_INFINITY;
    for g in inner_pred.chunks_exact(k) {
        let mut ss = 0.0;
        for i in 0..k {
            let r = y[i] - g[i];
            ss += r * r;
        }
        let l = -ss * inv;
        max = max.max(l);
        scratch.push(l);
    }
    if max == f64::NEG_INFINITY {
        return (f64::NEG_INFINITY, max);
    }
    let s: f64 = scratch.iter().map(|l| libm::exp(l - max)).sum();
    (max + libm::log(s / scratch.len() as f64), max)
}

/// Nested Monte Carlo EIG of one candidate given pre-drawn outer samples and,
/// when shared, pre-drawn inner samples. `seed` feeds fresh or escalated
/// inner draws.
#[allow(clippy::too_many_arguments)]
pub fn estimate_eig_with<M: ForwardModel, B: BeliefSampler + ?Sized>(
    model: &M,
    belief: &B,
    noise_variance: f64,
    settings: &EigSettings,
    candidate: LoadStep,
    outer: &OuterSamples,
    inner: Option<&SampleSet>,
    seed: u64,
) -> Result<EigEstimate> {
    settings.validate()?;
    if !(noise_variance > 0.0) {
        return Err(Error::Domain("noise variance must be positive"));
    }
    let k = model.n_outputs();
    if outer.outputs != k {
        return Err(Error::Config("outer noise does not match the model outputs".into()));
    }
    let psi = libm::sqrt(noise_variance);
    let n = outer.theta.len();
    let d = outer.theta.dim;
    let shared_pred = inner.map(|s| predict_all(model, s));
    // The normalising constants of numerator and evidence cancel.
    let log_norm = -0.5 * k as f64 * (2.0 * normal::HALF_LN_2PI + libm::log(noise_variance));

    let mut terms = Terms {
        sum: 0.0,
        underflow: 0,
        escalated: 0,
        clamped: outer.theta.clamped + inner.map_or(0, |s| s.clamped),
    };
    let mut g0 = vec![0.0; k];
    let mut y = vec![0.0; k];
    let mut scratch = Vec::with_capacity(settings.n_inner);
    for j in 0..n {
        model.predict(&outer.theta.theta[j * d..(j + 1) * d], &mut g0);
        let eps = &outer.noise[j * k..(j + 1) * k];
        let mut log_num = 0.0;
        for i in 0..k {
            y[i] = g0[i] + psi * eps[i];
            log_num -= 0.5 * eps[i] * eps[i];
        }

        let (mut log_ev, mut max) = match &shared_pred {
            Some(pred) => log_mean_likelihood(&y, pred, noise_variance, &mut scratch),
            None => {
                let mut rng = stream_rng(mix_seed(&[seed, j as u64]), INNER_STREAM);
                let fresh = SampleSet::draw(belief, settings.n_inner, &mut rng);
                terms.clamped += fresh.clamped;
                log_mean_likelihood(&y, &predict_all(model, &fresh), noise_variance, &mut scratch)
            }
        };
        let mut m = settings.n_inner;
        let mut level = 0;
        while max + log_norm < LN_MIN_POSITIVE {
            if settings.underflow_policy == UnderflowPolicy::ErrorOut || level == settings.max_escalations {
                terms.underflow += 1;
                break;
            }
            level += 1;
            m *= 10;
            let mut rng = stream_rng(mix_seed(&[seed, j as u64, level as u64]), ESCALATION_STREAM);
            let fresh = SampleSet::draw(belief, m, &mut rng);
            terms.clamped += fresh.clamped;
            (log_ev, max) = log_mean_likelihood(&y, &predict_all(model, &fresh), noise_variance, &mut scratch);
            if max + log_norm >= LN_MIN_POSITIVE {
                terms.escalated += 1;
            }
        }
        terms.sum += log_num - log_ev;
    }
    if terms.underflow > 0 {
        return Err(Error::Underflow { count: terms.underflow });
    }
    let value = terms.sum / n as f64;
    if !value.is_finite() {
        return Err(Error::Domain("EIG estimate is not finite"));
    }
    Ok(EigEstimate {
        value,
        n_outer: n,
        n_inner: settings.n_inner,
        underflow_count: 0,
        escalated_terms: terms.escalated,
        clamped_samples: terms.clamped,
        candidate,
    })
}

/// EIG of every candidate, drawing outer and inner samples from `seed`.
/// With pairing on, all candidates share one outer and one inner stream.
pub fn estimate_candidates<M: ForwardModel, B: BeliefSampler + ?Sized>(
    candidates: &[(LoadStep, M)],
    belief: &B,
    noise_variance: f64,
    settings: &EigSettings,
    seed: u64,
) -> Result<Vec<EigEstimate>> {
    settings.validate()?;
    let mut shared: Option<(OuterSamples, Option<SampleSet>)> = None;
    let mut out = Vec::with_capacity(candidates.len());
    for (c, (step, model)) in candidates.iter().enumerate() {
        let stream_seed = if settings.reuse_outer_across_candidates {
            mix_seed(&[seed])
        } else {
            mix_seed(&[seed, c as u64 + 1])
        };
        let draws = match (&shared, settings.reuse_outer_across_candidates) {
            (Some(s), true) if s.0.outputs == model.n_outputs() => None,
            _ => Some(draw_samples(belief, model.n_outputs(), settings, stream_seed)),
        };
        if let Some(d) = draws {
            shared = Some(d);
        }
        let (outer, inner) = shared.as_ref().expect("samples drawn above");
        out.push(estimate_eig_with(
            model,
            belief,
            noise_variance,
            settings,
            *step,
            outer,
            inner.as_ref(),
            stream_seed,
        )?);
    }
    Ok(out)
}

/// Outer samples with noise, and the shared inner set when enabled.
pub fn draw_samples<B: BeliefSampler + ?Sized>(
    belief: &B,
    outputs: usize,
    settings: &EigSettings,
    stream_seed: u64,
) -> (OuterSamples, Option<SampleSet>) {
    let mut rng = stream_rng(stream_seed, OUTER_STREAM);
    let outer = OuterSamples::draw(belief, settings.n_outer, outputs, &mut rng);
    let inner = settings.reuse_inner_across_outer.then(|| {
        let mut rng = stream_rng(stream_seed, INNER_STREAM);
        SampleSet::draw(belief, settings.n_inner, &mut rng)
    });
    (outer, inner)
}

/// Candidate with the largest EIG. Ties go to the earlier axis (e11 first).
pub fn select_next_step(estimates: &[EigEstimate]) -> Result<LoadStep> {
    let mut best: Option<&EigEstimate> = None;
    for e in estimates {
        if e.underflow_count > 0 || !e.value.is_finite() {
            return Err(Error::Domain("cannot select on a rejected EIG estimate"));
        }
        best = match best {
            None => Some(e),
            Some(b) => {
                let better = e.value > b.value
                    || (e.value == b.value && axis_rank(e.candidate.axis) < axis_rank(b.candidate.axis));
                Some(if better { e } else { b })
            }
        };
    }
    best.map(|e| e.candidate).ok_or(Error::Empty("no EIG estimates"))
}

fn axis_rank(a: Axis) -> usize {
    Axis::BOTH.iter().position(|b| *b == a).unwrap_or(usize::MAX)
}

/// Mutual information of `y = theta + e` with `theta ~ N(0, tau2)` and
/// `e ~ N(0, psi2)`: `ln(1 + tau2/psi2) / 2`.
pub fn analytic_eig_linear_gaussian(tau2: f64, psi2: f64) -> Result<f64> {
    if !(tau2 >= 0.0 && psi2 > 0.0) {
        return Err(Error::Domain("need tau2 >= 0 and psi2 > 0"));
    }
    Ok(0.5 * libm::log1p(tau2 / psi2))
}

/// `y = slope * theta`, one parameter and one output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLinearModel {
    pub slope: f64,
}

impl ForwardModel for ScalarLinearModel {
    fn n_params(&self) -> usize {
        1
    }
    fn n_outputs(&self) -> usize {
        1
    }
    fn predict(&self, theta: &[f64], out: &mut [f64]) {
        out[0] = self.slope * theta[0];
    }
    fn predict_with_jacobian(&self, theta: &[f64], out: &mut [f64], jac: &mut [f64]) {
        self.predict(theta, out);
        jac[0] = self.slope;
    }
}

/// Zero-mean normal belief over one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarGaussianBelief {
    pub variance: f64,
}

impl BeliefSampler for ScalarGaussianBelief {
    fn dim(&self) -> usize {
        1
    }
    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> bool {
        out[0] = libm::sqrt(self.variance) * standard_normal(rng);
        false
    }
}

/// Nested MC estimate against the closed form on `y = theta + e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianCheck {
    pub tau2: f64,
    pub psi2: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub estimate: f64,
    pub analytic: f64,
}

impl LinearGaussianCheck {
    pub fn abs_error(&self) -> f64 {
        (self.estimate - self.analytic).abs()
    }
}

pub fn check_linear_gaussian(tau2: f64, psi2: f64, n_outer: usize, n_inner: usize, seed: u64) -> Result<LinearGaussianCheck> {
    let analytic = analytic_eig_linear_gaussian(tau2, psi2)?;
    let settings = EigSettings {
        n_outer,
        n_inner,
        ..EigSettings::default()
    };
    let c = [(
        LoadStep {
            axis: Axis::E11,
            delta_eps: 1.0,
        },
        ScalarLinearModel { slope: 1.0 },
    )];
    let est = estimate_candidates(&c, &ScalarGaussianBelief { variance: tau2 }, psi2, &settings, seed)?;
    Ok(LinearGaussianCheck {
        tau2,
        psi2,
        n_outer,
        n_inner,
        estimate: est[0].value,
        analytic,
    })
}
