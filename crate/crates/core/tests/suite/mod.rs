//! Property checks shared by the core test target and the acceptance run.
//! Each returns a description of the first failure.
#![allow(dead_code)]

use icc_core::boed::{check_linear_gaussian, estimate_candidates, EigSettings, ScalarGaussianBelief, ScalarLinearModel};
use icc_core::constitutive::{
    integrate_step, simulate_path, MaterialParameters, MaterialState, Parameter, ReturnMapOptions,
};
use icc_core::icc::{run_trial, DesignMode, ExemplarConfig, TrialRecord};
use icc_core::inference::{
    covariance_from_hessian, fd_hessian, laplace, map_estimate, summarize, ForwardModel, LaplacePosterior, MapOptions,
    Objective, PriorSpec,
};
use icc_core::loadpath::{Axis, LoadPath, LoadStep, MeasurementSchedule};
use icc_core::stats::{halton, halton_from, standard_normal, stream_rng, TruncatedNormal};
use icc_core::surrogate::{generate_training_data, SurrogateBank};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

pub type Check = fn() -> Result<(), String>;

pub const ALL: [(&str, Check); 11] = [
    ("plastic incompressibility", plastic_incompressibility),
    ("kappa monotonicity", kappa_monotonicity),
    ("isotropy axis-swap symmetry", axis_swap_symmetry),
    ("Laplace exactness on quadratics", laplace_exact_on_quadratics),
    ("total variance = sum of marginal variances", total_variance_is_trace),
    ("Mahalanobis Euclidean reduction", mahalanobis_euclidean),
    ("Halton determinism", halton_determinism),
    ("run-replay bit determinism", replay_determinism),
    ("EIG non-negativity in expectation", eig_non_negative),
    ("EIG N-scaling consistency", eig_scaling),
    ("credible-interval coverage", ci_coverage),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config { cases, failure_persistence: None, ..Config::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(cases: u32, s: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&s, test).map_err(|e| e.to_string())
}

fn material() -> impl Strategy<Value = MaterialParameters> {
    (0.3..0.7f64, 0.3..0.7f64, 0.3..0.7f64, 50.0..400.0f64, 0.0..300.0f64, 0.0..300.0f64, 1.0..60.0f64).prop_map(
        |(f, g, h, sy, lin, a, n)| MaterialParameters {
            hill_f: f,
            hill_g: g,
            hill_h: h,
            yield_stress: sy,
            linear_hardening: lin,
            voce_modulus: a,
            voce_exponent: n,
            ..MaterialParameters::reference()
        },
    )
}

fn increments() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-4e-4..4e-4f64, -4e-4..4e-4f64), 1..60)
}

pub fn plastic_incompressibility() -> Result<(), String> {
    run(64, (material(), increments()), |(p, incs)| {
        let opts = ReturnMapOptions::default();
        let mut s = MaterialState::virgin();
        for (a, b) in incs {
            s = integrate_step(&s, a, b, &p, &opts).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let trace = s.eps11_p + s.eps22_p + s.eps33_p;
            let scale = s.eps11_p.abs() + s.eps22_p.abs() + s.eps33_p.abs();
            prop_assert!(trace.abs() <= 1e-12 + 1e-9 * scale, "plastic trace {}", trace);
        }
        Ok(())
    })
}

pub fn kappa_monotonicity() -> Result<(), String> {
    run(64, (material(), increments()), |(p, incs)| {
        let opts = ReturnMapOptions::default();
        let mut s = MaterialState::virgin();
        for (a, b) in incs {
            let next = integrate_step(&s, a, b, &p, &opts).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(next.kappa >= s.kappa, "kappa {} -> {}", s.kappa, next.kappa);
            s = next;
        }
        Ok(())
    })
}

fn swap(a: Axis) -> Axis {
    if a == Axis::E11 {
        Axis::E22
    } else {
        Axis::E11
    }
}

pub fn axis_swap_symmetry() -> Result<(), String> {
    let s = (0.3..0.7f64, 0.3..0.7f64, prop::collection::vec(prop::bool::ANY, 1..4));
    run(32, s, |(fg, h, bits)| {
        let p = MaterialParameters { hill_f: fg, hill_g: fg, hill_h: h, ..MaterialParameters::reference() };
        let axes: Vec<Axis> = bits.iter().map(|&b| if b { Axis::E11 } else { Axis::E22 }).collect();
        let swapped: Vec<Axis> = axes.iter().copied().map(swap).collect();
        let sched = MeasurementSchedule::new(2, 40).unwrap();
        let opts = ReturnMapOptions::default();
        let a = simulate_path(&p, &LoadPath::new(0.01, axes), &sched, &opts).unwrap();
        let b = simulate_path(&p, &LoadPath::new(0.01, swapped), &sched, &opts).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.sigma11 - y.sigma22).abs() <= 1e-9 * (1.0 + x.sigma11.abs()));
            prop_assert!((x.sigma22 - y.sigma11).abs() <= 1e-9 * (1.0 + x.sigma22.abs()));
        }
        Ok(())
    })
}

pub fn laplace_exact_on_quadratics() -> Result<(), String> {
    let s = (
        prop::collection::vec(-1.0..1.0f64, 3),
        prop::collection::vec(0.5..3.0f64, 3),
        prop::collection::vec(-0.5..0.5f64, 3),
    );
    run(64, s, |(lower, diag, centre)| {
        let mut l = DMatrix::<f64>::zeros(3, 3);
        let mut it = lower.iter();
        for i in 0..3 {
            l[(i, i)] = diag[i];
            for j in 0..i {
                l[(i, j)] = *it.next().unwrap();
            }
        }
        let h = &l * l.transpose();
        let f = |x: &[f64]| {
            let d = DVector::from_iterator(3, x.iter().zip(&centre).map(|(a, b)| a - b));
            0.5 * (d.transpose() * &h * &d)[(0, 0)]
        };
        let est = fd_hessian(f, &centre, &[(-10.0, 10.0); 3], 1e-3);
        let (cov, repaired, _) = covariance_from_hessian(&est, 1e-12).unwrap();
        let exact = h.clone().try_inverse().unwrap();
        prop_assert!(!repaired);
        prop_assert!((cov - &exact).norm() <= 1e-6 * exact.norm());
        Ok(())
    })
}

fn posterior(mean: Vec<f64>, cov: &DMatrix<f64>) -> LaplacePosterior {
    let d = mean.len();
    let covariance = (0..d * d).map(|i| cov[(i / d, i % d)]).collect();
    LaplacePosterior { map_point: mean, covariance, objective_value: 0.0, repaired: false, hessian_eigenvalues: vec![] }
}

pub fn total_variance_is_trace() -> Result<(), String> {
    let s = (prop::collection::vec(-1.0..1.0f64, 9), prop::collection::vec(0.1..5.0f64, 3));
    run(64, s, |(entries, mean)| {
        let a = DMatrix::from_row_slice(3, 3, &entries);
        let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
        let s = summarize(&posterior(mean.clone(), &cov), Some(&mean));
        let sum: f64 = s.marginals.iter().map(|m| m.variance).sum();
        prop_assert_eq!(s.total_variance, sum);
        prop_assert!((s.total_variance - cov.trace()).abs() <= 1e-12 * cov.trace());
        prop_assert!((s.generalized_variance - cov.determinant()).abs() <= 1e-10 * cov.determinant().abs());
        prop_assert_eq!(s.mahalanobis, Some(0.0));
        Ok(())
    })
}

pub fn mahalanobis_euclidean() -> Result<(), String> {
    let s = (prop::collection::vec(-10.0..10.0f64, 1..5), prop::collection::vec(-3.0..3.0f64, 5));
    run(64, s, |(mean, shift)| {
        let d = mean.len();
        let truth: Vec<f64> = mean.iter().zip(&shift).map(|(m, s)| m + s).collect();
        let md = summarize(&posterior(mean, &DMatrix::identity(d, d)), Some(&truth)).mahalanobis.unwrap();
        let euclid = shift[..d].iter().map(|s| s * s).sum::<f64>().sqrt();
        prop_assert!((md - euclid).abs() <= 1e-12 * (1.0 + euclid), "MD {} vs {}", md, euclid);
        Ok(())
    })
}

pub fn halton_determinism() -> Result<(), String> {
    run(64, (1usize..6, 1usize..50, 0usize..200), |(dim, n, start)| {
        let bounds = vec![(0.0, 1.0); dim];
        prop_assert_eq!(halton(dim, n, &bounds).unwrap(), halton(dim, n, &bounds).unwrap());
        let long = halton_from(dim, 0, start + n, &bounds).unwrap();
        let tail = halton_from(dim, start as u64, n, &bounds).unwrap();
        prop_assert_eq!(&long[start..], &tail[..]);
        prop_assert!(tail.iter().flatten().all(|v| (0.0..1.0).contains(v)));
        Ok(())
    })
}

fn bits(r: &TrialRecord) -> Vec<u64> {
    r.steps
        .iter()
        .flat_map(|s| s.observations.iter().chain(&s.posterior.covariance).chain(&s.map.theta))
        .chain(r.steps.iter().flat_map(|s| s.eig.iter().map(|e| &e.value)))
        .map(|v| v.to_bits())
        .collect()
}

pub fn replay_determinism() -> Result<(), String> {
    let mut config = ExemplarConfig::exemplar1(1).map_err(|e| e.to_string())?;
    config.bank.depth = 3;
    config.surrogate.n_train = 40;
    config.eig.n_outer = 300;
    config.eig.n_inner = 40;
    let data = generate_training_data(&config.bank, config.surrogate.n_train).map_err(|e| e.to_string())?;
    let bank = SurrogateBank::build(config.bank.clone(), &data, &config.surrogate.fit_options()).map_err(|e| e.to_string())?;
    for mode in DesignMode::ALL {
        for idx in [0, 3] {
            let a = run_trial(&config, &bank, mode, idx).map_err(|e| e.to_string())?;
            let b = run_trial(&config, &bank, mode, idx).map_err(|e| e.to_string())?;
            if a != b || bits(&a) != bits(&b) {
                return Err(format!("{mode} trial {idx} differs between replays"));
            }
        }
    }
    Ok(())
}

pub fn eig_non_negative() -> Result<(), String> {
    // A weakly informative design: single estimates may dip below zero but
    // their mean over seeds must not.
    let s = EigSettings { n_outer: 2_000, n_inner: 200, ..EigSettings::default() };
    let c = [(LoadStep { axis: Axis::E11, delta_eps: 1.0 }, ScalarLinearModel { slope: 0.05 })];
    let belief = ScalarGaussianBelief { variance: 1.0 };
    let vals: Vec<f64> = (0..20u64)
        .map(|seed| estimate_candidates(&c, &belief, 1.0, &s, seed).map(|e| e[0].value))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let exact = 0.5 * (0.05f64 * 0.05).ln_1p();
    if mean >= 0.0 && (mean - exact).abs() < 5e-3 {
        Ok(())
    } else {
        Err(format!("mean estimate {mean}, exact {exact}"))
    }
}

pub fn eig_scaling() -> Result<(), String> {
    let exact = 0.5 * 2f64.ln();
    let rmse = |n: usize| -> Result<f64, String> {
        let mut sq = 0.0;
        for s in 0..8u64 {
            let e = check_linear_gaussian(1.0, 1.0, n, n, 50 + s).map_err(|e| e.to_string())?.estimate;
            sq += (e - exact) * (e - exact);
        }
        Ok((sq / 8.0).sqrt())
    };
    let (coarse, fine) = (rmse(250)?, rmse(4_000)?);
    // 16x more samples: outer error falls as N^-1/2, inner bias as 1/M.
    if fine < 0.5 * coarse {
        Ok(())
    } else {
        Err(format!("RMSE {coarse} at N=M=250 but {fine} at N=M=4000"))
    }
}

struct Linear;

impl ForwardModel for Linear {
    fn n_params(&self) -> usize {
        2
    }
    fn n_outputs(&self) -> usize {
        3
    }
    fn predict(&self, t: &[f64], out: &mut [f64]) {
        out[0] = t[0];
        out[1] = t[0] + t[1];
        out[2] = 2.0 * t[1];
    }
    fn predict_with_jacobian(&self, t: &[f64], out: &mut [f64], jac: &mut [f64]) {
        self.predict(t, out);
        jac.copy_from_slice(&[1.0, 0.0, 1.0, 1.0, 0.0, 2.0]);
    }
}

/// Linear-Gaussian model with a prior wide enough that truncation never
/// binds: the Laplace posterior is exact, so 95% intervals should cover the
/// truth 92-98% of the time over 1200 marginals.
pub fn ci_coverage() -> Result<(), String> {
    let wide = || TruncatedNormal::new(0.0, 4.0, -40.0, 40.0).unwrap();
    let prior = PriorSpec::new(vec![Parameter::HillF, Parameter::HillG], vec![wide(), wide()]).map_err(|e| e.to_string())?;
    let psi2: f64 = 0.25;
    let mut rng = stream_rng(2024, 0);
    let (mut covered, mut total) = (0, 0);
    for _ in 0..600 {
        let truth = [2.0 * standard_normal(&mut rng), 2.0 * standard_normal(&mut rng)];
        let mut y = [0.0; 3];
        Linear.predict(&truth, &mut y);
        y.iter_mut().for_each(|v| *v += psi2.sqrt() * standard_normal(&mut rng));
        let obj = Objective { model: &Linear, prior: &prior, y: &y, noise_variance: psi2 };
        let map = map_estimate(&obj, None, &MapOptions::default()).map_err(|e| e.to_string())?;
        let post = laplace(&obj, &map, &Default::default()).map_err(|e| e.to_string())?;
        for (k, m) in summarize(&post, Some(&truth)).marginals.iter().enumerate() {
            total += 1;
            covered += usize::from(m.ci_lower <= truth[k] && truth[k] <= m.ci_upper);
        }
    }
    let rate = covered as f64 / total as f64;
    if (0.92..=0.98).contains(&rate) {
        Ok(())
    } else {
        Err(format!("coverage {rate}"))
    }
}
