//! The interlaced characterization and calibration loop: simulate a load
//! step, calibrate on everything seen so far, pick the next step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::boed::{estimate_candidates, select_next_step, EigEstimate, EigSettings, LaplaceBelief, PriorBelief};
use crate::constitutive::{simulate_history, simulate_path_dense, MaterialParameters, MaterialState, Parameter};
use crate::error::{Error, Result};
use crate::inference::{
    laplace, map_estimate, path_nodes, summarize, LaplaceOptions, LaplacePosterior, MapEstimate, MapOptions,
    Objective, PathModel, PosteriorSummary, PriorSpec,
};
use crate::loadpath::{node_id, path_label, strain_history, Axis, LoadPath, LoadStep, MeasurementSchedule};
use crate::stats::{box_stats, mix_seed, quantile_sorted, standard_normal, stream_rng, BoxStats, TruncatedNormal};
use crate::surrogate::{BankSpec, NuggetFallback, SurrogateBank, SurrogateSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStep {
    Fixed(Axis),
    /// Chosen by EIG under the prior, like every later step.
    Eig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignMode {
    Adaptive,
    StaticE11,
    StaticE22,
}

impl DesignMode {
    pub const ALL: [DesignMode; 3] = [DesignMode::Adaptive, DesignMode::StaticE11, DesignMode::StaticE22];

    pub fn as_str(self) -> &'static str {
        match self {
            DesignMode::Adaptive => "adaptive",
            DesignMode::StaticE11 => "static-e11",
            DesignMode::StaticE22 => "static-e22",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        DesignMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

/// Everything one calibration campaign needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarConfig {
    pub name: String,
    /// Material constants, calibrated parameters and their box, strain
    /// increment, number of steps and measurement schedule.
    pub bank: BankSpec,
    pub surrogate: SurrogateSettings,
    pub theta_true: Vec<f64>,
    pub prior: PriorSpec,
    /// Measurement noise variance, MPa^2.
    pub noise_variance: f64,
    pub eig: EigSettings,
    pub initial_step: InitialStep,
    pub map: MapOptions,
    pub laplace: LaplaceOptions,
    pub master_seed: u64,
}

fn tn(mu: f64, delta2: f64, a: f64, b: f64) -> TruncatedNormal {
    TruncatedNormal::new(mu, delta2, a, b).expect("preset prior is valid")
}

impl ExemplarConfig {
    /// Number of load steps per trial.
    pub fn steps(&self) -> usize {
        self.bank.depth
    }

    pub fn validate(&self) -> Result<()> {
        self.bank.validate()?;
        self.eig.validate()?;
        let d = self.bank.dim();
        if self.theta_true.len() != d || self.prior.dim() != d || self.prior.parameters != self.bank.calibrated {
            return Err(Error::Config("true values, prior and bank must list the same parameters".into()));
        }
        if self.prior.bounds() != self.bank.bounds {
            return Err(Error::Config("prior support must equal the surrogate training box".into()));
        }
        if !self.prior.contains(&self.theta_true) {
            return Err(Error::Config("true parameters lie outside the prior support".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::Config("noise variance must be positive".into()));
        }
        if self.surrogate.n_train < d + 2 {
            return Err(Error::Config("too few training samples".into()));
        }
        Ok(())
    }

    /// Material at the true parameter values.
    pub fn true_material(&self) -> MaterialParameters {
        self.bank.material(&self.theta_true)
    }

    /// Two-parameter Hill calibration, cases 1-4.
    pub fn exemplar1(case: u8) -> Result<Self> {
        let (f, g) = match case {
            1 => (0.55, 0.45),
            2 => (0.60, 0.50),
            3 => (0.60, 0.60),
            4 => (0.69, 0.43),
            _ => return Err(Error::Config(format!("exemplar 1 has cases 1-4, not {case}"))),
        };
        let calibrated = vec![Parameter::HillF, Parameter::HillG];
        Ok(ExemplarConfig {
            name: format!("exemplar1_case{case}"),
            bank: BankSpec {
                base: MaterialParameters::reference(),
                calibrated: calibrated.clone(),
                bounds: vec![(0.3, 0.7), (0.3, 0.7)],
                strain_increment: 0.01,
                depth: 5,
                schedule: MeasurementSchedule::new(1, 100)?,
                return_map: Default::default(),
            },
            surrogate: SurrogateSettings::default(),
            theta_true: vec![f, g],
            prior: PriorSpec::new(calibrated, vec![tn(0.5, 1.0, 0.3, 0.7), tn(0.5, 1.0, 0.3, 0.7)])?,
            noise_variance: 10.0,
            eig: EigSettings {
                n_outer: 10_000,
                n_inner: 100,
                ..EigSettings::default()
            },
            initial_step: InitialStep::Fixed(Axis::E11),
            map: MapOptions {
                restarts: 4,
                ..MapOptions::default()
            },
            laplace: LaplaceOptions::default(),
            master_seed: 1,
        })
    }

    /// Five-parameter yield and hardening calibration, cases 5-6.
    pub fn exemplar2(case: u8) -> Result<Self> {
        let (sigma_y, a) = match case {
            5 => (300.0, 100.0),
            6 => (100.0, 300.0),
            _ => return Err(Error::Config(format!("exemplar 2 has cases 5-6, not {case}"))),
        };
        let calibrated = vec![
            Parameter::HillF,
            Parameter::HillG,
            Parameter::YieldStress,
            Parameter::VoceModulus,
            Parameter::VoceExponent,
        ];
        let bounds = vec![(0.3, 0.7), (0.3, 0.7), (50.0, 500.0), (10.0, 400.0), (1e-6, 100.0)];
        Ok(ExemplarConfig {
            name: format!("exemplar2_case{case}"),
            bank: BankSpec {
                base: MaterialParameters {
                    linear_hardening: 0.0,
                    ..MaterialParameters::reference()
                },
                calibrated: calibrated.clone(),
                bounds,
                strain_increment: 0.02,
                depth: 7,
                schedule: MeasurementSchedule::new(3, 100)?,
                return_map: Default::default(),
            },
            surrogate: SurrogateSettings {
                n_train: 500,
                max_search_points: 150,
                nugget_fallback: Some(NuggetFallback {
                    bounds: (1e-10, 1e-4),
                    loo_threshold_percent: 0.15,
                }),
                ..SurrogateSettings::default()
            },
            theta_true: vec![0.55, 0.45, sigma_y, a, 20.0],
            prior: PriorSpec::new(
                calibrated,
                vec![
                    tn(0.5, 1.0, 0.3, 0.7),
                    tn(0.5, 1.0, 0.3, 0.7),
                    tn(250.0, 1000.0, 50.0, 500.0),
                    tn(200.0, 1000.0, 10.0, 400.0),
                    tn(50.0, 100.0, 1e-6, 100.0),
                ],
            )?,
            noise_variance: 10.0,
            eig: EigSettings {
                n_outer: 10_000,
                n_inner: 10_000,
                ..EigSettings::default()
            },
            initial_step: InitialStep::Eig,
            map: MapOptions {
                restarts: 16,
                ..MapOptions::default()
            },
            laplace: LaplaceOptions::default(),
            master_seed: 1,
        })
    }

    pub fn preset(case: u8) -> Result<Self> {
        match case {
            1..=4 => Self::exemplar1(case),
            _ => Self::exemplar2(case),
        }
    }
}

/// Runs the material point at `params` through one load step from `state`
/// and returns the scheduled stresses, ordered (point, qoi), with i.i.d.
/// Gaussian noise of variance `noise_variance` added. A zero variance gives
/// the noiseless response.
pub fn simulate_observation(
    params: &MaterialParameters,
    step: &LoadStep,
    state: &MaterialState,
    schedule: &MeasurementSchedule,
    noise_variance: f64,
    opts: &crate::constitutive::ReturnMapOptions,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, MaterialState)> {
    if !(noise_variance >= 0.0) {
        return Err(Error::Domain("noise variance must be non-negative"));
    }
    let history = strain_history(state.totals(), step, schedule.increments_per_step);
    let mut points = Vec::with_capacity(schedule.points_per_step);
    let next = simulate_history(params, state, &history, &schedule.indices(), opts, &mut points)?;
    let psi = libm::sqrt(noise_variance);
    let mut values = Vec::with_capacity(2 * points.len());
    for p in &points {
        values.push(p.sigma11 + psi * standard_normal(rng));
        values.push(p.sigma22 + psi * standard_normal(rng));
    }
    Ok((values, next))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub axis: Axis,
    /// Both candidates' estimates when the step was chosen by EIG.
    pub eig: Vec<EigEstimate>,
    pub observations: Vec<f64>,
    pub map: MapEstimate,
    pub posterior: LaplacePosterior,
    pub summary: PosteriorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: String,
    pub mode: DesignMode,
    pub trial_index: u64,
    pub trial_seed: u64,
    pub noise_seed: u64,
    pub parameters: Vec<Parameter>,
    pub theta_true: Vec<f64>,
    pub strain_increment: f64,
    pub path: Vec<Axis>,
    pub steps: Vec<StepRecord>,
    /// Final-step posterior looks unreliable (Cv above 1 or repaired
    /// Hessian).
    pub flagged: bool,
}

impl TrialRecord {
    pub fn path_label(&self) -> String {
        path_label(&self.path)
    }

    pub fn load_path(&self) -> LoadPath {
        LoadPath::new(self.strain_increment, self.path.iter().copied())
    }

    pub fn final_step(&self) -> Option<&StepRecord> {
        self.steps.last()
    }
}

/// Per-trial seed for EIG sampling; differs between modes.
pub fn trial_seed(master: u64, trial_index: u64, mode: DesignMode) -> u64 {
    mix_seed(&[master, trial_index, mode.code()])
}

/// Observation-noise seed; shared by all modes of a trial index so designs
/// are compared on the same noise draws.
pub fn noise_seed(master: u64, trial_index: u64) -> u64 {
    mix_seed(&[master, trial_index, 0])
}

/// Marks a final posterior that should not be trusted.
pub fn is_unsuccessful(step: &StepRecord) -> bool {
    step.posterior.repaired || step.summary.marginals.iter().any(|m| !(m.cv <= 1.0))
}

/// One full run of the loop for `mode`.
pub fn run_trial(config: &ExemplarConfig, bank: &SurrogateBank, mode: DesignMode, trial_index: u64) -> Result<TrialRecord> {
    config.validate()?;
    if bank.spec.calibrated != config.bank.calibrated || bank.spec.depth < config.steps() {
        return Err(Error::Config("surrogate bank does not match the configuration".into()));
    }
    let seed = trial_seed(config.master_seed, trial_index, mode);
    let nseed = noise_seed(config.master_seed, trial_index);
    let truth = config.true_material();
    let bounds = config.prior.bounds();

    let mut state = MaterialState::virgin();
    let mut path = LoadPath::empty(config.bank.strain_increment);
    let mut y: Vec<f64> = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::with_capacity(config.steps());
    let mut belief: Option<LaplaceBelief> = None;

    for t in 1..=config.steps() {
        let (axis, eig) = match mode {
            DesignMode::StaticE11 => (Axis::E11, Vec::new()),
            DesignMode::StaticE22 => (Axis::E22, Vec::new()),
            DesignMode::Adaptive => match (t, config.initial_step) {
                (1, InitialStep::Fixed(a)) => (a, Vec::new()),
                _ => {
                    let est = candidate_eig(config, bank, &path, belief.as_ref(), mix_seed(&[seed, t as u64]))
                        .map_err(|e| e.in_stage("eig"))?;
                    let chosen = select_next_step(&est).map_err(|e| e.in_stage("selection"))?;
                    (chosen.axis, est)
                }
            },
        };
        let step = LoadStep {
            axis,
            delta_eps: config.bank.strain_increment,
        };
        let mut rng = stream_rng(nseed, t as u64);
        let (obs, next) = simulate_observation(
            &truth,
            &step,
            &state,
            &config.bank.schedule,
            config.noise_variance,
            &config.bank.return_map,
            &mut rng,
        )
        .map_err(|e| e.in_stage("observation"))?;
        state = next;
        y.extend_from_slice(&obs);
        path.push(axis);

        let nodes = path_nodes(&path, bank).map_err(|e| e.in_stage("calibration"))?;
        let model = PathModel::new(bank, &nodes);
        let objective = Objective {
            model: &model,
            prior: &config.prior,
            y: &y,
            noise_variance: config.noise_variance,
        };
        let warm = steps.last().map(|s| s.map.theta.as_slice());
        let map = map_estimate(&objective, warm, &config.map).map_err(|e| e.in_stage("map"))?;
        let posterior = laplace(&objective, &map, &config.laplace).map_err(|e| e.in_stage("laplace"))?;
        let summary = summarize(&posterior, Some(&config.theta_true));
        if mode == DesignMode::Adaptive && t < config.steps() {
            belief = Some(LaplaceBelief::new(&posterior, bounds.clone()).map_err(|e| e.in_stage("belief"))?);
        }
        steps.push(StepRecord {
            step: t,
            axis,
            eig,
            observations: obs,
            map,
            posterior,
            summary,
        });
    }
    let flagged = steps.last().is_some_and(is_unsuccessful);
    Ok(TrialRecord {
        config: config.name.clone(),
        mode,
        trial_index,
        trial_seed: seed,
        noise_seed: nseed,
        parameters: config.bank.calibrated.clone(),
        theta_true: config.theta_true.clone(),
        strain_increment: config.bank.strain_increment,
        path: path.axes.clone(),
        steps,
        flagged,
    })
}

/// EIG of extending `path` by each axis, under the prior when `belief` is
/// absent.
pub fn candidate_eig(
    config: &ExemplarConfig,
    bank: &SurrogateBank,
    path: &LoadPath,
    belief: Option<&LaplaceBelief>,
    seed: u64,
) -> Result<Vec<EigEstimate>> {
    let nodes: Vec<[usize; 1]> = Axis::BOTH
        .iter()
        .map(|a| {
            let mut axes = path.axes.clone();
            axes.push(*a);
            [node_id(&axes)]
        })
        .collect();
    if nodes.iter().any(|n| n[0] > bank.spec.n_nodes()) {
        return Err(Error::MissingSurrogate {
            node: nodes[1][0],
            point: 0,
        });
    }
    let candidates: Vec<(LoadStep, PathModel<'_>)> = Axis::BOTH
        .iter()
        .zip(&nodes)
        .map(|(a, n)| {
            (
                LoadStep {
                    axis: *a,
                    delta_eps: config.bank.strain_increment,
                },
                PathModel::new(bank, n),
            )
        })
        .collect();
    match belief {
        Some(b) => estimate_candidates(&candidates, b, config.noise_variance, &config.eig, seed),
        None => estimate_candidates(
            &candidates,
            &PriorBelief(&config.prior),
            config.noise_variance,
            &config.eig,
            seed,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathCount {
    pub path: String,
    pub count: usize,
    pub percent: f64,
    /// Final posterior means averaged over the trials on this path.
    pub expected_value: Vec<f64>,
    pub generalized_variance: f64,
}

/// Distributions over trials at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAggregate {
    pub step: usize,
    pub expected_value: Vec<BoxStats>,
    pub variance: Vec<BoxStats>,
    /// Per axis (e11, e22); absent when no trial estimated EIG at this step.
    pub eig: Vec<Option<BoxStats>>,
    pub generalized_variance: BoxStats,
    pub total_variance: BoxStats,
}

/// Means over trials of final-step quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub n_trials: usize,
    pub expected_value: Vec<f64>,
    pub variance: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub cv: Vec<f64>,
    /// Mean over trials of each trial's MAP absolute percentage error.
    pub map_ape_percent: Vec<f64>,
    /// Absolute percentage error of the trial-averaged MAP point.
    pub mean_map_ape_percent: Vec<f64>,
    pub generalized_variance: f64,
    pub total_variance: f64,
    pub mahalanobis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial_index: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config: String,
    pub mode: DesignMode,
    pub parameters: Vec<Parameter>,
    pub n_trials: usize,
    pub failures: Vec<TrialFailure>,
    pub n_flagged: usize,
    /// Most frequent first; ties by label.
    pub paths: Vec<PathCount>,
    pub steps: Vec<StepAggregate>,
    pub final_all: FinalMetrics,
    /// Final metrics with flagged trials removed, when any were flagged.
    pub final_unflagged: Option<FinalMetrics>,
}

fn final_metrics(records: &[&TrialRecord]) -> Option<FinalMetrics> {
    let n = records.len();
    let finals: Vec<&StepRecord> = records.iter().filter_map(|r| r.final_step()).collect();
    if finals.is_empty() {
        return None;
    }
    let d = finals[0].summary.marginals.len();
    let avg = |f: &dyn Fn(&StepRecord) -> f64| finals.iter().map(|s| f(s)).sum::<f64>() / finals.len() as f64;
    let per = |f: &dyn Fn(&crate::inference::MarginalSummary) -> f64| {
        (0..d)
            .map(|k| avg(&|s: &StepRecord| f(&s.summary.marginals[k])))
            .collect::<Vec<_>>()
    };
    Some(FinalMetrics {
        n_trials: n,
        expected_value: per(&|m| m.mean),
        variance: per(&|m| m.variance),
        ci_lower: per(&|m| m.ci_lower),
        ci_upper: per(&|m| m.ci_upper),
        cv: per(&|m| m.cv),
        map_ape_percent: per(&|m| m.map_ape_percent.unwrap_or(f64::NAN)),
        mean_map_ape_percent: (0..d)
            .map(|k| {
                let truth = records[0].theta_true[k];
                100.0 * (avg(&|s: &StepRecord| s.map.theta[k]) - truth).abs() / truth.abs()
            })
            .collect(),
        generalized_variance: avg(&|s| s.summary.generalized_variance),
        total_variance: avg(&|s| s.summary.total_variance),
        mahalanobis: avg(&|s| s.summary.mahalanobis.unwrap_or(f64::NAN)),
    })
}

/// Summarises completed trials of one (config, mode). `failures` are trials
/// that aborted and are only counted.
pub fn aggregate(records: &[TrialRecord], failures: Vec<TrialFailure>) -> Result<AggregateReport> {
    let first = records.first().ok_or(Error::Empty("no completed trials to aggregate"))?;
    let n = records.len();

    let mut counts: Vec<PathCount> = Vec::new();
    for r in records {
        let label = r.path_label();
        match counts.iter_mut().find(|c| c.path == label) {
            Some(c) => c.count += 1,
            None => counts.push(PathCount {
                path: label,
                count: 1,
                percent: 0.0,
                expected_value: Vec::new(),
                generalized_variance: f64::NAN,
            }),
        }
    }
    for c in &mut counts {
        c.percent = 100.0 * c.count as f64 / n as f64;
        let on: Vec<&TrialRecord> = records.iter().filter(|r| r.path_label() == c.path).collect();
        if let Some(m) = final_metrics(&on) {
            c.expected_value = m.expected_value;
            c.generalized_variance = m.generalized_variance;
        }
    }
    counts.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.path.cmp(&b.path)));

    let n_steps = records.iter().map(|r| r.steps.len()).min().unwrap_or(0);
    let d = first.parameters.len();
    let mut steps = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let at: Vec<&StepRecord> = records.iter().map(|r| &r.steps[t]).collect();
        let stat = |f: &dyn Fn(&StepRecord) -> f64| box_stats(&at.iter().map(|s| f(s)).collect::<Vec<_>>());
        let expected_value = (0..d)
            .map(|k| stat(&|s: &StepRecord| s.summary.marginals[k].mean))
            .collect::<Result<Vec<_>>>()?;
        let variance = (0..d)
            .map(|k| stat(&|s: &StepRecord| s.summary.marginals[k].variance))
            .collect::<Result<Vec<_>>>()?;
        let eig = Axis::BOTH
            .iter()
            .map(|a| {
                let v: Vec<f64> = at
                    .iter()
                    .flat_map(|s| s.eig.iter().filter(|e| e.candidate.axis == *a).map(|e| e.value))
                    .collect();
                box_stats(&v).ok()
            })
            .collect();
        steps.push(StepAggregate {
            step: t + 1,
            expected_value,
            variance,
            eig,
            generalized_variance: stat(&|s| s.summary.generalized_variance)?,
            total_variance: stat(&|s| s.summary.total_variance)?,
        });
    }

    let all: Vec<&TrialRecord> = records.iter().collect();
    let unflagged: Vec<&TrialRecord> = records.iter().filter(|r| !r.flagged).collect();
    let n_flagged = n - unflagged.len();
    Ok(AggregateReport {
        config: first.config.clone(),
        mode: first.mode,
        parameters: first.parameters.clone(),
        n_trials: n + failures.len(),
        failures,
        n_flagged,
        paths: counts,
        steps,
        final_all: final_metrics(&all).ok_or(Error::Empty("no final steps"))?,
        final_unflagged: if n_flagged > 0 { final_metrics(&unflagged) } else { None },
    })
}

/// Pointwise 95% bands of the stress response, one row per increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressBands {
    /// Increment count divided by increments per step.
    pub pseudotime: Vec<f64>,
    pub s11_lo: Vec<f64>,
    pub s11_hi: Vec<f64>,
    pub s22_lo: Vec<f64>,
    pub s22_hi: Vec<f64>,
    pub s11_true: Vec<f64>,
    pub s22_true: Vec<f64>,
    pub n_draws: usize,
    /// Draws whose simulation failed.
    pub excluded: usize,
}

/// Smallest value substituted for a non-positive draw of a parameter the
/// material point requires to be positive.
const TINY_POSITIVE: f64 = 1e-9;

/// Pushes posterior draws through the material point along `path`.
/// Draws are unconstrained Gaussian; only positivity is enforced.
pub fn propagate_uncertainty(
    post: &LaplacePosterior,
    path: &LoadPath,
    config: &ExemplarConfig,
    n_draws: usize,
    seed: u64,
) -> Result<StressBands> {
    if n_draws == 0 {
        return Err(Error::Empty("need at least one draw"));
    }
    let d = post.dim();
    let eig = SymmetricEigen::new(post.covariance_matrix());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(" (posterior covariance)"));
    }
    let sqrt_l: Vec<f64> = eig.eigenvalues.iter().map(|v| libm::sqrt(v.max(0.0))).collect();
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sqrt_l));

    let m = config.bank.schedule.increments_per_step;
    let opts = &config.bank.return_map;
    let truth = simulate_path_dense(&config.true_material(), path, m, opts)?;
    let total = truth.len();
    let mut rng = stream_rng(seed, 0);
    let mut responses: Vec<Vec<crate::constitutive::StressPoint>> = Vec::with_capacity(n_draws);
    let mut excluded = 0;
    let mut z = vec![0.0; d];
    let mut theta = vec![0.0; d];
    for _ in 0..n_draws {
        z.iter_mut().for_each(|v| *v = standard_normal(&mut rng));
        for i in 0..d {
            theta[i] = post.map_point[i] + (0..d).map(|j| root[(i, j)] * z[j]).sum::<f64>();
            // Every calibrated constant must be non-negative, Hill
            // coefficients and the yield stress strictly positive.
            if theta[i] <= 0.0 {
                theta[i] = TINY_POSITIVE;
            }
        }
        match simulate_path_dense(&config.bank.material(&theta), path, m, opts) {
            Ok(r) => responses.push(r),
            Err(_) => excluded += 1,
        }
    }
    if responses.is_empty() {
        return Err(Error::Domain("every posterior draw failed to simulate"));
    }
    let mut bands = StressBands {
        pseudotime: (1..=total).map(|k| k as f64 / m as f64).collect(),
        s11_lo: Vec::with_capacity(total),
        s11_hi: Vec::with_capacity(total),
        s22_lo: Vec::with_capacity(total),
        s22_hi: Vec::with_capacity(total),
        s11_true: truth.iter().map(|s| s.sigma11).collect(),
        s22_true: truth.iter().map(|s| s.sigma22).collect(),
        n_draws,
        excluded,
    };
    let mut col = Vec::with_capacity(responses.len());
    for k in 0..total {
        for (lo, hi, pick) in [
            (&mut bands.s11_lo, &mut bands.s11_hi, 0),
            (&mut bands.s22_lo, &mut bands.s22_hi, 1),
        ] {
            col.clear();
            col.extend(responses.iter().map(|r| if pick == 0 { r[k].sigma11 } else { r[k].sigma22 }));
            col.sort_by(f64::total_cmp);
            lo.push(quantile_sorted(&col, 0.025));
            hi.push(quantile_sorted(&col, 0.975));
        }
    }
    Ok(bands)
}

impl core::fmt::Display for DesignMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::generate_training_data;

    fn small() -> (ExemplarConfig, SurrogateBank) {
        let mut config = ExemplarConfig::exemplar1(1).unwrap();
        config.bank.depth = 3;
        config.surrogate.n_train = 40;
        config.eig.n_outer = 400;
        config.eig.n_inner = 50;
        let data = generate_training_data(&config.bank, config.surrogate.n_train).unwrap();
        let bank = SurrogateBank::build(config.bank.clone(), &data, &config.surrogate.fit_options()).unwrap();
        (config, bank)
    }

    #[test]
    fn observation_counts_and_noiseless_limit() {
        let config = ExemplarConfig::exemplar2(5).unwrap();
        let step = LoadStep { axis: Axis::E11, delta_eps: 0.02 };
        let mut rng = stream_rng(1, 1);
        let opts = &config.bank.return_map;
        let start = MaterialState::virgin();
        let (noisy, _) =
            simulate_observation(&config.true_material(), &step, &start, &config.bank.schedule, 10.0, opts, &mut rng)
                .unwrap();
        assert_eq!(noisy.len(), 6);
        let (clean, next) =
            simulate_observation(&config.true_material(), &step, &start, &config.bank.schedule, 0.0, opts, &mut rng)
                .unwrap();
        let path = LoadPath::new(0.02, [Axis::E11]);
        let exact =
            crate::constitutive::simulate_path(&config.true_material(), &path, &config.bank.schedule, opts).unwrap();
        let flat: Vec<f64> = exact.iter().flat_map(|s| [s.sigma11, s.sigma22]).collect();
        assert_eq!(clean, flat);
        assert_eq!(next.eps11, 0.02);

        let one = ExemplarConfig::exemplar1(1).unwrap();
        let (v, _) = simulate_observation(
            &one.true_material(),
            &LoadStep { axis: Axis::E11, delta_eps: 0.01 },
            &start,
            &one.bank.schedule,
            10.0,
            opts,
            &mut rng,
        )
        .unwrap();
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn presets_validate() {
        for case in 1..=6 {
            ExemplarConfig::preset(case).unwrap().validate().unwrap();
        }
        assert!(ExemplarConfig::exemplar1(5).is_err());
        assert!(ExemplarConfig::exemplar2(1).is_err());
    }

    #[test]
    fn trials_replay_and_share_noise() {
        let (config, bank) = small();
        let a = run_trial(&config, &bank, DesignMode::Adaptive, 3).unwrap();
        let b = run_trial(&config, &bank, DesignMode::Adaptive, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.path.len(), 3);
        assert_eq!(a.path[0], Axis::E11);
        assert!(a.steps[0].eig.is_empty());
        assert_eq!(a.steps[1].eig.len(), 2);
        let mut seen = 0;
        for s in &a.steps {
            seen += s.observations.len();
            assert_eq!(seen, s.step * config.bank.points_per_step() * 2);
            assert_eq!(s.posterior.dim(), 2);
        }

        // The first step is e11 in both designs, so its noisy data coincide.
        let e11 = run_trial(&config, &bank, DesignMode::StaticE11, 3).unwrap();
        assert_eq!(e11.path, [Axis::E11; 3]);
        assert!(e11.steps.iter().all(|s| s.eig.is_empty()));
        assert_eq!(e11.steps[0].observations, a.steps[0].observations);
        assert_eq!(e11.noise_seed, a.noise_seed);
        assert_ne!(e11.trial_seed, a.trial_seed);
    }

    #[test]
    fn single_trial_aggregate_matches_record() {
        let (mut config, bank) = small();
        config.bank.depth = 1;
        let r = run_trial(&config, &bank, DesignMode::StaticE22, 0).unwrap();
        assert_eq!(r.steps.len(), 1);
        let agg = aggregate(core::slice::from_ref(&r), Vec::new()).unwrap();
        let fin = &r.steps[0].summary;
        assert_eq!(agg.final_all.generalized_variance, fin.generalized_variance);
        assert_eq!(agg.final_all.expected_value[1], fin.marginals[1].mean);
        assert_eq!(agg.paths.len(), 1);
        assert_eq!(agg.paths[0].percent, 100.0);
        assert_eq!(agg.steps[0].variance[0].median, fin.marginals[0].variance);
        assert!(agg.steps[0].eig.iter().all(Option::is_none));
    }

    #[test]
    fn aggregate_histogram_and_failures() {
        let (config, bank) = small();
        let recs: Vec<TrialRecord> =
            (0..4).map(|i| run_trial(&config, &bank, DesignMode::Adaptive, i).unwrap()).collect();
        let fail = TrialFailure { trial_index: 9, message: "boom".into() };
        let agg = aggregate(&recs, vec![fail]).unwrap();
        assert_eq!(agg.n_trials, 5);
        let total: f64 = agg.paths.iter().map(|p| p.percent).sum();
        assert!((total - 100.0).abs() < 1e-9);
        assert!(agg.paths.windows(2).all(|w| w[0].count >= w[1].count));
        assert!(agg.steps[1].eig.iter().all(Option::is_some));
        assert!(aggregate(&[], Vec::new()).is_err());
    }

    #[test]
    fn propagation_bands() {
        let config = ExemplarConfig::exemplar1(1).unwrap();
        let path = LoadPath::new(0.01, [Axis::E11, Axis::E22]);
        let point = LaplacePosterior {
            map_point: config.theta_true.clone(),
            covariance: vec![0.0; 4],
            objective_value: 0.0,
            repaired: false,
            hessian_eigenvalues: Vec::new(),
        };
        let b = propagate_uncertainty(&point, &path, &config, 5, 1).unwrap();
        assert_eq!(b.pseudotime.len(), 200);
        assert_eq!(b.pseudotime[199], 2.0);
        assert_eq!(b.s11_lo, b.s11_true);
        assert_eq!(b.s22_hi, b.s22_true);

        let wide = LaplacePosterior {
            covariance: vec![1e-4, 0.0, 0.0, 1e-4],
            ..point
        };
        let one = propagate_uncertainty(&wide, &path, &config, 1, 2).unwrap();
        assert_eq!(one.s11_lo, one.s11_hi);
        let many = propagate_uncertainty(&wide, &path, &config, 100, 2).unwrap();
        assert_eq!(many.excluded, 0);
        assert!(many.s11_lo[199] < many.s11_true[199] && many.s11_true[199] < many.s11_hi[199]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in DesignMode::ALL {
            assert_eq!(DesignMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(DesignMode::parse("sideways").is_err());
    }
}
