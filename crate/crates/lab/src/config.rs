//! TOML run configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use icc_core::boed::{EigSettings, UnderflowPolicy};
use icc_core::constitutive::{MaterialParameters, Parameter, ReturnMapOptions};
use icc_core::icc::{ExemplarConfig, InitialStep};
use icc_core::inference::{LaplaceOptions, MapOptions, PriorSpec};
use icc_core::loadpath::{Axis, MeasurementSchedule};
use icc_core::stats::TruncatedNormal;
use icc_core::surrogate::{BankSpec, NuggetFallback, SurrogateSettings};
use serde::{Deserialize, Serialize};

/// On-disk run configuration. Keys carry their units where they have one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub jobs: usize,
    /// Relative paths resolve against the config file's directory.
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Explicit bank location; defaults to `<out_dir>/banks/<hash16>.bank.json`.
    #[serde(default)]
    pub bank_file: Option<PathBuf>,
    pub material: MaterialSection,
    pub calibrated: Vec<CalibratedParameter>,
    pub loading: LoadingSection,
    pub noise: NoiseSection,
    pub eig: EigSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub surrogate: SurrogateSection,
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Fixed constitutive constants. Values of calibrated parameters are
/// ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    pub youngs_modulus_mpa: f64,
    pub poisson_ratio: f64,
    pub hill_f: f64,
    pub hill_g: f64,
    pub hill_h: f64,
    pub sigma_y_mpa: f64,
    pub linear_hardening_mpa: f64,
    pub voce_modulus_mpa: f64,
    pub voce_exponent: f64,
}

impl From<MaterialSection> for MaterialParameters {
    fn from(m: MaterialSection) -> Self {
        MaterialParameters {
            youngs_modulus: m.youngs_modulus_mpa,
            poisson_ratio: m.poisson_ratio,
            hill_f: m.hill_f,
            hill_g: m.hill_g,
            hill_h: m.hill_h,
            yield_stress: m.sigma_y_mpa,
            linear_hardening: m.linear_hardening_mpa,
            voce_modulus: m.voce_modulus_mpa,
            voce_exponent: m.voce_exponent,
        }
    }
}

impl From<&MaterialParameters> for MaterialSection {
    fn from(m: &MaterialParameters) -> Self {
        MaterialSection {
            youngs_modulus_mpa: m.youngs_modulus,
            poisson_ratio: m.poisson_ratio,
            hill_f: m.hill_f,
            hill_g: m.hill_g,
            hill_h: m.hill_h,
            sigma_y_mpa: m.yield_stress,
            linear_hardening_mpa: m.linear_hardening,
            voce_modulus_mpa: m.voce_modulus,
            voce_exponent: m.voce_exponent,
        }
    }
}

/// One unknown parameter. Bounds, true value and prior mean share the
/// parameter's unit; the prior variance is in that unit squared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratedParameter {
    /// A material key, e.g. `hill_f` or `sigma_y_mpa`.
    pub name: String,
    pub true_value: f64,
    pub lower: f64,
    pub upper: f64,
    pub prior_mean: f64,
    pub prior_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadingSection {
    /// Strain applied per load step, mm/mm.
    pub strain_increment: f64,
    pub steps: usize,
    pub increments_per_step: usize,
    pub points_per_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub variance_mpa2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStepKey {
    E11,
    E22,
    Eig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigSection {
    pub n_outer: usize,
    pub n_inner: usize,
    pub initial_step: InitialStepKey,
    #[serde(default = "yes")]
    pub reuse_inner_across_outer: bool,
    #[serde(default = "yes")]
    pub reuse_outer_across_candidates: bool,
    #[serde(default)]
    pub underflow_policy: UnderflowPolicy,
    #[serde(default = "default_escalations")]
    pub max_escalations: u32,
}

fn yes() -> bool {
    true
}

fn default_escalations() -> u32 {
    EigSettings::default().max_escalations
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub restarts: usize,
    pub fd_relative_step: f64,
    pub eigen_floor: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let l = LaplaceOptions::default();
        InferenceSection {
            restarts: MapOptions::default().restarts,
            fd_relative_step: l.relative_step,
            eigen_floor: l.eigen_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub n_train: usize,
    pub n_test: usize,
    pub max_search_points: usize,
    pub starts: usize,
    pub polish: usize,
    /// Leave-one-out MAPE (%) above which a key is refit with a nugget.
    pub nugget_fallback_percent: Option<f64>,
    pub nugget_upper: f64,
    /// `build-bank` exits nonzero when any key's held-out MAPE (%) exceeds
    /// this.
    pub mape_limit_percent: Option<f64>,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        let s = SurrogateSettings::default();
        SurrogateSection {
            n_train: s.n_train,
            n_test: s.n_test,
            max_search_points: s.max_search_points,
            starts: s.starts,
            polish: s.polish,
            nugget_fallback_percent: None,
            nugget_upper: 1e-4,
            mape_limit_percent: None,
        }
    }
}

const NUGGET_LOWER: f64 = 1e-10;

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfigFile = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.out_dir = resolve(base, &cfg.out_dir);
        cfg.bank_file = cfg.bank_file.map(|b| resolve(base, &b));
        cfg.exemplar().with_context(|| format!("validating {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// The core configuration this file describes.
    pub fn exemplar(&self) -> Result<ExemplarConfig> {
        if self.calibrated.is_empty() {
            bail!("at least one calibrated parameter is required");
        }
        let mut calibrated = Vec::new();
        let mut marginals = Vec::new();
        for c in &self.calibrated {
            let p = Parameter::from_key(&c.name).with_context(|| format!("unknown parameter `{}`", c.name))?;
            if calibrated.contains(&p) {
                bail!("parameter `{}` listed twice", c.name);
            }
            calibrated.push(p);
            marginals.push(
                TruncatedNormal::new(c.prior_mean, c.prior_variance, c.lower, c.upper)
                    .with_context(|| format!("prior of `{}`", c.name))?,
            );
        }
        let s = &self.surrogate;
        let config = ExemplarConfig {
            name: self.name.clone(),
            bank: BankSpec {
                base: self.material.into(),
                calibrated: calibrated.clone(),
                bounds: self.calibrated.iter().map(|c| (c.lower, c.upper)).collect(),
                strain_increment: self.loading.strain_increment,
                depth: self.loading.steps,
                schedule: MeasurementSchedule::new(self.loading.points_per_step, self.loading.increments_per_step)?,
                return_map: ReturnMapOptions::default(),
            },
            surrogate: SurrogateSettings {
                n_train: s.n_train,
                n_test: s.n_test,
                max_search_points: s.max_search_points,
                starts: s.starts,
                polish: s.polish,
                nugget_fallback: s.nugget_fallback_percent.map(|t| NuggetFallback {
                    bounds: (NUGGET_LOWER, s.nugget_upper),
                    loo_threshold_percent: t,
                }),
            },
            theta_true: self.calibrated.iter().map(|c| c.true_value).collect(),
            prior: PriorSpec::new(calibrated, marginals)?,
            noise_variance: self.noise.variance_mpa2,
            eig: EigSettings {
                n_outer: self.eig.n_outer,
                n_inner: self.eig.n_inner,
                reuse_inner_across_outer: self.eig.reuse_inner_across_outer,
                reuse_outer_across_candidates: self.eig.reuse_outer_across_candidates,
                underflow_policy: self.eig.underflow_policy,
                max_escalations: self.eig.max_escalations,
            },
            initial_step: match self.eig.initial_step {
                InitialStepKey::E11 => InitialStep::Fixed(Axis::E11),
                InitialStepKey::E22 => InitialStep::Fixed(Axis::E22),
                InitialStepKey::Eig => InitialStep::Eig,
            },
            map: MapOptions {
                restarts: self.inference.restarts,
                ..MapOptions::default()
            },
            laplace: LaplaceOptions {
                relative_step: self.inference.fd_relative_step,
                eigen_floor: self.inference.eigen_floor,
            },
            master_seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// File form of a core configuration.
    pub fn from_exemplar(config: &ExemplarConfig) -> Self {
        let calibrated = config
            .bank
            .calibrated
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let m = &config.prior.marginals[k];
                CalibratedParameter {
                    name: p.key().to_string(),
                    true_value: config.theta_true[k],
                    lower: m.a,
                    upper: m.b,
                    prior_mean: m.mu,
                    prior_variance: m.delta2,
                }
            })
            .collect();
        let s = &config.surrogate;
        RunConfigFile {
            name: config.name.clone(),
            seed: config.master_seed,
            jobs: 0,
            out_dir: default_out(),
            bank_file: None,
            material: MaterialSection::from(&config.bank.base),
            calibrated,
            loading: LoadingSection {
                strain_increment: config.bank.strain_increment,
                steps: config.bank.depth,
                increments_per_step: config.bank.schedule.increments_per_step,
                points_per_step: config.bank.schedule.points_per_step,
            },
            noise: NoiseSection {
                variance_mpa2: config.noise_variance,
            },
            eig: EigSection {
                n_outer: config.eig.n_outer,
                n_inner: config.eig.n_inner,
                initial_step: match config.initial_step {
                    InitialStep::Fixed(Axis::E11) => InitialStepKey::E11,
                    InitialStep::Fixed(Axis::E22) => InitialStepKey::E22,
                    InitialStep::Eig => InitialStepKey::Eig,
                },
                reuse_inner_across_outer: config.eig.reuse_inner_across_outer,
                reuse_outer_across_candidates: config.eig.reuse_outer_across_candidates,
                underflow_policy: config.eig.underflow_policy,
                max_escalations: config.eig.max_escalations,
            },
            inference: InferenceSection {
                restarts: config.map.restarts,
                fd_relative_step: config.laplace.relative_step,
                eigen_floor: config.laplace.eigen_floor,
            },
            surrogate: SurrogateSection {
                n_train: s.n_train,
                n_test: s.n_test,
                max_search_points: s.max_search_points,
                starts: s.starts,
                polish: s.polish,
                nugget_fallback_percent: s.nugget_fallback.map(|f| f.loo_threshold_percent),
                nugget_upper: s.nugget_fallback.map_or(1e-4, |f| f.bounds.1),
                mape_limit_percent: None,
            },
        }
    }

    /// Effective worker count.
    pub fn jobs(&self, override_jobs: Option<usize>) -> usize {
        match override_jobs.unwrap_or(self.jobs) {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
