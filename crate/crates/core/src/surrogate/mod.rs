//! Gaussian-process emulation of the material point over the load-path tree.

pub mod gp;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::constitutive::{
    simulate_history, MaterialParameters, MaterialState, Parameter, ReturnMapOptions, StressPoint,
};
use crate::error::{Error, Result};
use crate::loadpath::{node_count, node_depth, strain_history, Axis, LoadStep, MeasurementSchedule};
use crate::stats::halton_from;

pub use gp::{GpFitOptions, GpHyperparameters, GpPredictor, GpSurrogate, NuggetFallback};

/// Training and fitting knobs that determine a bank's contents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSettings {
    pub n_train: usize,
    pub n_test: usize,
    pub max_search_points: usize,
    pub starts: usize,
    pub polish: usize,
    pub nugget_fallback: Option<NuggetFallback>,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        let fit = GpFitOptions::default();
        SurrogateSettings {
            n_train: 200,
            n_test: 1000,
            max_search_points: fit.max_search_points,
            starts: fit.starts,
            polish: fit.polish,
            nugget_fallback: None,
        }
    }
}

impl SurrogateSettings {
    pub fn fit_options(&self) -> GpFitOptions {
        GpFitOptions {
            max_search_points: self.max_search_points,
            starts: self.starts,
            polish: self.polish,
            nugget_fallback: self.nugget_fallback,
            ..GpFitOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Qoi {
    S11,
    S22,
}

impl Qoi {
    pub const BOTH: [Qoi; 2] = [Qoi::S11, Qoi::S22];

    pub fn as_str(self) -> &'static str {
        match self {
            Qoi::S11 => "s11",
            Qoi::S22 => "s22",
        }
    }

    pub fn of(self, s: &StressPoint) -> f64 {
        match self {
            Qoi::S11 => s.sigma11,
            Qoi::S22 => s.sigma22,
        }
    }
}

/// One emulated output: a stress component at a measurement point of the
/// load step ending at `node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SurrogateKey {
    /// Tree node, `>= 1`.
    pub node: usize,
    /// 0-based measurement point within the step.
    pub point: usize,
    pub qoi: Qoi,
}

/// Everything that determines the emulated function: fixed material
/// constants, which parameters vary and over what box, and the tree layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSpec {
    pub base: MaterialParameters,
    pub calibrated: Vec<Parameter>,
    pub bounds: Vec<(f64, f64)>,
    pub strain_increment: f64,
    pub depth: usize,
    pub schedule: MeasurementSchedule,
    pub return_map: ReturnMapOptions,
}

impl BankSpec {
    pub fn validate(&self) -> Result<()> {
        if self.calibrated.is_empty() || self.calibrated.len() != self.bounds.len() {
            return Err(Error::Config("one bound pair per calibrated parameter".into()));
        }
        if self.bounds.iter().any(|(a, b)| !(a < b)) {
            return Err(Error::Config("parameter bounds need lower < upper".into()));
        }
        if self.depth == 0 || !(self.strain_increment > 0.0) {
            return Err(Error::Config("tree depth and strain increment must be positive".into()));
        }
        MeasurementSchedule::new(self.schedule.points_per_step, self.schedule.increments_per_step)?;
        self.base.validate()
    }

    pub fn dim(&self) -> usize {
        self.calibrated.len()
    }

    pub fn points_per_step(&self) -> usize {
        self.schedule.points_per_step
    }

    pub fn n_nodes(&self) -> usize {
        node_count(self.depth)
    }

    pub fn n_keys(&self) -> usize {
        self.n_nodes() * self.points_per_step() * Qoi::BOTH.len()
    }

    /// Dense index of a key; keys of one node are contiguous, ordered by
    /// (point, qoi).
    pub fn key_index(&self, key: &SurrogateKey) -> Option<usize> {
        if key.node == 0 || key.node > self.n_nodes() || key.point >= self.points_per_step() {
            return None;
        }
        let q = match key.qoi {
            Qoi::S11 => 0,
            Qoi::S22 => 1,
        };
        Some(((key.node - 1) * self.points_per_step() + key.point) * 2 + q)
    }

    pub fn key_at(&self, index: usize) -> SurrogateKey {
        let q = index % 2;
        let rest = index / 2;
        SurrogateKey {
            node: rest / self.points_per_step() + 1,
            point: rest % self.points_per_step(),
            qoi: Qoi::BOTH[q],
        }
    }

    /// Range of key indices belonging to `node`.
    pub fn node_keys(&self, node: usize) -> core::ops::Range<usize> {
        let per = self.points_per_step() * 2;
        (node - 1) * per..node * per
    }

    pub fn material(&self, theta: &[f64]) -> MaterialParameters {
        self.base.with_values(&self.calibrated, theta)
    }

    pub fn to_unit(&self, theta: &[f64], out: &mut [f64]) {
        for ((u, t), (a, b)) in out.iter_mut().zip(theta).zip(&self.bounds) {
            *u = (t - a) / (b - a);
        }
    }

    /// Training or test inputs: Halton points from sequence index `start`.
    pub fn design(&self, start: u64, n: usize) -> Result<Vec<Vec<f64>>> {
        halton_from(self.dim(), start, n, &self.bounds)
    }

    /// Simulates every node of the tree for one parameter vector, writing
    /// one value per key. Each node state is integrated exactly once by
    /// branching from the parent's checkpoint.
    pub fn simulate_tree(&self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        let params = self.material(theta);
        params.validate()?;
        let indices = self.schedule.indices();
        let mut scratch = Vec::with_capacity(indices.len());
        self.visit(&params, 0, &MaterialState::virgin(), &indices, &mut scratch, out)
    }

    fn visit(
        &self,
        params: &MaterialParameters,
        node: usize,
        state: &MaterialState,
        indices: &[usize],
        scratch: &mut Vec<StressPoint>,
        out: &mut [f64],
    ) -> Result<()> {
        for axis in Axis::BOTH {
            let child = crate::loadpath::TREE_ARITY * node + if axis == Axis::E11 { 1 } else { 2 };
            let step = LoadStep {
                axis,
                delta_eps: self.strain_increment,
            };
            let history = strain_history(state.totals(), &step, self.schedule.increments_per_step);
            scratch.clear();
            let next = simulate_history(params, state, &history, indices, &self.return_map, scratch)
                .map_err(|e| Error::Training {
                    sample: usize::MAX,
                    node: child,
                    source: alloc::boxed::Box::new(e),
                })?;
            let base = self.node_keys(child).start;
            for (j, s) in scratch.iter().enumerate() {
                out[base + 2 * j] = s.sigma11;
                out[base + 2 * j + 1] = s.sigma22;
            }
            if node_depth(child) < self.depth {
                self.visit(params, child, &next, indices, scratch, out)?;
            }
        }
        Ok(())
    }
}

/// Simulated responses at a set of parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    /// Physical parameter vectors, one per sample.
    pub inputs: Vec<Vec<f64>>,
    /// `targets[key][sample]`.
    pub targets: Vec<Vec<f64>>,
}

/// Simulates the whole tree for training sample `sample`, writing one value
/// per key into `row`.
pub fn simulate_sample(spec: &BankSpec, sample: usize, theta: &[f64], row: &mut [f64]) -> Result<()> {
    spec.simulate_tree(theta, row).map_err(|e| match e {
        Error::Training { node, source, .. } => Error::Training { sample, node, source },
        other => other,
    })
}

/// Gathers per-sample rows (`rows[sample][key]`) into training data.
pub fn transpose_rows(inputs: Vec<Vec<f64>>, rows: &[Vec<f64>], n_keys: usize) -> TrainingData {
    let mut targets = vec![vec![0.0; rows.len()]; n_keys];
    for (s, row) in rows.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            targets[k][s] = *v;
        }
    }
    TrainingData { inputs, targets }
}

/// Simulates the whole tree at `inputs`, reporting the failing sample and
/// node on error.
pub fn simulate_design(spec: &BankSpec, inputs: Vec<Vec<f64>>) -> Result<TrainingData> {
    let rows = inputs
        .iter()
        .enumerate()
        .map(|(s, theta)| {
            let mut row = vec![0.0; spec.n_keys()];
            simulate_sample(spec, s, theta, &mut row).map(|_| row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(transpose_rows(inputs, &rows, spec.n_keys()))
}

/// Halton training set of `n_samples` points starting at sequence index 1.
pub fn generate_training_data(spec: &BankSpec, n_samples: usize) -> Result<TrainingData> {
    spec.validate()?;
    if n_samples < spec.dim() + 2 {
        return Err(Error::Config(alloc::format!(
            "need at least {} training samples",
            spec.dim() + 2
        )));
    }
    simulate_design(spec, spec.design(1, n_samples)?)
}

/// Unit-box training inputs in the canonical row order used by every fit,
/// and the permutation that produced them.
pub fn canonical_unit_inputs(spec: &BankSpec, inputs: &[Vec<f64>]) -> (Vec<f64>, Vec<usize>) {
    let dim = spec.dim();
    let mut unit = vec![0.0; inputs.len() * dim];
    for (row, theta) in unit.chunks_exact_mut(dim).zip(inputs) {
        spec.to_unit(theta, row);
    }
    let order = gp::canonical_order(&unit, dim);
    let sorted = order
        .iter()
        .flat_map(|&i| unit[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    (sorted, order)
}

/// Fits the surrogate of one key. `unit_inputs` must be canonical.
pub fn fit_key(
    spec: &BankSpec,
    unit_inputs: &[f64],
    order: &[usize],
    targets: &[f64],
    opts: &GpFitOptions,
) -> Result<GpPredictor> {
    let y: Vec<f64> = order.iter().map(|&i| targets[i]).collect();
    Ok(GpSurrogate::fit(unit_inputs, spec.dim(), &y, opts)?.into_predictor())
}

/// All surrogates of a tree, sharing one set of training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateBank {
    pub spec: BankSpec,
    /// Canonical-order unit-box training inputs, row major.
    pub unit_inputs: Vec<f64>,
    pub predictors: Vec<GpPredictor>,
}

impl SurrogateBank {
    pub fn from_parts(spec: BankSpec, unit_inputs: Vec<f64>, mut predictors: Vec<GpPredictor>) -> Result<Self> {
        if predictors.len() != spec.n_keys() {
            return Err(Error::Config(alloc::format!(
                "bank has {} surrogates, tree needs {}",
                predictors.len(),
                spec.n_keys()
            )));
        }
        let n = unit_inputs.len() / spec.dim();
        if predictors.iter().any(|p| p.weights.len() != n || p.dim() != spec.dim()) {
            return Err(Error::Config("surrogate sizes disagree with training inputs".into()));
        }
        for p in &mut predictors {
            p.refresh();
        }
        Ok(SurrogateBank {
            spec,
            unit_inputs,
            predictors,
        })
    }

    /// Fits every key sequentially.
    pub fn build(spec: BankSpec, data: &TrainingData, opts: &GpFitOptions) -> Result<Self> {
        let (unit, order) = canonical_unit_inputs(&spec, &data.inputs);
        let predictors = data
            .targets
            .iter()
            .map(|t| fit_key(&spec, &unit, &order, t, opts))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(spec, unit, predictors)
    }

    /// Re-derives caches after deserialisation.
    pub fn refresh(&mut self) {
        for p in &mut self.predictors {
            p.refresh();
        }
    }

    pub fn n_train(&self) -> usize {
        self.unit_inputs.len() / self.spec.dim()
    }

    pub fn get(&self, key: &SurrogateKey) -> Result<&GpPredictor> {
        self.spec
            .key_index(key)
            .map(|i| &self.predictors[i])
            .ok_or(Error::MissingSurrogate {
                node: key.node,
                point: key.point,
            })
    }

    /// Mean prediction of one key at physical parameters `theta`.
    pub fn predict(&self, key_index: usize, theta: &[f64]) -> f64 {
        let mut u = [0.0; 8];
        let u = &mut u[..self.spec.dim()];
        self.spec.to_unit(theta, u);
        self.predictors[key_index].mean(&self.unit_inputs, u)
    }

    /// Mean predictions of every key of `node`, in key order.
    pub fn predict_node(&self, node: usize, theta: &[f64], out: &mut [f64]) {
        let mut u = [0.0; 8];
        let u = &mut u[..self.spec.dim()];
        self.spec.to_unit(theta, u);
        for (o, k) in out.iter_mut().zip(self.spec.node_keys(node)) {
            *o = self.predictors[k].mean(&self.unit_inputs, u);
        }
    }

    /// Mean prediction and gradient with respect to physical `theta`.
    pub fn predict_with_gradient(&self, key_index: usize, theta: &[f64], grad: &mut [f64]) -> f64 {
        let dim = self.spec.dim();
        let mut u = [0.0; 8];
        let u = &mut u[..dim];
        self.spec.to_unit(theta, u);
        let m = self.predictors[key_index].mean_with_gradient(&self.unit_inputs, u, grad);
        for (g, (a, b)) in grad.iter_mut().zip(&self.spec.bounds) {
            *g /= b - a;
        }
        m
    }
}

/// Held-out accuracy of one surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyError {
    pub key: SurrogateKey,
    /// Mean absolute percentage error, in percent.
    pub mape_percent: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_test: usize,
    pub test_start: u64,
    pub keys: Vec<KeyError>,
}

impl ValidationReport {
    pub fn worst_mape_percent(&self) -> f64 {
        self.keys.iter().map(|k| k.mape_percent).fold(0.0, f64::max)
    }

    pub fn best_mape_percent(&self) -> f64 {
        self.keys.iter().map(|k| k.mape_percent).fold(f64::INFINITY, f64::min)
    }
}

/// Sequence index where test points start, keeping them clear of training.
pub fn test_start(n_train: usize) -> u64 {
    n_train as u64 + 1000
}

/// Held-out error of key `k` against reference responses.
pub fn score_key(bank: &SurrogateBank, k: usize, data: &TrainingData) -> KeyError {
    let mut abs_pct = 0.0;
    let mut worst = 0.0_f64;
    for (s, theta) in data.inputs.iter().enumerate() {
        let truth = data.targets[k][s];
        let err = (bank.predict(k, theta) - truth).abs();
        worst = worst.max(err);
        abs_pct += if truth != 0.0 { err / truth.abs() } else if err == 0.0 { 0.0 } else { f64::INFINITY };
    }
    KeyError {
        key: bank.spec.key_at(k),
        mape_percent: 100.0 * abs_pct / data.inputs.len() as f64,
        max_abs_error: worst,
    }
}

/// Scores a bank against reference responses at the given inputs.
pub fn score_bank(bank: &SurrogateBank, data: &TrainingData, test_start: u64) -> ValidationReport {
    ValidationReport {
        n_test: data.inputs.len(),
        test_start,
        keys: (0..bank.spec.n_keys()).map(|k| score_key(bank, k, data)).collect(),
    }
}

/// Simulates `n_test` fresh Halton points past the training design and
/// reports per-key MAPE.
pub fn validate_bank(bank: &SurrogateBank, n_test: usize) -> Result<ValidationReport> {
    let start = test_start(bank.n_train());
    let data = simulate_design(&bank.spec, bank.spec.design(start, n_test)?)?;
    Ok(score_bank(bank, &data, start))
}
