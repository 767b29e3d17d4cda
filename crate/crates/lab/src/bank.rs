//! Building, validating and caching surrogate banks on disk.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use icc_core::icc::ExemplarConfig;
use icc_core::surrogate::{
    canonical_unit_inputs, fit_key, score_key, simulate_sample, test_start, transpose_rows, BankSpec,
    SurrogateBank, SurrogateSettings, TrainingData, ValidationReport,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bumped whenever the bank layout or fitting procedure changes meaning.
pub const BANK_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFile {
    pub format: u32,
    /// Hash of everything that determines the bank's contents.
    pub hash: String,
    pub surrogate: SurrogateSettings,
    pub validation: ValidationReport,
    pub build_seconds: f64,
    pub bank: SurrogateBank,
}

#[derive(Serialize)]
struct HashInput<'a> {
    format: u32,
    spec: &'a BankSpec,
    surrogate: &'a SurrogateSettings,
}

/// Content hash over the surrogate-relevant part of a configuration. Trial
/// settings (noise, priors, EIG sizes, seeds) do not enter.
pub fn bank_hash(config: &ExemplarConfig) -> String {
    let json = serde_json::to_vec(&HashInput {
        format: BANK_FORMAT,
        spec: &config.bank,
        surrogate: &config.surrogate,
    })
    .expect("bank spec serialises");
    hex::encode(Sha256::digest(json))
}

/// Simulates the tree at `inputs` in parallel.
pub fn simulate_parallel(spec: &BankSpec, inputs: Vec<Vec<f64>>) -> Result<TrainingData> {
    let n_keys = spec.n_keys();
    let rows = inputs
        .par_iter()
        .enumerate()
        .map(|(s, theta)| {
            let mut row = vec![0.0; n_keys];
            simulate_sample(spec, s, theta, &mut row).map(|_| row)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(transpose_rows(inputs, &rows, n_keys))
}

/// Trains every surrogate of the configuration's tree and validates it on
/// fresh Halton points.
pub fn build_bank(config: &ExemplarConfig) -> Result<BankFile> {
    let spec = config.bank.clone();
    spec.validate()?;
    let settings = config.surrogate;
    let started = Instant::now();

    log::info!("simulating {} training samples over {} nodes", settings.n_train, spec.n_nodes());
    let data = simulate_parallel(&spec, spec.design(1, settings.n_train)?)?;
    let (unit, order) = canonical_unit_inputs(&spec, &data.inputs);
    let opts = settings.fit_options();
    log::info!("fitting {} surrogates", spec.n_keys());
    let predictors = data
        .targets
        .par_iter()
        .enumerate()
        .map(|(k, t)| fit_key(&spec, &unit, &order, t, &opts).with_context(|| format!("fitting {:?}", spec.key_at(k))))
        .collect::<Result<Vec<_>>>()?;
    let bank = SurrogateBank::from_parts(spec.clone(), unit, predictors)?;

    let start = test_start(settings.n_train);
    log::info!("validating on {} held-out points", settings.n_test);
    let test = simulate_parallel(&spec, spec.design(start, settings.n_test)?)?;
    let validation = score_parallel(&bank, &test, start);
    Ok(BankFile {
        format: BANK_FORMAT,
        hash: bank_hash(config),
        surrogate: settings,
        validation,
        build_seconds: started.elapsed().as_secs_f64(),
        bank,
    })
}

fn score_parallel(bank: &SurrogateBank, test: &TrainingData, start: u64) -> ValidationReport {
    ValidationReport {
        n_test: test.inputs.len(),
        test_start: start,
        keys: (0..bank.spec.n_keys()).into_par_iter().map(|k| score_key(bank, k, test)).collect(),
    }
}

pub fn write_bank(file: &BankFile, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.partial");
    fs::write(&tmp, serde_json::to_vec(file)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_bank(path: &Path) -> Result<BankFile> {
    let bytes = fs::read(path).with_context(|| format!("reading bank {}", path.display()))?;
    let mut file: BankFile = serde_json::from_slice(&bytes).with_context(|| format!("parsing bank {}", path.display()))?;
    file.bank.refresh();
    Ok(file)
}

/// Loads the bank at `path` and checks it was built for `config`.
pub fn load_matching(config: &ExemplarConfig, path: &Path) -> Result<BankFile> {
    let file = read_bank(path)?;
    let expected = bank_hash(config);
    if file.format != BANK_FORMAT || file.hash != expected {
        bail!(
            "bank {} was built for a different configuration (hash {}, expected {}); rebuild it with `icc-lab build-bank`",
            path.display(),
            file.hash,
            expected
        );
    }
    Ok(file)
}

/// Default bank location for a configuration inside `dir`.
pub fn cached_path(dir: &Path, config: &ExemplarConfig) -> PathBuf {
    dir.join(format!("{}.bank.json", &bank_hash(config)[..16]))
}

/// Loads a cached bank or builds and stores it.
pub fn load_or_build(config: &ExemplarConfig, path: &Path) -> Result<BankFile> {
    if path.exists() {
        return load_matching(config, path);
    }
    let file = build_bank(config)?;
    write_bank(&file, path)?;
    Ok(file)
}
