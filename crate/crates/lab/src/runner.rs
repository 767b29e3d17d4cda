//! Parallel execution of repeat trials.

use std::time::Instant;

use anyhow::Result;
use icc_core::icc::{run_trial, DesignMode, ExemplarConfig, TrialFailure, TrialRecord};
use icc_core::surrogate::SurrogateBank;
use rayon::prelude::*;

/// Completed and failed trials of one (config, mode), in trial order.
#[derive(Debug, Clone)]
pub struct TrialBatch {
    pub mode: DesignMode,
    pub records: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
    /// Wall time of each completed trial, aligned with `records`.
    pub seconds: Vec<f64>,
    pub wall_seconds: f64,
}

impl TrialBatch {
    /// Mean wall time per load step across completed trials.
    pub fn seconds_per_step(&self) -> f64 {
        let steps: usize = self.records.iter().map(|r| r.steps.len()).sum();
        if steps == 0 {
            return f64::NAN;
        }
        self.seconds.iter().sum::<f64>() / steps as f64
    }
}

/// Runs trials `first..first + n` of `mode`. Trials that error are recorded
/// as failures and do not stop the batch.
pub fn run_trials(
    config: &ExemplarConfig,
    bank: &SurrogateBank,
    mode: DesignMode,
    first: u64,
    n: u64,
) -> TrialBatch {
    let started = Instant::now();
    let outcomes: Vec<(u64, Result<TrialRecord, String>, f64)> = (first..first + n)
        .into_par_iter()
        .map(|idx| {
            let t0 = Instant::now();
            let out = run_trial(config, bank, mode, idx).map_err(|e| e.to_string());
            let secs = t0.elapsed().as_secs_f64();
            match &out {
                Ok(r) => log::info!("{} {mode} trial {idx}: {} in {secs:.1} s", config.name, r.path_label()),
                Err(e) => log::warn!("{} {mode} trial {idx} failed: {e}", config.name),
            }
            (idx, out, secs)
        })
        .collect();

    let mut batch = TrialBatch {
        mode,
        records: Vec::new(),
        failures: Vec::new(),
        seconds: Vec::new(),
        wall_seconds: 0.0,
    };
    for (idx, out, secs) in outcomes {
        match out {
            Ok(r) => {
                batch.records.push(r);
                batch.seconds.push(secs);
            }
            Err(message) => batch.failures.push(TrialFailure { trial_index: idx, message }),
        }
    }
    batch.wall_seconds = started.elapsed().as_secs_f64();
    batch
}
