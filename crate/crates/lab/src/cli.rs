//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use icc_core::boed::check_linear_gaussian;
use icc_core::icc::{aggregate, propagate_uncertainty, DesignMode, ExemplarConfig, TrialRecord};

use crate::bank::{build_bank, cached_path, load_matching, write_bank, BankFile};
use crate::config::RunConfigFile;
use crate::report::{self, RunSummary};
use crate::runner::run_trials;

pub const OUT_ENV: &str = "ICC_LAB_OUT";

#[derive(Debug, Parser)]
#[command(name = "icc-lab", version, about = "Interlaced characterization and calibration of a plane-stress material point")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and validate the surrogate bank of a configuration.
    BuildBank(BuildBankArgs),
    /// Run repeat trials of one design and write records and tables.
    Run(RunArgs),
    /// Push a trial's final posterior through the material point.
    Propagate(PropagateArgs),
    /// Check the EIG estimator against the linear-Gaussian closed form.
    EigSelftest(SelftestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; the ICC_LAB_OUT environment variable takes
    /// precedence, the config's `out_dir` is the fallback.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores); overrides the config.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Master seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildBankArgs {
    #[command(flatten)]
    pub common: Common,
    /// Rebuild even when a matching bank exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Adaptive,
    StaticE11,
    StaticE22,
}

impl From<ModeArg> for DesignMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adaptive => DesignMode::Adaptive,
            ModeArg::StaticE11 => DesignMode::StaticE11,
            ModeArg::StaticE22 => DesignMode::StaticE22,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "adaptive")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 100)]
    pub trials: u64,
    /// Index of the first trial.
    #[arg(long, default_value_t = 0)]
    pub first: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pick {
    MinTotalVariance,
    MaxTotalVariance,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub common: Common,
    /// A trial record, or a run directory to pick one from.
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long, value_enum, default_value = "min-total-variance")]
    pub pick: Pick,
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Outer samples per estimate.
    #[arg(long, default_value_t = 10_000)]
    pub n_outer: usize,
    /// Inner samples per estimate.
    #[arg(long, default_value_t = 1_000)]
    pub n_inner: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Largest accepted |estimate - exact| in nats.
    #[arg(long, default_value_t = 0.02)]
    pub tolerance: f64,
}

/// (tau2, psi2) pairs checked by `eig-selftest`.
pub const SELFTEST_GRID: [(f64, f64); 6] = [(1.0, 1.0), (0.0, 1.0), (0.25, 1.0), (2.0, 1.0), (10.0, 10.0), (1.0, 10.0)];

/// Loaded configuration with command-line overrides applied.
pub struct RunContext {
    pub path: PathBuf,
    pub file: RunConfigFile,
    pub config: ExemplarConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Common {
    pub fn resolve(&self) -> Result<RunContext> {
        let mut file = RunConfigFile::load(&self.config)?;
        if let Some(seed) = self.seed {
            file.seed = seed;
        }
        let env_out = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        let out = env_out.or_else(|| self.out.clone()).unwrap_or_else(|| file.out_dir.clone());
        let jobs = file.jobs(self.jobs);
        let config = file.exemplar()?;
        Ok(RunContext {
            path: self.config.clone(),
            file,
            config,
            out,
            jobs,
        })
    }
}

impl RunContext {
    pub fn bank_path(&self) -> PathBuf {
        self.file
            .bank_file
            .clone()
            .unwrap_or_else(|| cached_path(&self.out.join("banks"), &self.config))
    }

    fn install_pool(&self) {
        // Fails only if a pool already exists, e.g. under the test harness.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build_global();
    }
}

/// Exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<Outcome> {
    match cli.command {
        Command::BuildBank(a) => cmd_build_bank(&a, out),
        Command::Run(a) => cmd_run(&a, out),
        Command::Propagate(a) => cmd_propagate(&a, out),
        Command::EigSelftest(a) => cmd_eig_selftest(&a, out),
    }
}

pub fn cmd_build_bank(args: &BuildBankArgs, out: &mut dyn Write) -> Result<Outcome> {
    let ctx = args.common.resolve()?;
    ctx.install_pool();
    let path = ctx.bank_path();
    let file = if path.exists() && !args.force {
        let f = load_matching(&ctx.config, &path)?;
        writeln!(out, "bank {} is up to date", path.display())?;
        f
    } else {
        let f = build_bank(&ctx.config)?;
        write_bank(&f, &path)?;
        writeln!(out, "wrote {} ({:.1} s)", path.display(), f.build_seconds)?;
        f
    };
    let table = path.with_extension("validation.csv");
    write_validation_table(&file, &table)?;
    print_validation(&file, out)?;
    writeln!(out, "per-key validation table: {}", table.display())?;
    let worst = file.validation.worst_mape_percent();
    if let Some(limit) = ctx.file.surrogate.mape_limit_percent {
        if !(worst <= limit) {
            writeln!(out, "FAIL: worst held-out MAPE {worst:.3e} % exceeds the limit {limit} %")?;
            return Ok(Outcome::Fail);
        }
    }
    Ok(Outcome::Pass)
}

fn write_validation_table(file: &BankFile, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "point", "qoi", "mape_percent", "max_abs_error"])?;
    for k in &file.validation.keys {
        w.write_record([
            k.key.node.to_string(),
            k.key.point.to_string(),
            k.key.qoi.as_str().to_string(),
            format!("{}", k.mape_percent),
            format!("{}", k.max_abs_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn print_validation(file: &BankFile, out: &mut dyn Write) -> Result<()> {
    let v = &file.validation;
    writeln!(
        out,
        "{} surrogates, {} training points, {} held-out points from Halton index {}",
        v.keys.len(),
        file.bank.n_train(),
        v.n_test,
        v.test_start
    )?;
    writeln!(
        out,
        "held-out MAPE: best {:.3e} %, worst {:.3e} %",
        v.best_mape_percent(),
        v.worst_mape_percent()
    )?;
    let mut worst: Vec<_> = v.keys.iter().collect();
    worst.sort_by(|a, b| b.mape_percent.total_cmp(&a.mape_percent));
    writeln!(out, "{:>6} {:>5} {:>4} {:>14} {:>14}", "node", "point", "qoi", "mape_%", "max_abs_err")?;
    for k in worst.iter().take(10) {
        writeln!(
            out,
            "{:>6} {:>5} {:>4} {:>14.4e} {:>14.4e}",
            k.key.node,
            k.key.point,
            k.key.qoi.as_str(),
            k.mape_percent,
            k.max_abs_error
        )?;
    }
    Ok(())
}

fn require_bank(ctx: &RunContext) -> Result<BankFile> {
    let path = ctx.bank_path();
    if !path.exists() {
        bail!(
            "no surrogate bank at {}; run `icc-lab build-bank --config {}` first",
            path.display(),
            ctx.path.display()
        );
    }
    load_matching(&ctx.config, &path)
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<Outcome> {
    let ctx = args.common.resolve()?;
    ctx.install_pool();
    let bank = require_bank(&ctx)?;
    let mode: DesignMode = args.mode.into();
    let batch = run_trials(&ctx.config, &bank.bank, mode, args.first, args.trials);
    let dir = report::run_dir(&ctx.out, &ctx.config.name, mode.as_str());
    let report = if batch.records.is_empty() {
        None
    } else {
        Some(aggregate(&batch.records, batch.failures.clone())?)
    };
    let n = batch.records.len();
    let summary = RunSummary {
        config: ctx.config.name.clone(),
        mode: mode.to_string(),
        master_seed: ctx.config.master_seed,
        jobs: ctx.jobs,
        completed: n,
        failed: batch.failures.len(),
        flagged: batch.records.iter().filter(|r| r.flagged).count(),
        wall_seconds: batch.wall_seconds,
        mean_trial_seconds: if n > 0 { batch.seconds.iter().sum::<f64>() / n as f64 } else { f64::NAN },
        mean_step_seconds: batch.seconds_per_step(),
    };
    report::write_run(&dir, &batch, report.as_ref(), &summary)?;

    writeln!(
        out,
        "{} {}: {} completed, {} failed, {} flagged, {:.1} s wall, {:.2} s per step",
        summary.config, summary.mode, n, summary.failed, summary.flagged, summary.wall_seconds, summary.mean_step_seconds
    )?;
    if let Some(r) = &report {
        for c in r.paths.iter().take(5) {
            writeln!(out, "  {:>6.1} %  [{}]", c.percent, c.path)?;
        }
        let m = &r.final_all;
        writeln!(
            out,
            "  final: total variance {:.4e}, generalized variance {:.4e}, MD {:.3}",
            m.total_variance, m.generalized_variance, m.mahalanobis
        )?;
    }
    writeln!(out, "wrote {}", dir.display())?;
    for f in &batch.failures {
        writeln!(out, "  trial {} failed: {}", f.trial_index, f.message)?;
    }
    Ok(if batch.failures.is_empty() { Outcome::Pass } else { Outcome::Fail })
}

fn final_total_variance(r: &TrialRecord) -> f64 {
    r.final_step().map_or(f64::NAN, |s| s.summary.total_variance)
}

/// The record at `path`, or the min/max total-variance record of a run
/// directory.
pub fn pick_record(path: &Path, pick: Pick) -> Result<TrialRecord> {
    if path.is_file() {
        return report::read_record(path);
    }
    let records = report::read_records(path)?;
    let candidates = records.into_iter().filter(|r| final_total_variance(r).is_finite());
    let chosen = match pick {
        Pick::MinTotalVariance => candidates.min_by(|a, b| final_total_variance(a).total_cmp(&final_total_variance(b))),
        Pick::MaxTotalVariance => candidates.max_by(|a, b| final_total_variance(a).total_cmp(&final_total_variance(b))),
    };
    chosen.with_context(|| format!("no record with a final posterior under {}", path.display()))
}

pub fn cmd_propagate(args: &PropagateArgs, out: &mut dyn Write) -> Result<Outcome> {
    let ctx = args.common.resolve()?;
    let record = pick_record(&args.record, args.pick)?;
    if record.parameters != ctx.config.bank.calibrated {
        bail!("record calibrates {:?} but the config calibrates {:?}", record.parameters, ctx.config.bank.calibrated);
    }
    let post = &record
        .final_step()
        .with_context(|| format!("trial {} has no posterior", record.trial_index))?
        .posterior;
    let bands = propagate_uncertainty(post, &record.load_path(), &ctx.config, args.draws, ctx.config.master_seed)?;
    let dir = report::run_dir(&ctx.out, &ctx.config.name, record.mode.as_str());
    let file = dir.join(format!("bands_trial_{:05}.csv", record.trial_index));
    report::write_bands(&file, &bands)?;
    writeln!(
        out,
        "trial {} [{}]: {} draws, {} excluded, wrote {}",
        record.trial_index,
        record.path_label(),
        bands.n_draws,
        bands.excluded,
        file.display()
    )?;
    Ok(Outcome::Pass)
}

pub fn cmd_eig_selftest(args: &SelftestArgs, out: &mut dyn Write) -> Result<Outcome> {
    let mut failed = Vec::new();
    for (i, &(tau2, psi2)) in SELFTEST_GRID.iter().enumerate() {
        let c = check_linear_gaussian(tau2, psi2, args.n_outer, args.n_inner, icc_core::stats::mix_seed(&[args.seed, i as u64]))?;
        let ok = c.abs_error() < args.tolerance;
        writeln!(
            out,
            "{} tau2={} psi2={} N={} M={}: estimate {:.5}, exact {:.5}, error {:.5}",
            if ok { "pass" } else { "FAIL" },
            tau2,
            psi2,
            c.n_outer,
            c.n_inner,
            c.estimate,
            c.analytic,
            c.abs_error()
        )?;
        if !ok {
            failed.push(c);
        }
    }
    if failed.is_empty() {
        writeln!(out, "eig-selftest passed")?;
        Ok(Outcome::Pass)
    } else {
        for c in &failed {
            writeln!(
                out,
                "failing case (tau2, psi2, N, M) = ({}, {}, {}, {})",
                c.tau2, c.psi2, c.n_outer, c.n_inner
            )?;
        }
        Ok(Outcome::Fail)
    }
}
