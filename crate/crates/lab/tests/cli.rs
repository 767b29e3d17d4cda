use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icc_core::icc::ExemplarConfig;
use icc_lab::bank::bank_hash;
use icc_lab::config::RunConfigFile;
use icc_lab::report::BAND_COLUMNS;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn icc_lab(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_icc-lab"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("ICC_LAB_OUT");
    if let Some(out) = out_env {
        cmd.env("ICC_LAB_OUT", out);
    }
    cmd.output().expect("spawning icc-lab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A two-step Exemplar 1 setup small enough to build and run in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut config = ExemplarConfig::exemplar1(1).unwrap();
    config.name = "tiny".into();
    config.bank.depth = 2;
    config.surrogate.n_train = 20;
    config.surrogate.n_test = 20;
    config.eig.n_outer = 200;
    config.eig.n_inner = 20;
    let mut file = RunConfigFile::from_exemplar(&config);
    file.jobs = 1;
    file.out_dir = "out".into();
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, file.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn shipped_configs_match_presets() {
    for case in 1..=6u8 {
        let name = if case <= 4 { format!("exemplar1_case{case}") } else { format!("exemplar2_case{case}") };
        let file = RunConfigFile::load(&configs_dir().join(format!("{name}.cfg"))).unwrap();
        assert_eq!(file.exemplar().unwrap(), ExemplarConfig::preset(case).unwrap(), "{name}");
    }
}

#[test]
fn config_round_trips_through_toml() {
    let config = ExemplarConfig::exemplar2(6).unwrap();
    let text = RunConfigFile::from_exemplar(&config).to_toml().unwrap();
    let back: RunConfigFile = toml::from_str(&text).unwrap();
    assert_eq!(back.exemplar().unwrap(), config);
}

#[test]
fn unknown_keys_and_parameters_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let good = std::fs::read_to_string(configs_dir().join("exemplar1_case1.cfg")).unwrap();
    let cases = [
        good.replace("[noise]", "[noise]\nvariance = 3.0"),
        good.replace("sigma_y_mpa = 200.0", "sigma_y = 200.0"),
        good.replace("name = \"hill_g\"", "name = \"hill_q\""),
        good.replace("name = \"hill_g\"", "name = \"hill_f\""),
    ];
    for (i, text) in cases.iter().enumerate() {
        let p = dir.path().join(format!("bad{i}.cfg"));
        std::fs::write(&p, text).unwrap();
        assert!(RunConfigFile::load(&p).is_err(), "case {i} accepted");
    }
}

#[test]
fn bank_hash_ignores_trial_settings() {
    let a = ExemplarConfig::exemplar2(5).unwrap();
    let mut b = ExemplarConfig::exemplar2(6).unwrap();
    assert_eq!(bank_hash(&a), bank_hash(&b));
    b.eig.n_inner = 7;
    b.master_seed = 99;
    assert_eq!(bank_hash(&a), bank_hash(&b));
    b.surrogate.n_train += 1;
    assert_ne!(bank_hash(&a), bank_hash(&b));
    assert_ne!(bank_hash(&a), bank_hash(&ExemplarConfig::exemplar1(1).unwrap()));
}

#[test]
fn build_run_and_propagate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let out = dir.path().join("results");
    let out_s = out.to_str().unwrap();

    // Running before the bank exists is refused.
    let early = icc_lab(&["run", "--config", cfg_s, "--out", out_s, "--trials", "1"], None);
    assert_eq!(early.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&early.stderr).contains("build-bank"));

    let built = icc_lab(&["build-bank", "--config", cfg_s, "--out", out_s], None);
    assert!(built.status.success(), "{}", stdout(&built));
    assert!(stdout(&built).contains("12 surrogates"));
    let again = icc_lab(&["build-bank", "--config", cfg_s, "--out", out_s], None);
    assert!(stdout(&again).contains("up to date"));

    let run = icc_lab(
        &["run", "--config", cfg_s, "--out", out_s, "--mode", "static-e11", "--trials", "1", "--seed", "7"],
        None,
    );
    assert!(run.status.success(), "{}", stdout(&run));
    let run_dir = out.join("tiny").join("static-e11");
    for f in ["paths.csv", "posterior_summary.csv", "metrics.csv", "step_stats.csv", "trials.csv", "aggregate.json"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let record = run_dir.join("records").join("trial_00000.json");
    let rec: serde_json::Value = serde_json::from_slice(&std::fs::read(&record).unwrap()).unwrap();
    assert_eq!(rec["path"], serde_json::json!(["E11", "E11"]));

    let prop = icc_lab(
        &["propagate", "--config", cfg_s, "--out", out_s, "--record", run_dir.to_str().unwrap(), "--draws", "1"],
        None,
    );
    assert!(prop.status.success(), "{}", stdout(&prop));
    let mut rdr = csv::Reader::from_path(run_dir.join("bands_trial_00000.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), BAND_COLUMNS);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2 * 100);
    for r in &rows {
        // A single draw gives zero-width bands.
        assert_eq!(r[1], r[2]);
        assert_eq!(r[3], r[4]);
    }
}

#[test]
fn out_env_overrides_flag_and_seed_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let flag_out = dir.path().join("ignored");
    let env_out = dir.path().join("env");
    let args = |seed: &'static str| {
        vec!["run", "--config", cfg_s, "--out", flag_out.to_str().unwrap(), "--trials", "2", "--seed", seed]
    };
    assert!(icc_lab(&["build-bank", "--config", cfg_s], Some(&env_out)).status.success());
    assert!(icc_lab(&args("5"), Some(&env_out)).status.success());
    assert!(!flag_out.exists());
    let rec = env_out.join("tiny/adaptive/records/trial_00001.json");
    let first = std::fs::read(&rec).unwrap();
    assert!(icc_lab(&args("5"), Some(&env_out)).status.success());
    assert_eq!(first, std::fs::read(&rec).unwrap());
    assert!(icc_lab(&args("6"), Some(&env_out)).status.success());
    assert_ne!(first, std::fs::read(&rec).unwrap());
}

#[test]
fn mismatched_bank_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let bank = dir.path().join("bank.json");
    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&cfg, format!("bank_file = \"bank.json\"\n{text}")).unwrap();
    assert!(icc_lab(&["build-bank", "--config", cfg.to_str().unwrap()], None).status.success());
    assert!(bank.is_file());
    let changed = std::fs::read_to_string(&cfg).unwrap().replace("n_train = 20", "n_train = 21");
    std::fs::write(&cfg, changed).unwrap();
    let run = icc_lab(&["run", "--config", cfg.to_str().unwrap(), "--trials", "1"], None);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("different configuration"));
}

#[test]
fn eig_selftest_passes_and_reports_undersampling() {
    let ok = icc_lab(&["eig-selftest"], None);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("tau2=0 psi2=1 N=10000 M=1000: estimate 0.00000"));
    let bad = icc_lab(&["eig-selftest", "--n-outer", "10", "--n-inner", "10"], None);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("failing case (tau2, psi2, N, M)"));
}
