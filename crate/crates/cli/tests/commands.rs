use std::path::Path;
use std::process::{Command, Output};

use kfrtrl::analysis::{AlignmentSample, VarianceRow};
use kfrtrl::linalg::RngHandle;
use kfrtrl::training::{CopyRecord, ExperimentRecord};
use kfrtrl_cli::commands::{cmd_copy, cmd_lm, cmd_variance, ALIGN_TIME_CSV, ALIGN_UNITS_CSV, CHECKPOINT, COPY_CSV};
use kfrtrl_cli::config::Config;
use kfrtrl_cli::io::{read_checkpoint, read_csv, RunManifest, MANIFEST_FILE};

const QUICK_CHECK: &str = r#"
[check]
exact_configs = 3
fd_configs = 3
kron_trials = 2
unbiased_samples = 3000
identity_draws = 500
scaling_samples = 60
claim_runs = 2
"#;

fn kfrtrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kfrtrl")).current_dir(dir).args(args).output().unwrap()
}

fn config(text: &str) -> Config {
    Config::parse(text).unwrap()
}

#[test]
fn default_check_passes_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let res = kfrtrl(tmp.path(), &["check", "--out", "run"]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(res.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("PASS") && !stdout.contains("FAIL"), "{stdout}");
    assert!(tmp.path().join("run/check.csv").exists());
}

#[test]
fn zero_tolerance_fails_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), format!("{QUICK_CHECK}tolerance = 0\n")).unwrap();
    let res = kfrtrl(tmp.path(), &["check", "--config", "c.toml", "--out", "run"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stdout).contains("FAIL"));
}

#[test]
fn missing_config_exits_two_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let res = kfrtrl(tmp.path(), &["copy", "--config", "nowhere/missing.toml"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("nowhere/missing.toml"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn invalid_values_and_reused_directories_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[copy]\nlearning_rate = -1.0\n").unwrap();
    assert_eq!(kfrtrl(tmp.path(), &["copy", "--config", "bad.toml"]).status.code(), Some(2));
    std::fs::write(tmp.path().join("typo.toml"), "[copy]\nbatchsize = 4\n").unwrap();
    assert_eq!(kfrtrl(tmp.path(), &["copy", "--config", "typo.toml"]).status.code(), Some(2));

    std::fs::write(tmp.path().join("ok.toml"), "[copy]\nn = 4\nbatch = 2\nmax_steps = 3\n").unwrap();
    assert_eq!(kfrtrl(tmp.path(), &["copy", "--config", "ok.toml", "--out", "r"]).status.code(), Some(0));
    let again = kfrtrl(tmp.path(), &["copy", "--config", "ok.toml", "--out", "r"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already holds a run"));
}

#[test]
fn copy_with_exact_rtrl_writes_one_row_per_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = config("[copy]\nestimator = \"rtrl\"\nn = 8\nbatch = 2\nmax_steps = 1000\n");
    let summary = cmd_copy(&cfg, &out).unwrap();
    assert_eq!(summary.rows, 1000);

    let rows: Vec<CopyRecord> = read_csv(&out.join(COPY_CSV)).unwrap();
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().enumerate().all(|(i, r)| r.step == i as u64 && r.estimator == "rtrl"));
    assert!(rows.windows(2).all(|w| w[1].t >= w[0].t));
    assert!(rows.iter().all(|r| r.bits_per_char.is_finite() && r.bits_per_char >= 0.0));
    assert_eq!(rows.last().unwrap().t, summary.final_t);
}

#[test]
fn copy_learns_length_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("[copy]\nn = 16\nmax_steps = 5000\ntarget_t = 2\n");
    let summary = cmd_copy(&cfg, &tmp.path().join("run")).unwrap();
    assert!(summary.max_solved >= 1, "{summary:?}");
    assert!(summary.rows < 5000);
}

#[test]
fn manifest_precedes_data_and_is_stamped_at_the_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut cfg = config("[copy]\nn = 4\nbatch = 2\nmax_steps = 5\n");
    cfg.seed = 41;
    cmd_copy(&cfg, &out).unwrap();

    let manifest = RunManifest::read(&out).unwrap();
    assert_eq!(manifest.command, "copy");
    assert_eq!(manifest.seed, 41);
    assert_eq!(manifest.config, cfg);
    assert!(manifest.end.is_some());
    assert!(manifest.outputs.contains(&COPY_CSV.to_string()));
    let written = |f: &str| std::fs::metadata(out.join(f)).unwrap().modified().unwrap();
    assert!(written(MANIFEST_FILE) >= written(COPY_CSV));
    let text = std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
    assert!(text.find("[end]").unwrap() > text.find("[config").unwrap());
}

#[test]
fn checkpoint_reads_back_the_trained_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = config("[copy]\nn = 5\nbatch = 2\nmax_steps = 20\n");
    cmd_copy(&cfg, &out).unwrap();
    let cell = read_checkpoint(&out.join(CHECKPOINT)).unwrap();
    assert_eq!((cell.n, cell.arch), (5, cfg.copy.arch));

    let twin = tmp.path().join("twin");
    cmd_copy(&cfg, &twin).unwrap();
    assert_eq!(read_checkpoint(&twin.join(CHECKPOINT)).unwrap(), cell);
}

fn lm_bpc(corpus: &str, steps: usize) -> Vec<f64> {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("corpus.txt");
    std::fs::write(&path, corpus).unwrap();
    let cfg = config(&format!("[lm]\nn = 8\nlearning_rate = 0.01\nmax_steps = {steps}\n"));
    let rows: Vec<ExperimentRecord> = cmd_lm(&cfg, Some(&path), &tmp.path().join("run")).unwrap();
    assert_eq!(rows.len(), steps);
    rows.iter().map(|r| r.value).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn single_symbol_corpus_costs_nothing() {
    let bpc = lm_bpc(&"a".repeat(500), 200);
    assert!(bpc.iter().all(|&b| b.abs() < 1e-12), "{:?}", &bpc[..5]);
}

#[test]
fn random_bits_settle_near_one_bit() {
    let mut rng = RngHandle::new(12);
    let text: String = (0..20_000).map(|_| if rng.sign() > 0.0 { '0' } else { '1' }).collect();
    let bpc = lm_bpc(&text, 3000);
    let tail = mean(&bpc[2000..]);
    assert!((tail - 1.0).abs() < 0.1, "tail mean {tail}");
}

#[test]
fn exact_rtrl_against_itself_aligns_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = config(
        "[variance]\nestimators = [\"rtrl\"]\nreference = \"rtrl\"\nrepeats = 3\ntime_n = 5\ntime_steps = 40\n\
         time_start = 10\ntime_every = 10\nunits = [3, 4]\nunit_steps = 15\nscaling_units = []\n",
    );
    let result = cmd_variance(&cfg, &out).unwrap();
    let over_time: Vec<AlignmentSample> = read_csv(&out.join(ALIGN_TIME_CSV)).unwrap();
    let over_units: Vec<AlignmentSample> = read_csv(&out.join(ALIGN_UNITS_CSV)).unwrap();
    assert_eq!(over_time, result.over_time);
    assert_eq!(over_units, result.over_units);
    for s in over_time.iter().chain(&over_units) {
        assert!((s.cosine - 1.0).abs() < 1e-9, "{s:?}");
    }
    // One row per (checkpoint, repeat) and per (size, repeat).
    assert_eq!(over_time.len(), 4 * 3);
    assert_eq!(over_units.len(), 2 * 3);
}

#[test]
fn variance_rows_account_for_every_estimator_checkpoint_and_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = config(
        "[variance]\nrepeats = 4\ntime_n = 4\ntime_steps = 50\ntime_start = 10\ntime_every = 20\n\
         units = [3, 5]\nunit_steps = 12\nscaling_units = [3, 6]\nscaling_samples = 30\n",
    );
    let result = cmd_variance(&cfg, &out).unwrap();
    let estimators = ["kf-rtrl", "uoro", "uoro-avg-4"];
    let checkpoints = [10, 30, 50];
    assert_eq!(result.over_time.len(), estimators.len() * checkpoints.len() * 4);
    for est in estimators {
        for t in checkpoints {
            let seeds: Vec<u64> = result
                .over_time
                .iter()
                .filter(|s| s.estimator == est && s.t == t)
                .map(|s| s.seed)
                .collect();
            assert_eq!(seeds.len(), 4, "{est} at t={t}");
        }
    }
    assert_eq!(result.over_units.len(), estimators.len() * 2 * 4);
    assert!(result.over_time.iter().chain(&result.over_units).all(|s| (-1.0..=1.0).contains(&s.cosine)));
    let scaling: Vec<VarianceRow> = read_csv(&out.join(kfrtrl_cli::commands::VARIANCE_CSV)).unwrap();
    assert_eq!(scaling, result.scaling);
    assert!(!scaling.is_empty());
}
