//! Subcommand bodies. Each writes its manifest first, then its tables.

use std::fs;
use std::path::Path;

use kfrtrl::analysis::{
    mean_cosines, run_alignment_over_time, run_alignment_over_units, variance_scaling_report, AlignmentConfig,
    AlignmentSample, Reference, VarianceRow,
};
use kfrtrl::cells::CellParams;
use kfrtrl::linalg::RngHandle;
use kfrtrl::tasks::{symbol, CopyCurriculum, CorpusStream, BUNDLED_TEXT};
use kfrtrl::training::{evaluate_bpc, train_copy, train_stream_with, ExperimentRecord};
use serde::{Deserialize, Serialize};

use crate::check::{format_table, run_checks};
use crate::config::{estimator_for, Config};
use crate::io::{io_err, write_checkpoint, write_csv, RunManifest};
use crate::CliError;

pub const CHECK_CSV: &str = "check.csv";
pub const COPY_CSV: &str = "copy.csv";
pub const LM_CSV: &str = "lm.csv";
pub const ALIGN_TIME_CSV: &str = "alignment_time.csv";
pub const ALIGN_UNITS_CSV: &str = "alignment_units.csv";
pub const VARIANCE_CSV: &str = "variance.csv";
pub const CHECKPOINT: &str = "checkpoint.txt";

// Stream keys for the rngs derived from the run seed.
const CELL_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const VALID_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

/// Runs the self-tests; `Ok(false)` when any fails.
pub fn cmd_check(cfg: &Config, out: &Path) -> Result<bool, CliError> {
    RunManifest::new("check", cfg, &[CHECK_CSV]).write(out)?;
    let results = run_checks(&cfg.check, cfg.seed)?;
    print!("{}", format_table(&results));
    let rows: Vec<CheckRow> = results
        .iter()
        .map(|r| CheckRow { check: r.name.into(), passed: r.passed, detail: r.detail.clone() })
        .collect();
    write_csv(&out.join(CHECK_CSV), &rows)?;
    RunManifest::finish(out)?;
    Ok(results.iter().all(|r| r.passed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopySummary {
    pub final_t: usize,
    pub max_solved: usize,
    pub rows: usize,
}

pub fn cmd_copy(cfg: &Config, out: &Path) -> Result<CopySummary, CliError> {
    let sec = &cfg.copy;
    let train = sec.train_config(&cfg.adam, cfg.seed)?;
    let mut curriculum = CopyCurriculum::new(sec.start_t, sec.threshold, sec.window)?;
    if let Some(t) = sec.target_t {
        curriculum = curriculum.with_target(t);
    }
    let mut cell = CellParams::init(
        sec.arch,
        sec.n,
        symbol::COUNT,
        symbol::COUNT,
        sec.init(),
        &mut RngHandle::new(cfg.seed).child(CELL_STREAM),
    )?;
    RunManifest::new("copy", cfg, &[COPY_CSV, CHECKPOINT]).write(out)?;
    let outcome = train_copy(&train, &mut cell, &mut curriculum)?;
    write_csv(&out.join(COPY_CSV), &outcome.records)?;
    write_checkpoint(&out.join(CHECKPOINT), &cell)?;
    RunManifest::finish(out)?;
    println!("{}: reached T={} (longest solved {})", train.estimator, outcome.final_t, outcome.max_solved);
    Ok(CopySummary { final_t: outcome.final_t, max_solved: outcome.max_solved, rows: outcome.records.len() })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

/// Trains on `corpus` (or the configured/bundled text). Returns the rows written.
pub fn cmd_lm(cfg: &Config, corpus: Option<&Path>, out: &Path) -> Result<Vec<ExperimentRecord>, CliError> {
    let sec = &cfg.lm;
    let train = sec.train_config(&cfg.adam, cfg.seed)?;
    let text = match corpus.or(sec.corpus.as_deref()) {
        Some(p) => read_text(p)?,
        None => BUNDLED_TEXT.to_string(),
    };
    let validation = sec.validation.as_deref().map(read_text).transpose()?;
    let root = RngHandle::new(cfg.seed);
    let mut stream = CorpusStream::new(&text, sec.batch, &mut root.child(DATA_STREAM))?;
    let vocab = stream.vocab.clone();
    let held_out = match &validation {
        Some(v) => Some(CorpusStream::with_vocab(v, vocab.clone(), 1, &mut root.child(VALID_STREAM))?.from_start()),
        None => None,
    };
    let mut cell = CellParams::init(sec.arch, sec.n, vocab.len(), vocab.len(), sec.init(), &mut root.child(CELL_STREAM))?;

    RunManifest::new("lm", cfg, &[LM_CSV, CHECKPOINT]).write(out)?;
    let label = train.estimator.label();
    let (every, eval_steps, seed) = (sec.eval_every, sec.eval_steps, cfg.seed);
    let records = train_stream_with(&train, &mut cell, &mut stream, |step, params| {
        let Some(held) = &held_out else { return Ok(Vec::new()) };
        if every == 0 || (step + 1) % every as u64 != 0 {
            return Ok(Vec::new());
        }
        let value = evaluate_bpc(params, &mut held.clone(), eval_steps)?;
        Ok(vec![ExperimentRecord { step, estimator: label.clone(), metric: "valid_bpc".into(), value, seed }])
    })?;
    write_csv(&out.join(LM_CSV), &records)?;
    write_checkpoint(&out.join(CHECKPOINT), &cell)?;
    RunManifest::finish(out)?;

    let train_bpc: Vec<f64> = records.iter().filter(|r| r.metric == "bpc").map(|r| r.value).collect();
    let window = (train_bpc.len() / 10).clamp(1, 1000);
    if train_bpc.len() >= window {
        let head: f64 = train_bpc[..window].iter().sum::<f64>() / window as f64;
        let tail: f64 = train_bpc[train_bpc.len() - window..].iter().sum::<f64>() / window as f64;
        println!("{label}: training bpc {head:.3} -> {tail:.3} (means of first/last {window} steps)");
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceOutput {
    pub over_time: Vec<AlignmentSample>,
    pub over_units: Vec<AlignmentSample>,
    pub scaling: Vec<VarianceRow>,
}

pub fn cmd_variance(cfg: &Config, out: &Path) -> Result<VarianceOutput, CliError> {
    let sec = &cfg.variance;
    let reference = match sec.reference.as_str() {
        "bptt" => Reference::Bptt,
        "rtrl" => Reference::Rtrl,
        other => return Err(CliError::Usage(format!("unknown reference '{other}' (bptt or rtrl)"))),
    };
    let text = match &sec.corpus {
        Some(p) => read_text(p)?,
        None => BUNDLED_TEXT.to_string(),
    };
    let over_time_kinds = sec.estimators.iter().map(|e| estimator_for(e, sec.time_n)).collect::<Result<Vec<_>, _>>()?;
    // k = 0 is resolved to k = n per size by the units sweep.
    let unit_kinds = sec.estimators.iter().map(|e| estimator_for(e, 0)).collect::<Result<Vec<_>, _>>()?;

    RunManifest::new("variance", cfg, &[ALIGN_TIME_CSV, ALIGN_UNITS_CSV, VARIANCE_CSV]).write(out)?;
    let mut time_cfg = AlignmentConfig::every(
        sec.arch,
        sec.time_n,
        sec.time_steps,
        sec.time_start,
        sec.time_every,
        sec.repeats,
        cfg.seed,
    );
    time_cfg.reference = reference;
    let over_time = run_alignment_over_time(&time_cfg, &text, &over_time_kinds)?;
    write_csv(&out.join(ALIGN_TIME_CSV), &over_time)?;

    let over_units = if sec.units.is_empty() {
        Vec::new()
    } else {
        run_alignment_over_units(sec.arch, &sec.units, sec.unit_steps, sec.repeats, &unit_kinds, &text, cfg.seed)?
    };
    write_csv(&out.join(ALIGN_UNITS_CSV), &over_units)?;

    let scaling = if sec.scaling_units.len() >= 2 {
        let rep = variance_scaling_report(
            sec.arch,
            &sec.scaling_units,
            sec.scaling_m,
            sec.scaling_t,
            sec.scaling_samples,
            cfg.seed,
        )?;
        println!("kf-rtrl variance slope {:.3}, uoro/kf ratio slope {:.3}", rep.kf_slope.slope, rep.ratio_slope.slope);
        rep.rows
    } else {
        Vec::new()
    };
    write_csv(&out.join(VARIANCE_CSV), &scaling)?;
    RunManifest::finish(out)?;

    if let Some(&largest) = sec.units.iter().max() {
        for (n, est, _, mean, se) in mean_cosines(&over_units).into_iter().filter(|r| r.0 == largest) {
            println!("n={n} {est}: mean cosine {mean:.4} (se {se:.4})");
        }
    }
    Ok(VarianceOutput { over_time, over_units, scaling })
}

/// Refuses to reuse a directory that already holds a run.
pub fn ensure_fresh(out: &Path) -> Result<(), CliError> {
    let manifest = out.join(crate::io::MANIFEST_FILE);
    if manifest.exists() {
        return Err(CliError::Usage(format!("{} already holds a run", out.display())));
    }
    if out.exists() && !out.is_dir() {
        return Err(io_err(out, std::io::Error::other("not a directory")));
    }
    Ok(())
}
