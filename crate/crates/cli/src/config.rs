//! Run configuration: a TOML file with one table per command.
//!
//! Every key has a default, so an empty file (or no file) is a valid config.

use std::path::{Path, PathBuf};

use kfrtrl::cells::{Arch, CellInit};
use kfrtrl::estimators::EstimatorKind;
use kfrtrl::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub adam: AdamSection,
    pub copy: CopySection,
    pub lm: LmSection,
    pub variance: VarianceSection,
    pub check: CheckSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            adam: AdamSection::default(),
            copy: CopySection::default(),
            lm: LmSection::default(),
            variance: VarianceSection::default(),
            check: CheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        AdamSection { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopySection {
    pub arch: Arch,
    pub n: usize,
    pub scale: f64,
    pub gate_bias: f64,
    pub estimator: String,
    pub learning_rate: f64,
    pub batch: usize,
    pub reset_prob: f64,
    /// Budget in batch iterations; one CSV row each.
    pub max_steps: usize,
    pub start_t: usize,
    pub threshold: f64,
    pub window: usize,
    /// Stop early once `T` reaches this length.
    pub target_t: Option<usize>,
}

impl Default for CopySection {
    fn default() -> Self {
        CopySection {
            arch: Arch::Rhn,
            n: 32,
            scale: 1.0,
            gate_bias: -2.0,
            estimator: "kf-rtrl".into(),
            learning_rate: 10f64.powf(-2.5),
            batch: 32,
            reset_prob: 0.0,
            max_steps: 20_000,
            start_t: 1,
            threshold: 0.15,
            window: 100,
            target_t: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub arch: Arch,
    pub n: usize,
    pub scale: f64,
    pub gate_bias: f64,
    pub estimator: String,
    pub learning_rate: f64,
    pub batch: usize,
    pub reset_prob: f64,
    pub max_steps: usize,
    /// Training text; the bundled sample when absent.
    pub corpus: Option<PathBuf>,
    /// Held-out text, evaluated every `eval_every` steps.
    pub validation: Option<PathBuf>,
    pub eval_every: usize,
    pub eval_steps: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            arch: Arch::Rhn,
            n: 64,
            scale: 1.0,
            gate_bias: -2.0,
            estimator: "kf-rtrl".into(),
            learning_rate: 1e-3,
            batch: 1,
            reset_prob: 0.01,
            max_steps: 50_000,
            corpus: None,
            validation: None,
            eval_every: 1000,
            eval_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceSection {
    pub arch: Arch,
    /// Estimators for both alignment runs. `uoro-avg-n` averages `n` samples.
    pub estimators: Vec<String>,
    pub repeats: usize,
    /// Text fed to the untrained cells; the bundled sample when absent.
    pub corpus: Option<PathBuf>,
    /// `"bptt"` or `"rtrl"`.
    pub reference: String,
    pub time_n: usize,
    pub time_steps: usize,
    pub time_start: usize,
    pub time_every: usize,
    pub units: Vec<usize>,
    pub unit_steps: usize,
    pub scaling_units: Vec<usize>,
    pub scaling_t: usize,
    pub scaling_samples: usize,
    /// Input width of the scaling probe; equal to `n` when absent.
    pub scaling_m: Option<usize>,
}

impl Default for VarianceSection {
    fn default() -> Self {
        VarianceSection {
            arch: Arch::Rhn,
            estimators: vec!["kf-rtrl".into(), "uoro".into(), "uoro-avg-n".into()],
            repeats: 100,
            corpus: None,
            reference: "bptt".into(),
            time_n: 32,
            time_steps: 2000,
            time_start: 100,
            time_every: 100,
            units: vec![8, 16, 32, 64],
            unit_steps: 100,
            scaling_units: vec![8, 16, 32, 64],
            scaling_t: 10,
            scaling_samples: 400,
            scaling_m: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    /// Multiplies every tolerance below. Zero makes every check fail.
    pub tolerance: f64,
    pub exact_configs: usize,
    pub exact_tol: f64,
    pub fd_configs: usize,
    pub fd_tol: f64,
    pub kron_trials: usize,
    pub kron_tol: f64,
    pub unbiased_samples: usize,
    pub z_limit: f64,
    pub min_fraction: f64,
    pub identity_draws: usize,
    pub scaling_samples: usize,
    pub slope_min: f64,
    pub slope_max: f64,
    pub claim_runs: usize,
    pub claim_steps: usize,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection {
            tolerance: 1.0,
            exact_configs: 20,
            exact_tol: 1e-8,
            fd_configs: 50,
            fd_tol: 1e-5,
            kron_trials: 10,
            kron_tol: 1e-12,
            unbiased_samples: 50_000,
            z_limit: 4.0,
            min_fraction: 0.99,
            identity_draws: 20_000,
            scaling_samples: 400,
            slope_min: -1.6,
            slope_max: -0.4,
            claim_runs: 10,
            claim_steps: 200,
        }
    }
}

impl Config {
    /// Reads `path`; errors name the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

/// Parses an estimator name; `uoro-avg-n` resolves to `k = n`.
pub fn estimator_for(name: &str, n: usize) -> Result<EstimatorKind, CliError> {
    if name == "uoro-avg-n" {
        return Ok(EstimatorKind::UoroAvg { k: n });
    }
    name.parse().map_err(|e| CliError::Usage(format!("{e}")))
}

fn train_config(
    adam: &AdamSection,
    estimator: EstimatorKind,
    lr: f64,
    batch: usize,
    reset_prob: f64,
    max_steps: usize,
    seed: u64,
) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::new(estimator, lr, max_steps);
    cfg.beta1 = adam.beta1;
    cfg.beta2 = adam.beta2;
    cfg.eps = adam.eps;
    cfg.batch = batch;
    cfg.reset_prob = reset_prob;
    cfg.seed = seed;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

impl CopySection {
    pub fn init(&self) -> CellInit {
        CellInit { scale: self.scale, gate_bias: self.gate_bias }
    }

    pub fn train_config(&self, adam: &AdamSection, seed: u64) -> Result<TrainConfig, CliError> {
        let est = estimator_for(&self.estimator, self.n)?;
        train_config(adam, est, self.learning_rate, self.batch, self.reset_prob, self.max_steps, seed)
    }
}

impl LmSection {
    pub fn init(&self) -> CellInit {
        CellInit { scale: self.scale, gate_bias: self.gate_bias }
    }

    pub fn train_config(&self, adam: &AdamSection, seed: u64) -> Result<TrainConfig, CliError> {
        let est = estimator_for(&self.estimator, self.n)?;
        train_config(adam, est, self.learning_rate, self.batch, self.reset_prob, self.max_steps, seed)
    }
}
