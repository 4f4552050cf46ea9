//! Run artifacts: manifest, CSV tables and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use kfrtrl::cells::{Arch, CellParams};
use kfrtrl::linalg::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "kfrtrl-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEnd {
    pub finished_at: String,
}

/// What ran, with which settings, and where its output went.
///
/// Written before any data; `end` is appended once the run completes, so a
/// manifest without it marks a truncated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub outputs: Vec<String>,
    pub config: Config,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<RunEnd>,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, outputs: &[&str]) -> Self {
        RunManifest {
            command: command.into(),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_at: chrono::Utc::now().to_rfc3339(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            config: config.clone(),
            end: None,
        }
    }

    /// Creates `dir` if needed and writes the manifest. Fails if one exists.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| CliError::Run(e.to_string()))?;
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| io_err(&path, e))
    }

    /// Appends the completion stamp.
    pub fn finish(dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).map_err(|e| io_err(&path, e))?;
        let end = format!("\n[end]\nfinished_at = \"{}\"\n", chrono::Utc::now().to_rfc3339());
        f.write_all(end.as_bytes()).map_err(|e| io_err(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

/// Writes `rows` with a header taken from the record's field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

/// Text checkpoint: a version line, the cell shape, then named matrices
/// with explicit shapes, one row per line.
pub fn checkpoint_string(params: &CellParams) -> String {
    let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
    s += &format!("arch {}\nn {}\nm {}\nvocab {}\n", params.arch, params.n, params.m, params.vocab);
    for (name, mat) in [("w", &params.w), ("w_out", &params.w_out)] {
        s += &format!("matrix {name} {} {}\n", mat.rows(), mat.cols());
        for i in 0..mat.rows() {
            let row: Vec<String> = mat.row(i).iter().map(|x| format!("{x:?}")).collect();
            s += &row.join(" ");
            s.push('\n');
        }
    }
    s
}

pub fn write_checkpoint(path: &Path, params: &CellParams) -> Result<(), CliError> {
    fs::write(path, checkpoint_string(params)).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CellParams, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_checkpoint(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

pub fn parse_checkpoint(text: &str) -> Result<CellParams, String> {
    let mut lines = text.lines();
    let mut next = |what: &str| lines.next().ok_or_else(|| format!("missing {what}"));
    let header = next("header")?;
    match header.split_once(' ') {
        Some((CHECKPOINT_MAGIC, v)) if v.trim() == CHECKPOINT_VERSION.to_string() => {}
        Some((CHECKPOINT_MAGIC, v)) => return Err(format!("unsupported checkpoint version {v}")),
        _ => return Err("not a checkpoint".into()),
    }
    let field = |line: &str, key: &str| -> Result<String, String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| format!("expected '{key}', got '{line}'"))
    };
    let count = |s: String| s.trim().parse::<usize>().map_err(|e| format!("bad size '{s}': {e}"));
    let arch: Arch = field(next("arch")?, "arch")?.parse().map_err(|e| format!("{e}"))?;
    let n = count(field(next("n")?, "n")?)?;
    let m = count(field(next("m")?, "m")?)?;
    let vocab = count(field(next("vocab")?, "vocab")?)?;

    let mut read_matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix, String> {
        let head = field(next("matrix")?, "matrix")?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != name {
            return Err(format!("expected matrix '{name}', got '{head}'"));
        }
        let (r, c) = (count(parts[1].into())?, count(parts[2].into())?);
        if (r, c) != (rows, cols) {
            return Err(format!("matrix {name} is {r}x{c}, cell needs {rows}x{cols}"));
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = next("matrix row")?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| format!("{name} row {i}: '{v}': {e}")))
                .collect::<Result<_, _>>()?;
            if vals.len() != c {
                return Err(format!("{name} row {i} has {} values, expected {c}", vals.len()));
            }
            data.extend(vals);
        }
        Matrix::from_vec(r, c, data).map_err(|e| e.to_string())
    };
    let w = read_matrix("w", n + m + 1, arch.maps() * n)?;
    let w_out = read_matrix("w_out", n, vocab)?;
    Ok(CellParams { arch, n, m, vocab, w, w_out })
}
