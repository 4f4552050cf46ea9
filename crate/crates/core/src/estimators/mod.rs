//! Gradient estimators for the recurrent parameters.
//!
//! Every estimator consumes the per-step structured Jacobians and the
//! augmented input `hhat`, and turns `dL_t/d state_t` into a flat gradient
//! over the recurrent parameters (lexicographic order, see [`crate::cells`]).
//! The readout layer never goes through an estimator.

mod kf;
mod rtrl;
mod tbptt;
mod uoro;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use kf::{KfRtrl, KronState, SignMode};
pub use rtrl::{Rtrl, RtrlState};
pub use tbptt::{tbptt_grad, Tbptt, TbpttState};
pub use uoro::{uoro_avg_step, Uoro, UoroAvg, UoroState};

use crate::cells::{CellParams, StructuredJacobians};
use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, RngHandle};

/// Common surface of all estimators.
pub trait Estimator: Send {
    fn name(&self) -> &'static str;

    /// Folds one step's Jacobians into the estimator state.
    fn step(&mut self, jac: &StructuredJacobians, hhat: &[f64], rng: &mut RngHandle) -> Result<()>;

    /// Gradient of the current step's loss given `dL_t/d state_t`.
    ///
    /// Forward-mode estimators always answer. Windowed estimators may buffer
    /// the loss and answer only when their window closes.
    fn gradient(&mut self, dldh: &[f64]) -> Result<Option<Vec<f64>>>;

    /// Drains any buffered gradient, e.g. at the end of a sequence.
    fn flush(&mut self) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    /// Returns the estimator to its `t = 0` state.
    fn reset(&mut self);

    /// The current estimate of the influence matrix `d state_t / d theta`,
    /// if the estimator represents one.
    fn influence(&self) -> Option<Matrix>;
}

/// `dldh * kron(u, A)` without forming the Kronecker product.
pub fn materialize_kron_grad(u: &[f64], a: &Matrix, dldh: &[f64]) -> Result<Vec<f64>> {
    if dldh.len() != a.rows() {
        return invalid(format!(
            "loss gradient has length {}, factor has {} rows",
            dldh.len(),
            a.rows()
        ));
    }
    let block = a.left_mul(dldh)?;
    let w = block.len();
    let mut out = vec![0.0; u.len() * w];
    for (i, &ui) in u.iter().enumerate() {
        if ui != 0.0 {
            for (o, b) in out[i * w..(i + 1) * w].iter_mut().zip(&block) {
                *o = ui * b;
            }
        }
    }
    Ok(out)
}

/// `dldh * (s ⊗ theta)` for a rank-one influence estimate.
pub fn materialize_rank_one_grad(s: &[f64], theta: &[f64], dldh: &[f64]) -> Result<Vec<f64>> {
    if dldh.len() != s.len() {
        return invalid(format!(
            "loss gradient has length {}, state factor has {}",
            dldh.len(),
            s.len()
        ));
    }
    let alpha = crate::linalg::dot(dldh, s);
    Ok(theta.iter().map(|t| alpha * t).collect())
}

pub(crate) fn check_step_shapes(
    jac: &StructuredJacobians,
    hhat: &[f64],
    state: usize,
    width: usize,
    block: usize,
) -> Result<()> {
    if jac.h.shape() != (state, state) || jac.d.shape() != (state, block) || hhat.len() != width {
        return invalid(format!(
            "step shapes H {:?}, D {:?}, hhat {} do not match state {state}, hhat {width}, block {block}",
            jac.h.shape(),
            jac.d.shape(),
            hhat.len()
        ));
    }
    Ok(())
}

/// Estimator selection, as it appears in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimatorKind {
    Rtrl,
    KfRtrl,
    Uoro,
    UoroAvg { k: usize },
    Tbptt { horizon: usize },
}

impl EstimatorKind {
    pub fn label(&self) -> String {
        match self {
            EstimatorKind::Rtrl => "rtrl".into(),
            EstimatorKind::KfRtrl => "kf-rtrl".into(),
            EstimatorKind::Uoro => "uoro".into(),
            EstimatorKind::UoroAvg { k } => format!("uoro-avg-{k}"),
            EstimatorKind::Tbptt { horizon } => format!("tbptt-{horizon}"),
        }
    }

    pub fn build(&self, params: &CellParams) -> Result<Box<dyn Estimator>> {
        Ok(match *self {
            EstimatorKind::Rtrl => Box::new(Rtrl::new(params)),
            EstimatorKind::KfRtrl => Box::new(KfRtrl::new(params)),
            EstimatorKind::Uoro => Box::new(Uoro::new(params)),
            EstimatorKind::UoroAvg { k } => Box::new(UoroAvg::new(params, k)?),
            EstimatorKind::Tbptt { horizon } => Box::new(Tbptt::new(params, horizon)?),
        })
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    /// Parses `rtrl`, `kf-rtrl`, `uoro`, `uoro-avg-K` and `tbptt-H`.
    fn from_str(s: &str) -> Result<Self> {
        let parse_suffix = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad estimator '{s}'")))
        };
        match s {
            "rtrl" => Ok(EstimatorKind::Rtrl),
            "kf-rtrl" | "kf" => Ok(EstimatorKind::KfRtrl),
            "uoro" => Ok(EstimatorKind::Uoro),
            _ => {
                if let Some(rest) = s.strip_prefix("uoro-avg-") {
                    Ok(EstimatorKind::UoroAvg { k: parse_suffix(rest)? })
                } else if let Some(rest) = s.strip_prefix("tbptt-") {
                    Ok(EstimatorKind::Tbptt { horizon: parse_suffix(rest)? })
                } else {
                    invalid(format!("unknown estimator '{s}'"))
                }
            }
        }
    }
}
