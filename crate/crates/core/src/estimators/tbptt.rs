use std::collections::VecDeque;

use crate::cells::{CellParams, StructuredJacobians};
use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, Matrix, RngHandle};

use super::{check_step_shapes, Estimator};

#[derive(Debug, Clone)]
struct WindowStep {
    hhat: Vec<f64>,
    jac: StructuredJacobians,
    dldh: Option<Vec<f64>>,
}

/// Trailing window of recorded steps.
#[derive(Debug, Clone)]
pub struct TbpttState {
    pub horizon: usize,
    window: VecDeque<WindowStep>,
    state: usize,
    width: usize,
    block: usize,
}

impl TbpttState {
    pub fn new(horizon: usize, state: usize, width: usize, block: usize) -> Result<Self> {
        if horizon == 0 {
            return invalid("truncation horizon must be at least 1");
        }
        Ok(TbpttState { horizon, window: VecDeque::with_capacity(horizon), state, width, block })
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.window.len() >= self.horizon
    }

    /// Appends a step, evicting the oldest once the window holds `horizon` steps.
    pub fn push(&mut self, jac: &StructuredJacobians, hhat: &[f64]) -> Result<()> {
        check_step_shapes(jac, hhat, self.state, self.width, self.block)?;
        if self.window.len() == self.horizon {
            self.window.pop_front();
        }
        self.window.push_back(WindowStep { hhat: hhat.to_vec(), jac: jac.clone(), dldh: None });
        Ok(())
    }

    /// Attaches the newest step's loss gradient.
    pub fn record_loss(&mut self, dldh: &[f64]) -> Result<()> {
        if dldh.len() != self.state {
            return invalid("loss gradient length must equal the state size");
        }
        let last = self
            .window
            .back_mut()
            .ok_or_else(|| Error::InvalidState("no step recorded yet".into()))?;
        last.dldh = Some(dldh.to_vec());
        Ok(())
    }

    /// Exact gradient of the window's summed loss, with nothing flowing past
    /// the oldest recorded state.
    pub fn grad(&self) -> Result<Vec<f64>> {
        if self.window.is_empty() {
            return Err(Error::InvalidState("empty truncation window".into()));
        }
        let block = self.block;
        let mut grad = vec![0.0; self.width * block];
        let mut delta = vec![0.0; self.state];
        for (pos, step) in self.window.iter().enumerate().rev() {
            if let Some(dl) = &step.dldh {
                axpy(1.0, dl, &mut delta);
            }
            let through_d = step.jac.d.left_mul(&delta)?;
            for (i, &hi) in step.hhat.iter().enumerate() {
                if hi != 0.0 {
                    axpy(hi, &through_d, &mut grad[i * block..(i + 1) * block]);
                }
            }
            if pos > 0 {
                delta = step.jac.h.left_mul(&delta)?;
            }
        }
        Ok(grad)
    }

    pub fn clear(&mut self) {
        self.window.clear();
    }
}

/// Gradient of the summed loss over the stored window.
pub fn tbptt_grad(state: &TbpttState) -> Result<Vec<f64>> {
    state.grad()
}

/// Truncated backpropagation through time with non-overlapping windows.
///
/// Steps accumulate until `horizon` losses are recorded; the window's gradient
/// is then returned and the window cleared. [`Estimator::flush`] drains a
/// partially filled window.
#[derive(Debug, Clone)]
pub struct Tbptt {
    pub state: TbpttState,
}

impl Tbptt {
    pub fn new(params: &CellParams, horizon: usize) -> Result<Self> {
        Ok(Tbptt {
            state: TbpttState::new(
                horizon,
                params.state_size(),
                params.input_width(),
                params.maps() * params.n,
            )?,
        })
    }
}

impl Estimator for Tbptt {
    fn name(&self) -> &'static str {
        "tbptt"
    }

    fn step(&mut self, jac: &StructuredJacobians, hhat: &[f64], _rng: &mut RngHandle) -> Result<()> {
        self.state.push(jac, hhat)
    }

    fn gradient(&mut self, dldh: &[f64]) -> Result<Option<Vec<f64>>> {
        self.state.record_loss(dldh)?;
        if self.state.is_full() {
            let g = self.state.grad()?;
            self.state.clear();
            Ok(Some(g))
        } else {
            Ok(None)
        }
    }

    fn flush(&mut self) -> Result<Option<Vec<f64>>> {
        if self.state.is_empty() {
            return Ok(None);
        }
        let g = self.state.grad()?;
        self.state.clear();
        Ok(Some(g))
    }

    fn reset(&mut self) {
        self.state.clear();
    }

    fn influence(&self) -> Option<Matrix> {
        None
    }
}
