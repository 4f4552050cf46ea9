use crate::cells::{CellParams, StructuredJacobians};
use crate::error::Result;
use crate::linalg::{axpy, matmul_into, Matrix, RngHandle};

use super::{check_step_shapes, Estimator};

/// The dense influence matrix `G_t = d state_t / d theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct RtrlState {
    pub g: Matrix,
    scratch: Matrix,
    width: usize,
    block: usize,
}

impl RtrlState {
    pub fn new(state: usize, width: usize, block: usize) -> Self {
        RtrlState {
            g: Matrix::zeros(state, width * block),
            scratch: Matrix::zeros(state, width * block),
            width,
            block,
        }
    }

    pub fn for_cell(params: &CellParams) -> Self {
        RtrlState::new(params.state_size(), params.input_width(), params.maps() * params.n)
    }

    /// `G <- H G + kron(hhat, D)`.
    pub fn step(&mut self, jac: &StructuredJacobians, hhat: &[f64]) -> Result<()> {
        let s = self.g.rows();
        check_step_shapes(jac, hhat, s, self.width, self.block)?;
        matmul_into(&jac.h, &self.g, &mut self.scratch);
        std::mem::swap(&mut self.g, &mut self.scratch);
        let block = self.block;
        for row in 0..s {
            let d_row = jac.d.row(row);
            let g_row = self.g.row_mut(row);
            for (i, &hi) in hhat.iter().enumerate() {
                if hi != 0.0 {
                    axpy(hi, d_row, &mut g_row[i * block..(i + 1) * block]);
                }
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.g.fill_zero();
    }
}

/// Exact real-time recurrent learning.
#[derive(Debug, Clone)]
pub struct Rtrl {
    pub state: RtrlState,
}

impl Rtrl {
    pub fn new(params: &CellParams) -> Self {
        Rtrl { state: RtrlState::for_cell(params) }
    }
}

impl Estimator for Rtrl {
    fn name(&self) -> &'static str {
        "rtrl"
    }

    fn step(&mut self, jac: &StructuredJacobians, hhat: &[f64], _rng: &mut RngHandle) -> Result<()> {
        self.state.step(jac, hhat)
    }

    fn gradient(&mut self, dldh: &[f64]) -> Result<Option<Vec<f64>>> {
        self.state.g.left_mul(dldh).map(Some)
    }

    fn reset(&mut self) {
        self.state.reset();
    }

    fn influence(&self) -> Option<Matrix> {
        Some(self.state.g.clone())
    }
}
