use crate::cells::{CellParams, StructuredJacobians};
use crate::error::Result;
use crate::linalg::{axpy, balance_weight, frob_norm, kron, matmul_into, norm, Matrix, RngHandle};

use super::{check_step_shapes, materialize_kron_grad, Estimator};

/// Factored influence estimate `G'_t = kron(u, A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronState {
    /// Length `n + m + 1`.
    pub u: Vec<f64>,
    /// Shape `s x (r n)`.
    pub a: Matrix,
    scratch: Matrix,
}

impl KronState {
    pub fn new(state: usize, width: usize, block: usize) -> Self {
        KronState {
            u: vec![0.0; width],
            a: Matrix::zeros(state, block),
            scratch: Matrix::zeros(state, block),
        }
    }

    pub fn for_cell(params: &CellParams) -> Self {
        KronState::new(params.state_size(), params.input_width(), params.maps() * params.n)
    }

    /// One update with independent random signs.
    pub fn step(&mut self, jac: &StructuredJacobians, hhat: &[f64], rng: &mut RngHandle) -> Result<()> {
        let c1 = rng.sign();
        let c2 = rng.sign();
        self.step_with_signs(jac, hhat, c1, c2)
    }

    /// One update with the given signs `c1` (history term) and `c2` (immediate term).
    ///
    /// `u <- c1 p1 u + c2 p2 hhat` and `A <- (c1/p1) H A + (c2/p2) D`, with
    /// `p1 = sqrt(|H A| / |u|)` and `p2 = sqrt(|D| / |hhat|)`.
    pub fn step_with_signs(
        &mut self,
        jac: &StructuredJacobians,
        hhat: &[f64],
        c1: f64,
        c2: f64,
    ) -> Result<()> {
        check_step_shapes(jac, hhat, self.a.rows(), self.u.len(), self.a.cols())?;
        matmul_into(&jac.h, &self.a, &mut self.scratch);
        let p1 = balance_weight(norm(&self.u), frob_norm(&self.scratch));
        let p2 = balance_weight(norm(hhat), frob_norm(&jac.d));

        self.u.iter_mut().for_each(|x| *x *= c1 * p1);
        axpy(c2 * p2, hhat, &mut self.u);

        self.scratch.scale(c1 / p1);
        self.scratch.add_scaled(c2 / p2, &jac.d)?;
        std::mem::swap(&mut self.a, &mut self.scratch);
        Ok(())
    }

    pub fn influence(&self) -> Matrix {
        kron(&self.u, &self.a).expect("kron state factors are non-empty")
    }

    pub fn reset(&mut self) {
        self.u.iter_mut().for_each(|x| *x = 0.0);
        self.a.fill_zero();
        self.scratch.fill_zero();
    }
}

/// How the two signs of a KF-RTRL step are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignMode {
    /// Independent Rademacher signs; the estimate is unbiased.
    #[default]
    Independent,
    /// `c1 = c2 = +1`. The cross terms are always added, so the estimate is
    /// biased. Only useful as a negative control for the statistical tests.
    ///
    /// Fixing just one sign is not enough: the remaining random sign (or the
    /// sign carried by the previous `u`) still cancels the cross terms.
    Fixed,
}

/// Kronecker-factored RTRL.
#[derive(Debug, Clone)]
pub struct KfRtrl {
    pub state: KronState,
    pub signs: SignMode,
}

impl KfRtrl {
    pub fn new(params: &CellParams) -> Self {
        KfRtrl { state: KronState::for_cell(params), signs: SignMode::Independent }
    }

    pub fn with_signs(params: &CellParams, signs: SignMode) -> Self {
        KfRtrl { state: KronState::for_cell(params), signs }
    }
}

impl Estimator for KfRtrl {
    fn name(&self) -> &'static str {
        match self.signs {
            SignMode::Independent => "kf-rtrl",
            SignMode::Fixed => "kf-rtrl-fixed",
        }
    }

    fn step(&mut self, jac: &StructuredJacobians, hhat: &[f64], rng: &mut RngHandle) -> Result<()> {
        let (c1, c2) = match self.signs {
            SignMode::Independent => (rng.sign(), rng.sign()),
            SignMode::Fixed => (1.0, 1.0),
        };
        self.state.step_with_signs(jac, hhat, c1, c2)
    }

    fn gradient(&mut self, dldh: &[f64]) -> Result<Option<Vec<f64>>> {
        materialize_kron_grad(&self.state.u, &self.state.a, dldh).map(Some)
    }

    fn reset(&mut self) {
        self.state.reset();
    }

    fn influence(&self) -> Option<Matrix> {
        Some(self.state.influence())
    }
}
