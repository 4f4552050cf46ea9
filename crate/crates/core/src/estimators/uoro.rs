use crate::cells::{CellParams, StructuredJacobians};
use crate::error::{invalid, Result};
use crate::linalg::{axpy, balance_weight, norm, rademacher, Matrix, RngHandle};

use super::{check_step_shapes, materialize_rank_one_grad, Estimator};

/// Rank-one influence estimate `G'_t = s_tilde theta_tilde^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct UoroState {
    /// Length `s`.
    pub s_tilde: Vec<f64>,
    /// Length `P`.
    pub theta_tilde: Vec<f64>,
    width: usize,
    block: usize,
}

impl UoroState {
    pub fn new(state: usize, width: usize, block: usize) -> Self {
        UoroState {
            s_tilde: vec![0.0; state],
            theta_tilde: vec![0.0; width * block],
            width,
            block,
        }
    }

    pub fn for_cell(params: &CellParams) -> Self {
        UoroState::new(params.state_size(), params.input_width(), params.maps() * params.n)
    }

    pub fn step(&mut self, jac: &StructuredJacobians, hhat: &[f64], rng: &mut RngHandle) -> Result<()> {
        let nu = rademacher(rng, self.s_tilde.len());
        self.step_with_probe(jac, hhat, &nu)
    }

    /// One update with an explicit probing vector `nu`.
    ///
    /// `s <- rho0 H s + rho1 nu`, `theta <- theta / rho0 + (nu^T F) / rho1`, where
    /// `nu^T F = kron(hhat, nu^T D)` is formed without materializing `F`.
    pub fn step_with_probe(&mut self, jac: &StructuredJacobians, hhat: &[f64], nu: &[f64]) -> Result<()> {
        let s = self.s_tilde.len();
        check_step_shapes(jac, hhat, s, self.width, self.block)?;
        if nu.len() != s {
            return invalid("probe vector length must equal the state size");
        }
        let hs = jac.h.mul_vec(&self.s_tilde)?;
        let nu_d = jac.d.left_mul(nu)?;
        let nu_f_norm = norm(hhat) * norm(&nu_d);

        let rho0 = balance_weight(norm(&hs), norm(&self.theta_tilde));
        let rho1 = balance_weight(norm(nu), nu_f_norm);

        for (st, h) in self.s_tilde.iter_mut().zip(&hs) {
            *st = rho0 * h;
        }
        axpy(rho1, nu, &mut self.s_tilde);

        let inv0 = 1.0 / rho0;
        let inv1 = 1.0 / rho1;
        let block = self.block;
        for (i, &hi) in hhat.iter().enumerate() {
            let seg = &mut self.theta_tilde[i * block..(i + 1) * block];
            for (t, nd) in seg.iter_mut().zip(&nu_d) {
                *t = *t * inv0 + inv1 * hi * nd;
            }
        }
        Ok(())
    }

    pub fn influence(&self) -> Matrix {
        let s = self.s_tilde.len();
        let p = self.theta_tilde.len();
        let mut g = Matrix::zeros(s, p);
        for (j, &sj) in self.s_tilde.iter().enumerate() {
            for (o, t) in g.row_mut(j).iter_mut().zip(&self.theta_tilde) {
                *o = sj * t;
            }
        }
        g
    }

    pub fn gradient(&self, dldh: &[f64]) -> Result<Vec<f64>> {
        materialize_rank_one_grad(&self.s_tilde, &self.theta_tilde, dldh)
    }

    pub fn reset(&mut self) {
        self.s_tilde.iter_mut().for_each(|x| *x = 0.0);
        self.theta_tilde.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Unbiased online recurrent optimization with a Rademacher probe.
#[derive(Debug, Clone)]
pub struct Uoro {
    pub state: UoroState,
}

impl Uoro {
    pub fn new(params: &CellParams) -> Self {
        Uoro { state: UoroState::for_cell(params) }
    }
}

impl Estimator for Uoro {
    fn name(&self) -> &'static str {
        "uoro"
    }

    fn step(&mut self, jac: &StructuredJacobians, hhat: &[f64], rng: &mut RngHandle) -> Result<()> {
        self.state.step(jac, hhat, rng)
    }

    fn gradient(&mut self, dldh: &[f64]) -> Result<Option<Vec<f64>>> {
        self.state.gradient(dldh).map(Some)
    }

    fn reset(&mut self) {
        self.state.reset();
    }

    fn influence(&self) -> Option<Matrix> {
        Some(self.state.influence())
    }
}

/// Average of `k` independent UORO estimates.
#[derive(Debug, Clone)]
pub struct UoroAvg {
    pub states: Vec<UoroState>,
}

impl UoroAvg {
    pub fn new(params: &CellParams, k: usize) -> Result<Self> {
        if k == 0 {
            return invalid("UORO averaging needs at least one sample");
        }
        Ok(UoroAvg { states: vec![UoroState::for_cell(params); k] })
    }
}

/// Advances every state with fresh, independent randomness.
pub fn uoro_avg_step(
    states: &mut [UoroState],
    jac: &StructuredJacobians,
    hhat: &[f64],
    rng: &mut RngHandle,
) -> Result<()> {
    for st in states.iter_mut() {
        st.step(jac, hhat, rng)?;
    }
    Ok(())
}

impl Estimator for UoroAvg {
    fn name(&self) -> &'static str {
        "uoro-avg"
    }

    fn step(&mut self, jac: &StructuredJacobians, hhat: &[f64], rng: &mut RngHandle) -> Result<()> {
        uoro_avg_step(&mut self.states, jac, hhat, rng)
    }

    fn gradient(&mut self, dldh: &[f64]) -> Result<Option<Vec<f64>>> {
        let k = self.states.len() as f64;
        let mut out = vec![0.0; self.states[0].theta_tilde.len()];
        if dldh.len() != self.states[0].s_tilde.len() {
            return invalid("loss gradient length must equal the state size");
        }
        for st in &self.states {
            let alpha = crate::linalg::dot(dldh, &st.s_tilde);
            axpy(alpha / k, &st.theta_tilde, &mut out);
        }
        Ok(Some(out))
    }

    fn reset(&mut self) {
        self.states.iter_mut().for_each(UoroState::reset);
    }

    fn influence(&self) -> Option<Matrix> {
        let k = self.states.len() as f64;
        let mut g = self.states[0].influence();
        for st in &self.states[1..] {
            g.add_scaled(1.0, &st.influence()).ok()?;
        }
        g.scale(1.0 / k);
        Some(g)
    }
}
