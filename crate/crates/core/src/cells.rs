//! Recurrent cells whose immediate parameter Jacobian factors exactly as a
//! Kronecker product.
//!
//! Every cell here computes `r` pre-activations `z^k = hhat * W^k` from the
//! augmented input `hhat = (h_{t-1} | x_t | 1)` and then applies a pointwise
//! map per unit. Consequently each recurrent weight `W^k[i][j]` touches only
//! unit `j`, and
//!
//! ```text
//! d state_t / d theta = kron(hhat, D),   D = (D^1 | ... | D^r)
//! ```
//!
//! with each `D^k` diagonal. Parameters are flattened lexicographically in
//! (input row `i`, map `k`, unit `j`), which is exactly the row-major layout of
//! the horizontally concatenated weight matrix `(W^1 | ... | W^r)`.
//!
//! All cells use `g(x) = 2 sigmoid(x) - 1` where a tanh would normally appear.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, RngHandle};

/// Supported cell architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    TanhRnn,
    /// Single-layer recurrent highway cell: candidate plus forget gate.
    Rhn,
    /// LSTM with state `(c | h)`.
    Lstm,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::TanhRnn, Arch::Rhn, Arch::Lstm];

    /// Number of linear maps `r`.
    pub fn maps(self) -> usize {
        match self {
            Arch::TanhRnn => 1,
            Arch::Rhn => 2,
            Arch::Lstm => 4,
        }
    }

    /// Size of the recurrent state for `n` units.
    pub fn state_size(self, n: usize) -> usize {
        match self {
            Arch::Lstm => 2 * n,
            _ => n,
        }
    }

    /// Offset of the hidden vector `h` inside the state.
    pub fn hidden_offset(self, n: usize) -> usize {
        match self {
            Arch::Lstm => n,
            _ => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::TanhRnn => "tanh-rnn",
            Arch::Rhn => "rhn",
            Arch::Lstm => "lstm",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh-rnn" | "tanh" | "rnn" => Ok(Arch::TanhRnn),
            "rhn" => Ok(Arch::Rhn),
            "lstm" => Ok(Arch::Lstm),
            other => invalid(format!("unknown architecture '{other}'")),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `2 sigmoid(x) - 1`, the squashing nonlinearity.
#[inline]
pub fn squash(x: f64) -> f64 {
    2.0 * sigmoid(x) - 1.0
}

#[inline]
pub fn squash_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    2.0 * s * (1.0 - s)
}

/// Initialization settings for [`CellParams::init`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellInit {
    pub scale: f64,
    /// Initial bias of the RHN gate pre-activation. Ignored by other cells.
    pub gate_bias: f64,
}

impl Default for CellInit {
    fn default() -> Self {
        CellInit { scale: 1.0, gate_bias: -2.0 }
    }
}

/// Learnable parameters of one cell plus its linear readout.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub arch: Arch,
    /// Hidden units.
    pub n: usize,
    /// Input width.
    pub m: usize,
    /// Output vocabulary size.
    pub vocab: usize,
    /// `(W^1 | ... | W^r)`, shape `(n+m+1) x (r*n)`; the last row is the bias.
    pub w: Matrix,
    /// Readout, shape `n x vocab`.
    pub w_out: Matrix,
}

impl CellParams {
    /// Zero-initialized parameters.
    pub fn zeros(arch: Arch, n: usize, m: usize, vocab: usize) -> Result<Self> {
        if n == 0 || m == 0 || vocab == 0 {
            return invalid("cell sizes must be at least 1");
        }
        Ok(CellParams {
            arch,
            n,
            m,
            vocab,
            w: Matrix::zeros(n + m + 1, arch.maps() * n),
            w_out: Matrix::zeros(n, vocab),
        })
    }

    pub fn init(
        arch: Arch,
        n: usize,
        m: usize,
        vocab: usize,
        init: CellInit,
        rng: &mut RngHandle,
    ) -> Result<Self> {
        if !(init.scale > 0.0) {
            return invalid("initialization scale must be positive");
        }
        let mut p = CellParams::zeros(arch, n, m, vocab)?;
        let rows = n + m + 1;
        let bound = init.scale / (rows as f64).sqrt();
        let cols = p.w.cols();
        for i in 0..rows - 1 {
            for c in 0..cols {
                p.w.set(i, c, rng.uniform(-bound, bound));
            }
        }
        if arch == Arch::Rhn {
            for j in 0..n {
                p.w.set(rows - 1, n + j, init.gate_bias);
            }
        }
        let out_bound = init.scale / (n as f64).sqrt();
        for x in p.w_out.data_mut() {
            *x = rng.uniform(-out_bound, out_bound);
        }
        Ok(p)
    }

    #[inline]
    pub fn maps(&self) -> usize {
        self.arch.maps()
    }

    #[inline]
    pub fn state_size(&self) -> usize {
        self.arch.state_size(self.n)
    }

    /// Length of `hhat`, `n + m + 1`.
    #[inline]
    pub fn input_width(&self) -> usize {
        self.n + self.m + 1
    }

    /// Number of recurrent parameters `P = (n+m+1) r n`.
    #[inline]
    pub fn recurrent_len(&self) -> usize {
        self.w.data().len()
    }

    #[inline]
    pub fn readout_len(&self) -> usize {
        self.w_out.data().len()
    }

    /// Map `k` as an `(n+m+1) x n` matrix.
    pub fn weight(&self, k: usize) -> Matrix {
        let n = self.n;
        let mut out = Matrix::zeros(self.input_width(), n);
        for i in 0..self.input_width() {
            out.row_mut(i).copy_from_slice(&self.w.row(i)[k * n..(k + 1) * n]);
        }
        out
    }

    /// The hidden vector `h` inside a state.
    pub fn hidden<'a>(&self, state: &'a [f64]) -> &'a [f64] {
        let off = self.arch.hidden_offset(self.n);
        &state[off..off + self.n]
    }

    pub fn zero_state(&self) -> Vec<f64> {
        vec![0.0; self.state_size()]
    }

    /// All parameters, recurrent first, in flattening order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.w.data().to_vec();
        v.extend_from_slice(self.w_out.data());
        v
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        let p = self.recurrent_len();
        if theta.len() != p + self.readout_len() {
            return invalid("flat parameter vector has the wrong length");
        }
        self.w.data_mut().copy_from_slice(&theta[..p]);
        self.w_out.data_mut().copy_from_slice(&theta[p..]);
        Ok(())
    }
}

/// Convenience wrapper with the argument order used throughout the docs.
pub fn init_params(
    arch: Arch,
    n: usize,
    m: usize,
    vocab: usize,
    scale: f64,
    rng: &mut RngHandle,
) -> Result<CellParams> {
    CellParams::init(arch, n, m, vocab, CellInit { scale, ..CellInit::default() }, rng)
}

/// Forward record of a single step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// `(h_{t-1} | x_t | 1)`.
    pub hhat: Vec<f64>,
    /// Pre-activations `z^1 .. z^r`, concatenated.
    pub z: Vec<f64>,
    pub state_prev: Vec<f64>,
    pub state_next: Vec<f64>,
    n: usize,
    arch: Arch,
}

impl StepTrace {
    pub fn z(&self, k: usize) -> &[f64] {
        &self.z[k * self.n..(k + 1) * self.n]
    }

    pub fn h_next(&self) -> &[f64] {
        let off = self.arch.hidden_offset(self.n);
        &self.state_next[off..off + self.n]
    }

    /// LSTM cell state before the step.
    pub fn carry_prev(&self) -> Option<&[f64]> {
        (self.arch == Arch::Lstm).then(|| &self.state_prev[..self.n])
    }

    /// LSTM cell state after the step.
    pub fn carry_next(&self) -> Option<&[f64]> {
        (self.arch == Arch::Lstm).then(|| &self.state_next[..self.n])
    }
}

/// Exact Jacobians of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredJacobians {
    /// `H[j][i] = d state_t[j] / d state_{t-1}[i]`, `s x s`.
    pub h: Matrix,
    /// `(D^1 | ... | D^r)`, `s x (r n)`, nonzero only where column mod n == row mod n.
    pub d: Matrix,
}

/// Advances the cell by one step.
pub fn forward(params: &CellParams, state_prev: &[f64], x: &[f64]) -> Result<StepTrace> {
    let n = params.n;
    if state_prev.len() != params.state_size() {
        return invalid(format!(
            "state has length {}, expected {}",
            state_prev.len(),
            params.state_size()
        ));
    }
    if x.len() != params.m {
        return invalid(format!("input has length {}, expected {}", x.len(), params.m));
    }
    let mut hhat = Vec::with_capacity(params.input_width());
    hhat.extend_from_slice(params.hidden(state_prev));
    hhat.extend_from_slice(x);
    hhat.push(1.0);

    let z = params.w.left_mul(&hhat)?;
    let mut state_next = vec![0.0; params.state_size()];
    match params.arch {
        Arch::TanhRnn => {
            for j in 0..n {
                state_next[j] = squash(z[j]);
            }
        }
        Arch::Rhn => {
            for j in 0..n {
                let gate = sigmoid(z[n + j]);
                state_next[j] = squash(z[j]) * gate + state_prev[j] * (1.0 - gate);
            }
        }
        Arch::Lstm => {
            for j in 0..n {
                let (f, i, o, g) = (z[j], z[n + j], z[2 * n + j], z[3 * n + j]);
                let c = sigmoid(f) * state_prev[j] + sigmoid(i) * squash(g);
                state_next[j] = c;
                state_next[n + j] = sigmoid(o) * squash(c);
            }
        }
    }
    Ok(StepTrace { hhat, z, state_prev: state_prev.to_vec(), state_next, n, arch: params.arch })
}

/// Closed-form `H` and `D` for a recorded step.
pub fn jacobians(params: &CellParams, trace: &StepTrace) -> StructuredJacobians {
    let n = params.n;
    let r = params.maps();
    let s = params.state_size();
    let z = &trace.z;
    let prev = &trace.state_prev;
    let mut d = Matrix::zeros(s, r * n);
    let mut h = Matrix::zeros(s, s);

    match params.arch {
        Arch::TanhRnn => {
            for j in 0..n {
                d.set(j, j, squash_deriv(z[j]));
            }
        }
        Arch::Rhn => {
            for j in 0..n {
                let gate = sigmoid(z[n + j]);
                d.set(j, j, squash_deriv(z[j]) * gate);
                d.set(j, n + j, gate * (1.0 - gate) * (squash(z[j]) - prev[j]));
                h.set(j, j, 1.0 - gate);
            }
        }
        Arch::Lstm => {
            for j in 0..n {
                let (f, i, o, g) = (z[j], z[n + j], z[2 * n + j], z[3 * n + j]);
                let (sf, si, so) = (sigmoid(f), sigmoid(i), sigmoid(o));
                let c = trace.state_next[j];
                let dc = [sf * (1.0 - sf) * prev[j], si * (1.0 - si) * squash(g), 0.0, si * squash_deriv(g)];
                let dh_dc = so * squash_deriv(c);
                for (k, &v) in dc.iter().enumerate() {
                    d.set(j, k * n + j, v);
                    d.set(n + j, k * n + j, dh_dc * v);
                }
                d.set(n + j, 2 * n + j, so * (1.0 - so) * squash(c));
                // direct dependence on c_{t-1}
                h.set(j, j, sf);
                h.set(n + j, j, dh_dc * sf);
            }
        }
    }

    // chain through z^k: only the h_{t-1} rows of W feed back into the state
    let off = params.arch.hidden_offset(n);
    for row in 0..s {
        let unit = row % n;
        for i in 0..n {
            let w_row = params.w.row(i);
            let mut acc = 0.0;
            for k in 0..r {
                acc += d.get(row, k * n + unit) * w_row[k * n + unit];
            }
            h.add_at(row, off + i, acc);
        }
    }
    StructuredJacobians { h, d }
}

/// The two Kronecker factors of the immediate Jacobian `F_t = kron(hhat, D)`.
pub fn immediate_factor(trace: &StepTrace, jac: &StructuredJacobians) -> (Vec<f64>, Matrix) {
    (trace.hhat.clone(), jac.d.clone())
}

/// Readout logits `h * W_out`.
pub fn output_logits(params: &CellParams, h: &[f64]) -> Result<Vec<f64>> {
    params.w_out.left_mul(h)
}

/// One-hot encoding of `symbol` over `width` classes.
pub fn one_hot(symbol: usize, width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    v[symbol] = 1.0;
    v
}
