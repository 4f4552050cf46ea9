//! Test-side oracles written without the library's Jacobian code.
#![allow(dead_code)]

use kfrtrl::cells::{Arch, CellParams};
use kfrtrl::linalg::RngHandle;

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn g(x: f64) -> f64 {
    2.0 * sig(x) - 1.0
}

pub fn dg(x: f64) -> f64 {
    2.0 * sig(x) * (1.0 - sig(x))
}

pub fn dsig(x: f64) -> f64 {
    sig(x) * (1.0 - sig(x))
}

/// Plain nested-vector copy of the recurrent weights: `w[i][col]`.
pub struct RefCell {
    pub arch: Arch,
    pub n: usize,
    pub m: usize,
    pub w: Vec<Vec<f64>>,
}

pub struct RefStep {
    pub hhat: Vec<f64>,
    pub z: Vec<f64>,
    pub prev: Vec<f64>,
    pub next: Vec<f64>,
}

impl RefCell {
    pub fn from_params(p: &CellParams) -> Self {
        let w = (0..p.w.rows()).map(|i| p.w.row(i).to_vec()).collect();
        RefCell { arch: p.arch, n: p.n, m: p.m, w }
    }

    pub fn r(&self) -> usize {
        match self.arch {
            Arch::TanhRnn => 1,
            Arch::Rhn => 2,
            Arch::Lstm => 4,
        }
    }

    pub fn state_size(&self) -> usize {
        if self.arch == Arch::Lstm {
            2 * self.n
        } else {
            self.n
        }
    }

    fn hidden<'a>(&self, state: &'a [f64]) -> &'a [f64] {
        if self.arch == Arch::Lstm {
            &state[self.n..]
        } else {
            state
        }
    }

    pub fn step(&self, prev: &[f64], x: &[f64]) -> RefStep {
        let n = self.n;
        let mut hhat: Vec<f64> = self.hidden(prev).to_vec();
        hhat.extend_from_slice(x);
        hhat.push(1.0);
        let cols = self.r() * n;
        let mut z = vec![0.0; cols];
        for (i, hi) in hhat.iter().enumerate() {
            for c in 0..cols {
                z[c] += hi * self.w[i][c];
            }
        }
        let mut next = vec![0.0; self.state_size()];
        for j in 0..n {
            match self.arch {
                Arch::TanhRnn => next[j] = g(z[j]),
                Arch::Rhn => {
                    let s = sig(z[n + j]);
                    next[j] = g(z[j]) * s + prev[j] * (1.0 - s);
                }
                Arch::Lstm => {
                    let c = sig(z[j]) * prev[j] + sig(z[n + j]) * g(z[3 * n + j]);
                    next[j] = c;
                    next[n + j] = sig(z[2 * n + j]) * g(c);
                }
            }
        }
        RefStep { hhat, z, prev: prev.to_vec(), next }
    }

    /// Backward through one step: given `dL/d next`, accumulates `dL/dW` and
    /// returns `dL/d prev`.
    pub fn backward(&self, st: &RefStep, dnext: &[f64], dw: &mut [Vec<f64>]) -> Vec<f64> {
        let n = self.n;
        let z = &st.z;
        let mut dz = vec![0.0; self.r() * n];
        let mut dprev = vec![0.0; self.state_size()];
        for j in 0..n {
            match self.arch {
                Arch::TanhRnn => dz[j] = dnext[j] * dg(z[j]),
                Arch::Rhn => {
                    let s = sig(z[n + j]);
                    dz[j] = dnext[j] * dg(z[j]) * s;
                    dz[n + j] = dnext[j] * (g(z[j]) - st.prev[j]) * dsig(z[n + j]);
                    dprev[j] += dnext[j] * (1.0 - s);
                }
                Arch::Lstm => {
                    let c = st.next[j];
                    let dh = dnext[n + j];
                    let dc = dnext[j] + dh * sig(z[2 * n + j]) * dg(c);
                    dz[2 * n + j] = dh * g(c) * dsig(z[2 * n + j]);
                    dz[j] = dc * st.prev[j] * dsig(z[j]);
                    dz[n + j] = dc * g(z[3 * n + j]) * dsig(z[n + j]);
                    dz[3 * n + j] = dc * sig(z[n + j]) * dg(z[3 * n + j]);
                    dprev[j] += dc * sig(z[j]);
                }
            }
        }
        let off = if self.arch == Arch::Lstm { n } else { 0 };
        for (i, hi) in st.hhat.iter().enumerate() {
            let mut back = 0.0;
            for (c, dzc) in dz.iter().enumerate() {
                dw[i][c] += hi * dzc;
                back += self.w[i][c] * dzc;
            }
            if i < n {
                dprev[off + i] += back;
            }
        }
        dprev
    }

    /// Gradient of `sum_t <c_t, state_t>` by full unrolled backpropagation,
    /// flattened row-major like the library's parameter vector.
    pub fn bptt_total(&self, inputs: &[Vec<f64>], loss_dirs: &[Vec<f64>]) -> Vec<f64> {
        let mut state = vec![0.0; self.state_size()];
        let mut steps = Vec::new();
        for x in inputs {
            let st = self.step(&state, x);
            state = st.next.clone();
            steps.push(st);
        }
        let mut dw = vec![vec![0.0; self.r() * self.n]; self.w.len()];
        let mut carry = vec![0.0; self.state_size()];
        for (t, st) in steps.iter().enumerate().rev() {
            let dnext: Vec<f64> = carry.iter().zip(&loss_dirs[t]).map(|(a, b)| a + b).collect();
            carry = self.backward(st, &dnext, &mut dw);
        }
        dw.into_iter().flatten().collect()
    }
}

pub fn random_inputs(rng: &mut RngHandle, steps: usize, m: usize) -> Vec<Vec<f64>> {
    (0..steps).map(|_| (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

pub fn arch_for(i: usize) -> Arch {
    Arch::ALL[i % 3]
}
