//! Dense linear algebra used by the estimators.
//!
//! Matrices are row-major `f64`. Row vectors are plain slices / `Vec<f64>`.
//! The Kronecker product here is the row-vector-by-matrix form that the
//! factored influence matrices use: `kron(u, A)` places `u[i] * A` in column
//! block `i`, so a parameter index decomposes as `i * A.cols() + c`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix data has {} entries, expected {}x{}",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    ///
    /// # Panics
    /// Panics if the rows are ragged; intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    /// Row vector times matrix: `v * self`.
    pub fn left_mul(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return invalid(format!(
                "vector of length {} cannot left-multiply a {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    /// Matrix times column vector: `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return invalid(format!(
                "vector of length {} cannot right-multiply a {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            ));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(alpha);
        m
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return invalid(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            ));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `out = a * b`, overwriting `out`. Shapes are assumed consistent.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    out.fill_zero();
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, &b.data[k * b.cols..(k + 1) * b.cols], out_row);
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Euclidean norm of a vector.
#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Frobenius norm, `sqrt(sum a_ij^2)`.
pub fn frob_norm(a: &Matrix) -> f64 {
    norm(&a.data)
}

/// Frobenius inner product `sum a_ij * b_ij`.
pub fn frob_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid(format!(
            "inner product of {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    Ok(dot(&a.data, &b.data))
}

/// Kronecker product of a row vector with a matrix.
///
/// `result[j][i * m + c] == u[i] * a[j][c]` for an `n x m` matrix `a`.
pub fn kron(u: &[f64], a: &Matrix) -> Result<Matrix> {
    if u.is_empty() || a.rows == 0 || a.cols == 0 {
        return invalid("kron of an empty factor");
    }
    let q = u.len();
    let m = a.cols;
    let mut out = Matrix::zeros(a.rows, q * m);
    for j in 0..a.rows {
        let src = a.row(j);
        let dst = out.row_mut(j);
        for (i, &ui) in u.iter().enumerate() {
            for (d, s) in dst[i * m..(i + 1) * m].iter_mut().zip(src) {
                *d = ui * s;
            }
        }
    }
    Ok(out)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded random stream.
///
/// Two handles built from the same seed produce bit-identical sequences for
/// identical call sequences. Child streams derived with [`RngHandle::child`]
/// are independent of the parent and of each other.
#[derive(Debug, Clone)]
pub struct RngHandle {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64) -> Self {
        RngHandle { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A reproducible stream keyed on `(seed, stream)`. Does not advance `self`.
    ///
    /// The child gets its own derived seed, so grandchildren differ whenever
    /// any key along the path differs.
    pub fn child(&self, stream: u64) -> RngHandle {
        let seed = splitmix(self.seed ^ splitmix(stream.wrapping_add(0x51_7c_c1_b7)));
        RngHandle::new(seed)
    }

    /// A uniform random sign, `-1.0` or `+1.0`.
    #[inline]
    pub fn sign(&mut self) -> f64 {
        if self.inner.next_u32() & 1 == 0 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.inner.gen::<f64>() < p
        }
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = 1.0 - self.inner.gen::<f64>();
        let u2: f64 = self.inner.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

impl RngCore for RngHandle {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// `k` i.i.d. Rademacher entries.
pub fn rademacher(rng: &mut RngHandle, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.sign()).collect()
}

/// Outcome of a power iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const SPECTRAL_TOL: f64 = 1e-6;
pub const SPECTRAL_MAX_ITERS: usize = 1000;

/// Largest singular value of a square matrix by power iteration on `A^T A`.
pub fn spectral_norm(
    a: &Matrix,
    tol: f64,
    max_iters: usize,
    rng: &mut RngHandle,
) -> Result<SpectralNorm> {
    if a.rows != a.cols {
        return invalid(format!("spectral norm of non-square {}x{} matrix", a.rows, a.cols));
    }
    if !(tol > 0.0) {
        return invalid("spectral norm tolerance must be positive");
    }
    let n = a.rows;
    if n == 0 || a.data.iter().all(|&x| x == 0.0) {
        return Ok(SpectralNorm { value: 0.0, iterations: 0, converged: true });
    }
    let at = a.transpose();
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut sigma = 0.0;
    for it in 1..=max_iters {
        let av = a.mul_vec(&v)?;
        let next_sigma = norm(&av);
        let mut w = at.mul_vec(&av)?;
        let nw = norm(&w);
        if nw == 0.0 {
            // v landed in the null space; the estimate is exact for that direction only
            return Ok(SpectralNorm { value: next_sigma, iterations: it, converged: false });
        }
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
        let done = (next_sigma - sigma).abs() <= tol * next_sigma;
        sigma = next_sigma;
        if done {
            return Ok(SpectralNorm { value: sigma, iterations: it, converged: true });
        }
    }
    Ok(SpectralNorm { value: sigma, iterations: max_iters, converged: false })
}

/// One summand `a ⊗ b` of a Kronecker sum.
#[derive(Debug, Clone, PartialEq)]
pub struct KronTerm {
    pub a: Vec<f64>,
    pub b: Matrix,
}

impl KronTerm {
    pub fn new(a: Vec<f64>, b: Matrix) -> Self {
        KronTerm { a, b }
    }
}

/// Variance-minimizing scale `sqrt(|b| / |a|)`, or 1 when either norm vanishes.
pub fn balance_weight(a_norm: f64, b_norm: f64) -> f64 {
    if a_norm > 0.0 && b_norm > 0.0 {
        (b_norm / a_norm).sqrt()
    } else {
        1.0
    }
}

fn check_terms(terms: &[KronTerm]) -> Result<()> {
    let first = terms.first().ok_or_else(|| Error::InvalidArgument("empty Kronecker sum".into()))?;
    for t in terms {
        if t.a.len() != first.a.len() || t.b.shape() != first.b.shape() {
            return invalid("Kronecker sum terms have mismatched shapes");
        }
    }
    Ok(())
}

/// The optimal weights `p_i` for [`reduce_kron_sum`].
pub fn kron_sum_weights(terms: &[KronTerm]) -> Vec<f64> {
    terms.iter().map(|t| balance_weight(norm(&t.a), frob_norm(&t.b))).collect()
}

/// `(sum c_i p_i a_i, sum c_i b_i / p_i)` for given signs and weights.
pub fn combine_kron_terms(
    terms: &[KronTerm],
    weights: &[f64],
    signs: &[f64],
) -> Result<(Vec<f64>, Matrix)> {
    check_terms(terms)?;
    if weights.len() != terms.len() || signs.len() != terms.len() {
        return invalid("one weight and one sign per term required");
    }
    let mut a = vec![0.0; terms[0].a.len()];
    let mut b = Matrix::zeros(terms[0].b.rows, terms[0].b.cols);
    for ((t, &p), &c) in terms.iter().zip(weights).zip(signs) {
        axpy(c * p, &t.a, &mut a);
        b.add_scaled(c / p, &t.b)?;
    }
    Ok((a, b))
}

/// Replaces `sum_i a_i ⊗ b_i` by a single random Kronecker product whose
/// expectation over the drawn signs equals the sum.
pub fn reduce_kron_sum(terms: &[KronTerm], rng: &mut RngHandle) -> Result<(Vec<f64>, Matrix)> {
    check_terms(terms)?;
    let weights = kron_sum_weights(terms);
    let signs = rademacher(rng, terms.len());
    combine_kron_terms(terms, &weights, &signs)
}
