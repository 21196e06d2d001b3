//! Dense row-major `f64` linear algebra and the deterministic RNG every
//! other module builds on.
//!
//! Products accumulate along the inner dimension in ascending order so that
//! results are bit-reproducible across runs and across execution policies.

use std::ops::{Deref, DerefMut};

use crate::error::{MorError, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    pub fn hadamard(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(self.iter().zip(other).map(|(a, b)| a * b).collect())
    }

    pub fn scale(&self, k: f64) -> Vector {
        Vector(self.iter().map(|v| v * k).collect())
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MorError::InvalidArgument(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(MorError::InvalidArgument(format!(
                    "ragged rows: expected {cols} columns, found {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// `diag(v)` as a dense square matrix.
    pub fn diag(v: &[f64]) -> Self {
        let n = v.len();
        let mut m = Matrix::zeros(n, n);
        for (i, x) in v.iter().enumerate() {
            m.data[i * n + i] = *x;
        }
        m
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector((0..self.rows).map(|i| self.get(i, j)).collect())
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

    /// Matrix product. Each entry accumulates over the inner index in
    /// ascending order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(MorError::shape("matmul", self.shape(), other.shape()));
        }
        let bt = other.transpose();
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.cols {
                out.data[i * other.cols + j] = dot(a, bt.row(j));
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(MorError::shape("matmul_t", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if self.cols != x.len() {
            return Err(MorError::shape("matvec", self.shape(), (x.len(), 1)));
        }
        Ok(Vector(
            (0..self.rows).map(|i| dot(self.row(i), x)).collect(),
        ))
    }

    /// `selfᵀ · y`.
    pub fn t_matvec(&self, y: &[f64]) -> Result<Vector> {
        if self.rows != y.len() {
            return Err(MorError::shape("t_matvec", (self.cols, self.rows), (y.len(), 1)));
        }
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        Ok(Vector(out))
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(MorError::shape(op, self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// In-place `self += k · other`.
    pub fn axpy(&mut self, k: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(MorError::shape("axpy", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// `diag(v) · self`: scales row `i` by `v[i]`.
    pub fn scale_rows(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.rows {
            return Err(MorError::shape("scale_rows", (v.len(), v.len()), self.shape()));
        }
        let mut out = self.clone();
        for (i, k) in v.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        Ok(out)
    }

    /// `self · diag(v)`: scales column `j` by `v[j]`.
    pub fn scale_cols(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(MorError::shape("scale_cols", self.shape(), (v.len(), v.len())));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out.row_mut(i).iter_mut().zip(v).for_each(|(x, k)| *x *= k);
        }
        Ok(out)
    }

    /// Copy of columns `start..end`.
    pub fn col_slice(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Copy of rows `start..end`.
    pub fn row_slice(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax_stable(v: &[f64]) -> Result<Vector> {
    if v.is_empty() {
        return Err(MorError::Empty("softmax_stable"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Vector(exps.into_iter().map(|e| e / total).collect()))
}

/// Thin singular value decomposition `M = U diag(S) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m×n`, orthonormal columns.
    pub u: Matrix,
    /// Nonnegative, descending.
    pub s: Vector,
    /// `n×n`, orthogonal.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.s.len())
    }

    /// Best rank-`k` approximation from the leading `k` singular triples.
    pub fn reconstruct_rank(&self, k: usize) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let k = k.min(self.s.len());
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += self.u.get(i, t) * self.s[t] * self.v.get(j, t);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 60;

/// One-sided (Hestenes) Jacobi SVD for `m ≥ n`.
///
/// Sweeps over all column pairs, rotating any pair whose normalized inner
/// product exceeds [`JACOBI_TOLERANCE`], until a full sweep needs no
/// rotation.
pub fn jacobi_svd(m: &Matrix) -> Result<Svd> {
    let (rows, n) = m.shape();
    if rows < n {
        return Err(MorError::InvalidArgument(format!(
            "jacobi_svd needs rows >= cols, got {rows}x{n}"
        )));
    }
    if n == 0 {
        return Err(MorError::Empty("jacobi_svd"));
    }
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.column(j).into_inner()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                if alpha < f64::MIN_POSITIVE || beta < f64::MIN_POSITIVE {
                    continue;
                }
                let gamma = dot(&a[p], &a[q]);
                let cosine = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(cosine);
                if cosine <= JACOBI_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1.0f64.hypot(zeta));
                let c = 1.0 / 1.0f64.hypot(t);
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MorError::NoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_out = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s.push(sigma);
        for (i, vi) in v[src].iter().enumerate() {
            v_out.set(i, dst, *vi);
        }
        if sigma * sigma >= f64::MIN_POSITIVE {
            u_cols.push(Some(a[src].iter().map(|x| x / sigma).collect()));
        } else {
            u_cols.push(None);
        }
    }
    let u_cols = complete_orthonormal(rows, u_cols);
    let u = Matrix::from_fn(rows, n, |i, j| u_cols[j][i]);
    Ok(Svd {
        u,
        s: Vector(s),
        v: v_out,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills missing columns (zero singular values) with unit vectors orthogonal
/// to every other column, via Gram–Schmidt over the standard basis.
fn complete_orthonormal(m: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    for c in cols {
        match c {
            Some(c) => out.push(c),
            None => {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for k in 0..m {
                    let mut e = vec![0.0; m];
                    e[k] = 1.0;
                    for _ in 0..2 {
                        for d in &done {
                            let proj = dot(&e, d);
                            e.iter_mut().zip(d).for_each(|(x, y)| *x -= proj * y);
                        }
                    }
                    let norm = dot(&e, &e).sqrt();
                    if best.as_ref().is_none_or(|(n, _)| norm > *n) {
                        best = Some((norm, e));
                    }
                }
                let (norm, e) = best.expect("m >= 1");
                let unit: Vec<f64> = e.into_iter().map(|x| x / norm).collect();
                done.push(unit.clone());
                out.push(unit);
            }
        }
    }
    out
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator with a Box–Muller Gaussian sampler.
///
/// The `u64` stream depends only on integer arithmetic and is identical on
/// every platform. Gaussian draws additionally go through `ln`, `sqrt`,
/// `cos` and `sin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    state: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed, spare: None }
    }

    /// Independent child stream; used to give sub-tasks their own generator.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` (multiply-shift; `n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box–Muller; the second variate of each pair is
    /// cached for the next call.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(radius * theta.sin());
        radius * theta.cos()
    }

    pub fn gaussian_vec(&mut self, len: usize, mean: f64, stddev: f64) -> Vector {
        Vector((0..len).map(|_| mean + stddev * self.gaussian()).collect())
    }

    /// Row-major Gaussian matrix. `stddev = 0` yields the constant `mean`
    /// (the stream still advances).
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, mean: f64, stddev: f64) -> Result<Matrix> {
        if !(stddev >= 0.0) || !stddev.is_finite() || !mean.is_finite() {
            return Err(MorError::InvalidArgument(format!(
                "gaussian_matrix needs finite mean and stddev >= 0, got mean {mean}, stddev {stddev}"
            )));
        }
        let data = (0..rows * cols).map(|_| mean + stddev * self.gaussian()).collect();
        Matrix::new(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_swap() {
        let mut rng = Rng::new(3);
        let m = rng.gaussian_matrix(3, 4, 0.0, 1.0).unwrap();
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);

        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let swap = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let expected = Matrix::from_rows(&[[2.0, 1.0], [4.0, 3.0]]).unwrap();
        assert_eq!(a.matmul(&swap).unwrap(), expected);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = Rng::new(11);
        let a = rng.gaussian_matrix(7, 5, 0.0, 1.0).unwrap();
        let b = rng.gaussian_matrix(5, 3, 0.0, 1.0).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matvec_and_transpose_matvec() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]).unwrap().as_slice(), &[-2.0, -2.0]);
        assert_eq!(a.t_matvec(&[1.0, 1.0]).unwrap().as_slice(), &[5.0, 7.0, 9.0]);
        assert!(a.matvec(&[1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_stable(&[0.0; 4]).unwrap();
        assert!(s.iter().all(|v| *v == 0.25));

        let s = softmax_stable(&[2f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);

        // exact value: 1 / (1 + e^-1000) and e^-1000 / (1 + e^-1000); e^-1000
        // underflows to 0 in f64, so the oracle is [1, 0].
        let s = softmax_stable(&[1000.0, 0.0]).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);

        assert!(matches!(softmax_stable(&[]), Err(MorError::Empty(_))));
    }

    #[test]
    fn svd_diagonal_and_identity() {
        let d = Matrix::diag(&[3.0, 2.0, 1.0]);
        let svd = jacobi_svd(&d).unwrap();
        assert_eq!(svd.s.as_slice(), &[3.0, 2.0, 1.0]);
        assert_eq!(svd.u, Matrix::identity(3));
        assert_eq!(svd.v, Matrix::identity(3));

        let svd = jacobi_svd(&Matrix::identity(4)).unwrap();
        assert_eq!(svd.s.as_slice(), &[1.0; 4]);
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        g.sub(&Matrix::identity(m.cols())).unwrap().max_abs()
    }

    #[test]
    fn svd_random_reconstructs() {
        let mut rng = Rng::new(5);
        let m = rng.gaussian_matrix(8, 6, 0.0, 1.0).unwrap();
        let svd = jacobi_svd(&m).unwrap();
        let resid = svd.reconstruct().sub(&m).unwrap().frobenius();
        assert!(resid < 1e-10 * m.frobenius(), "{resid}");
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(orthonormality_error(&svd.u) < 1e-10);
        assert!(orthonormality_error(&svd.v) < 1e-10);
        let energy: f64 = svd.s.iter().map(|s| s * s).sum();
        assert!((energy - m.frobenius_sq()).abs() < 1e-9 * m.frobenius_sq());
    }

    #[test]
    fn svd_rank_deficient_completes_u() {
        let mut m = Matrix::zeros(5, 3);
        m.set(0, 0, 2.0);
        m.set(1, 0, 1.0);
        let svd = jacobi_svd(&m).unwrap();
        assert_eq!(svd.s[1], 0.0);
        assert!(orthonormality_error(&svd.u) < 1e-12);
        assert!(svd.reconstruct().sub(&m).unwrap().frobenius() < 1e-14);
    }

    #[test]
    fn svd_rejects_wide() {
        assert!(jacobi_svd(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn rng_golden_stream() {
        // reference values of SplitMix64 seeded with 1234567
        let mut rng = Rng::new(1234567);
        let got: Vec<u64> = (0..5).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                6457827717110365317,
                3203168211198807973,
                9817491932198370423,
                4593380528125082431,
                16408922859458223821
            ]
        );
    }

    #[test]
    fn gaussian_zero_stddev_and_determinism() {
        let z = Rng::new(1).gaussian_matrix(3, 4, 0.0, 0.0).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
        let a = Rng::new(99).gaussian_matrix(6, 6, 0.5, 2.0).unwrap();
        let b = Rng::new(99).gaussian_matrix(6, 6, 0.5, 2.0).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(Rng::new(1).gaussian_matrix(1, 1, 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(2024);
        let (mean, sd) = (1.5, 3.0);
        let m = rng.gaussian_matrix(1000, 100, mean, sd).unwrap();
        let n = m.data().len() as f64;
        let mu = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mu - mean).abs() < 0.02, "mean {mu}");
        assert!((var.sqrt() / sd - 1.0).abs() < 0.02, "sd {}", var.sqrt());
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::new(0);
        let mut seen = [0usize; 4];
        for _ in 0..4000 {
            seen[rng.below(4)] += 1;
        }
        assert!(seen.iter().all(|c| *c > 800));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::matcore::Rng;

        proptest! {
            #[test]
            fn matmul_is_associative(seed in any::<u64>(), m in 1usize..8, k in 1usize..8, l in 1usize..8, n in 1usize..8) {
                let mut rng = Rng::new(seed);
                let a = rng.gaussian_matrix(m, k, 0.0, 1.0).unwrap();
                let b = rng.gaussian_matrix(k, l, 0.0, 1.0).unwrap();
                let c = rng.gaussian_matrix(l, n, 0.0, 1.0).unwrap();
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                let scale = left.frobenius().max(1e-300);
                prop_assert!(left.sub(&right).unwrap().frobenius() / scale < 1e-9);
            }

            #[test]
            fn softmax_on_simplex(v in proptest::collection::vec(-700.0f64..700.0, 1..20)) {
                let s = softmax_stable(&v).unwrap();
                let total: f64 = s.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(s.iter().all(|p| *p >= 0.0 && *p <= 1.0));
            }

            #[test]
            fn svd_energy_preserved(seed in any::<u64>(), m in 1usize..12, extra in 0usize..6) {
                let n = m;
                let rows = m + extra;
                let a = Rng::new(seed).gaussian_matrix(rows, n, 0.0, 1.0).unwrap();
                let svd = jacobi_svd(&a).unwrap();
                let energy: f64 = svd.s.iter().map(|s| s * s).sum();
                prop_assert!((energy - a.frobenius_sq()).abs() <= 1e-9 * a.frobenius_sq());
            }
        }
    }
}
