//! Dense row-major matrices and the small set of kernels the solvers need:
//! products, Gram matrices, norms, Cholesky factorisation and seeded
//! random draws.
//!
//! Everything here is a pure function of its inputs. Matrices are plain
//! owned buffers and can be moved between threads freely.

use std::fmt;
use std::num::NonZeroUsize;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: shapes {left:?} and {right:?} do not conform")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("matrix is not symmetric at ({row}, {col}): gap {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix is not positive definite: pivot {pivot} = {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("malformed matrix dump on line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Real matrix stored row-major. Both dimensions are at least one.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting empty shapes,
    /// wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: idx / cols,
                col: idx % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(LinalgError::DimensionMismatch {
                    op: "from_rows",
                    left: (i, row.len()),
                    right: (0, c),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    /// # Panics
    /// On a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Wraps a buffer produced by a kernel in this crate; shape is trusted.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub(crate) fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    /// `self += alpha * other`.
    pub(crate) fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        frobenius_norm_sq(self)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    /// Frobenius norm of `self - other` without allocating.
    pub fn distance(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks `top` above `bottom`.
    pub fn vstack(top: &Self, bottom: &Self) -> Result<Self> {
        if top.cols != bottom.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "vstack",
                left: top.shape(),
                right: bottom.shape(),
            });
        }
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Self::from_raw(top.rows + bottom.rows, top.cols, data))
    }

    /// Columns in the given order. Panics on an out-of-range index or an
    /// empty selection.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        assert!(!idx.is_empty(), "empty column selection");
        let mut m = Self::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = m.row_mut(i);
            for (d, &j) in dst.iter_mut().zip(idx) {
                *d = src[j];
            }
        }
        m
    }

    /// Parses the text dump produced by `Display`.
    pub fn parse_dump(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(' ')
                .map(|tok| tok.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| LinalgError::Parse {
                    line: n + 1,
                    reason: e.to_string(),
                })?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

/// Text dump: one row per line, single-space separated, shortest
/// round-trip decimal for every entry.
impl fmt::Display for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    f.write_str(" ")?;
                }
                write!(f, "{v:?}")?;
            }
            f.write_str("\n")?;
        }
        Ok(())
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{}", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            write!(f, "{self}")?;
        }
        Ok(())
    }
}

/// Strided view used to feed `dgemm` without materialising transposes.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn normal(m: &'a DenseMatrix) -> Self {
        Self {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            rs: m.cols as isize,
            cs: 1,
        }
    }

    fn transposed(m: &'a DenseMatrix) -> Self {
        Self {
            data: &m.data,
            rows: m.cols,
            cols: m.rows,
            rs: 1,
            cs: m.cols as isize,
        }
    }
}

fn gemm(a: View<'_>, b: View<'_>, op: &'static str) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op,
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    // SAFETY: both views cover exactly rows*cols elements of their buffers with
    // the given strides, and `out` is a fresh row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            0.0,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
    Ok(DenseMatrix::from_raw(a.rows, b.cols, out))
}

/// `a · b`.
pub fn mat_mul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm(View::normal(a), View::normal(b), "mat_mul")
}

/// `a · bᵀ`.
pub fn mat_mul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm(View::normal(a), View::transposed(b), "mat_mul_nt")
}

/// `aᵀ · b`.
pub fn mat_mul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm(View::transposed(a), View::normal(b), "mat_mul_tn")
}

/// `a · aᵀ`, symmetrised so the result is exactly symmetric.
pub fn gram_rows(a: &DenseMatrix) -> DenseMatrix {
    let mut g = mat_mul_nt(a, a).expect("a·aᵀ always conforms");
    symmetrize(&mut g);
    g
}

/// `aᵀ · a`, symmetrised.
pub fn gram_cols(a: &DenseMatrix) -> DenseMatrix {
    let mut g = mat_mul_tn(a, a).expect("aᵀ·a always conforms");
    symmetrize(&mut g);
    g
}

fn symmetrize(g: &mut DenseMatrix) {
    let n = g.rows;
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (g.data[i * n + j] + g.data[j * n + i]);
            g.data[i * n + j] = v;
            g.data[j * n + i] = v;
        }
    }
}

pub(crate) fn add_diagonal(m: &mut DenseMatrix, value: f64) {
    let n = m.rows.min(m.cols);
    for i in 0..n {
        m.data[i * m.cols + i] += value;
    }
}

/// Sum of squared entries.
///
/// The summation order is transpose-invariant, so `‖A‖²` and `‖Aᵀ‖²` agree
/// bit for bit. On the leading square block the mirrored squares are added
/// in pairs (`a_ij² + a_ji²` is commutative in floating point). The leftover
/// strip is walked along its long side.
pub fn frobenius_norm_sq(a: &DenseMatrix) -> f64 {
    let (r, c) = a.shape();
    let k = r.min(c);
    let sq = |i: usize, j: usize| {
        let v = a.data[i * c + j];
        v * v
    };
    let mut s = 0.0;
    for i in 0..k {
        s += sq(i, i);
        for j in i + 1..k {
            s += sq(i, j) + sq(j, i);
        }
    }
    if c > r {
        for j in r..c {
            for i in 0..r {
                s += sq(i, j);
            }
        }
    } else {
        for i in c..r {
            for j in 0..c {
                s += sq(i, j);
            }
        }
    }
    s
}

/// Largest singular value by power iteration on `aᵀa` (or `aaᵀ`,
/// whichever is smaller).
pub fn spectral_norm(a: &DenseMatrix) -> f64 {
    let g = if a.rows <= a.cols {
        gram_rows(a)
    } else {
        gram_cols(a)
    };
    let n = g.rows;
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..n).map(|i| dot(g.row(i), &v)).collect();
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-12 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise the reduction.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

/// Lower Cholesky factor `L` with `S = L·Lᵀ`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    lower: DenseMatrix,
}

/// Relative tolerance for the symmetry precondition of [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-10;

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    /// Solves `S·X = rhs`.
    pub fn solve(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if rhs.rows != self.dim() {
            return Err(LinalgError::DimensionMismatch {
                op: "solve_spd",
                left: self.lower.shape(),
                right: rhs.shape(),
            });
        }
        // Row-wise on the transpose keeps both sweeps contiguous.
        let mut x = rhs.transpose();
        for r in 0..x.rows {
            self.solve_vec_in_place(x.row_mut(r));
        }
        Ok(x.transpose())
    }

    /// Solves `X·S = rhs`, i.e. returns `rhs·S⁻¹`.
    pub fn solve_right(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if rhs.cols != self.dim() {
            return Err(LinalgError::DimensionMismatch {
                op: "solve_right",
                left: rhs.shape(),
                right: self.lower.shape(),
            });
        }
        let mut x = rhs.clone();
        for r in 0..x.rows {
            self.solve_vec_in_place(x.row_mut(r));
        }
        Ok(x)
    }

    /// `‖L⁻¹ bᵢ‖²` summed over the rows `bᵢ` of `rhs` (columns of the
    /// transposed system). Used for multiplier derivatives.
    pub(crate) fn forward_norm_sq_rows(&self, rhs: &DenseMatrix) -> f64 {
        let mut total = 0.0;
        let mut buf = vec![0.0; self.dim()];
        for r in 0..rhs.rows {
            buf.copy_from_slice(rhs.row(r));
            self.forward_in_place(&mut buf);
            total += dot(&buf, &buf);
        }
        total
    }

    fn forward_in_place(&self, b: &mut [f64]) {
        let l = &self.lower;
        for i in 0..b.len() {
            let row = &l.row(i)[..i];
            b[i] = (b[i] - dot(row, &b[..i])) / l.get(i, i);
        }
    }

    fn backward_in_place(&self, b: &mut [f64]) {
        let l = &self.lower;
        for i in (0..b.len()).rev() {
            let xi = b[i] / l.get(i, i);
            b[i] = xi;
            let row = &l.row(i)[..i];
            for (bj, lij) in b[..i].iter_mut().zip(row) {
                *bj -= xi * lij;
            }
        }
    }

    fn solve_vec_in_place(&self, b: &mut [f64]) {
        self.forward_in_place(b);
        self.backward_in_place(b);
    }
}

/// Cholesky factorisation of a symmetric positive-definite matrix.
///
/// A pivot at or below `n·ε_mach·max|diag|` is reported as
/// [`LinalgError::NotPositiveDefinite`] with its index.
pub fn cholesky(s: &DenseMatrix) -> Result<SpdFactor> {
    let n = s.rows;
    if s.cols != n {
        return Err(LinalgError::NotSquare {
            op: "cholesky",
            rows: s.rows,
            cols: s.cols,
        });
    }
    let max_abs = s.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            let gap = (s.get(i, j) - s.get(j, i)).abs();
            if gap > SYMMETRY_TOL * max_abs.max(f64::MIN_POSITIVE) {
                return Err(LinalgError::NotSymmetric {
                    row: i,
                    col: j,
                    gap,
                });
            }
        }
    }
    let max_diag = (0..n).map(|i| s.get(i, i).abs()).fold(0.0, f64::max);
    let floor = n as f64 * f64::EPSILON * max_diag;
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let sum = s.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                if sum.is_nan() || sum <= floor {
                    return Err(LinalgError::NotPositiveDefinite {
                        pivot: i,
                        value: sum,
                    });
                }
                l.data[i * n + i] = sum.sqrt();
            } else {
                l.data[i * n + j] = sum / l.data[j * n + j];
            }
        }
    }
    Ok(SpdFactor { lower: l })
}

/// Solves `s·Z = rhs` through a Cholesky factorisation of `s`.
pub fn solve_spd(s: &DenseMatrix, rhs: &DenseMatrix) -> Result<DenseMatrix> {
    if rhs.rows != s.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_spd",
            left: s.shape(),
            right: rhs.shape(),
        });
    }
    cholesky(s)?.solve(rhs)
}

/// Deterministic generator shared by every simulated node.
///
/// The algorithm is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
/// `seed_from_u64`; an optional stream id selects an independent
/// keystream under the same seed. Uniform reals are built from the top 53
/// bits of each `u64` draw, so streams are identical on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller, one value per two uniforms).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer on `[0, bound)` by rejection (no modulo bias).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Matrix with i.i.d. entries uniform on `[-scale, scale)`.
pub fn random_matrix(
    rng: &mut SeededRng,
    rows: NonZeroUsize,
    cols: NonZeroUsize,
    scale: f64,
) -> DenseMatrix {
    assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
    let (r, c) = (rows.get(), cols.get());
    let data = (0..r * c)
        .map(|_| scale * (2.0 * rng.next_f64() - 1.0))
        .collect();
    DenseMatrix::from_raw(r, c, data)
}
