//! Dense linear algebra, statistics and seeded generators.
//!
//! Every routine here is a pure function of its inputs. Accumulation orders
//! are fixed so that results are bit-reproducible across runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dims, invalid, Error, Result};
use crate::scalar::Scalar;

/// Row-major dense real matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dims("Matrix::from_vec", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("Matrix::from_vec", "non-finite entry"));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("Matrix::from_rows", "ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Diagonal matrix with `diag` on the main diagonal.
    pub fn diag(diag: &[T]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, scale^2).
    pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * scale)
            })
            .collect();
        Self::from_raw(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        matmul(self, rhs)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with("Matrix::add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with("Matrix::sub", rhs, |a, b| a - b)
    }

    fn zip_with(&self, op: &'static str, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(dims(op, format!("{:?}", self.shape()), format!("{:?}", rhs.shape())));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&self, v: &[T]) -> Result<Self> {
        if v.len() != self.cols {
            return Err(dims("Matrix::add_row_vector", self.cols, v.len()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, &b) in out.row_mut(r).iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// `self * diag(d)`: scales column `j` by `d[j]`.
    pub fn scale_cols(&self, d: &[T]) -> Result<Self> {
        if d.len() != self.cols {
            return Err(dims("Matrix::scale_cols", self.cols, d.len()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, &s) in out.row_mut(r).iter_mut().zip(d) {
                *x *= s;
            }
        }
        Ok(out)
    }

    /// `diag(d) * self`: scales row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &[T]) -> Result<Self> {
        if d.len() != self.rows {
            return Err(dims("Matrix::scale_rows", self.rows, d.len()));
        }
        let mut out = self.clone();
        for (r, &s) in d.iter().enumerate() {
            for x in out.row_mut(r) {
                *x *= s;
            }
        }
        Ok(out)
    }

    /// Columns `[start, start + width)`.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols, "column block out of range");
        let mut out = Self::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Rows `[start, start + height)`.
    pub fn row_block(&self, start: usize, height: usize) -> Self {
        assert!(start + height <= self.rows, "row block out of range");
        Self::from_raw(
            height,
            self.cols,
            self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        )
    }

    /// Horizontal concatenation.
    pub fn hcat(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(invalid("Matrix::hcat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    /// Vertical concatenation.
    pub fn vcat(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(invalid("Matrix::vcat", "column counts differ"));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self::from_raw(rows, cols, data))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// max over rows of |x|, per column.
    pub fn col_abs_max(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (m, &v) in out.iter_mut().zip(self.row(r)) {
                *m = m.max(v.abs());
            }
        }
        out
    }

    /// max over columns of |x|, per row.
    pub fn row_abs_max(&self) -> Vec<T> {
        (0..self.rows)
            .map(|r| self.row(r).iter().fold(T::zero(), |m, &v| m.max(v.abs())))
            .collect()
    }

    /// Element type conversion (through `f64`).
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        )
    }
}

/// `a * b`, accumulated row by row and left to right over the inner index.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(dims(
            "matmul",
            format!("lhs cols = rhs rows = {}", a.cols),
            format!("rhs rows = {}", b.rows),
        ));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    debug_assert!(row.iter().all(|v| !v.is_nan()), "softmax of NaN");
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Applies the softmax Jacobian at probability vector `a` to `dl`:
/// `diag(a) dl - a (a . dl)`.
pub fn softmax_jacobian_apply<T: Scalar>(a: &[T], dl: &[T]) -> Result<Vec<T>> {
    if a.len() != dl.len() {
        return Err(dims("softmax_jacobian_apply", a.len(), dl.len()));
    }
    let dot: T = a.iter().zip(dl).map(|(&p, &d)| p * d).sum();
    Ok(a.iter().zip(dl).map(|(&p, &d)| p * (d - dot)).collect())
}

/// Population standard deviation over all entries, two-pass.
pub fn stddev<T: Scalar>(values: &[T]) -> Result<T> {
    if values.len() < 2 {
        return Err(invalid("stddev", "need at least two elements"));
    }
    let n = T::lit(values.len() as f64);
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    Ok(var.sqrt())
}

/// Root mean square over all entries.
pub fn rms<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Empty { op: "rms" });
    }
    let n = T::lit(values.len() as f64);
    Ok((values.iter().map(|&v| v * v).sum::<T>() / n).sqrt())
}

/// Seeded random orthogonal matrix: modified Gram-Schmidt (two passes) over
/// the columns of a seeded Gaussian matrix, left to right.
pub fn random_orthogonal<T: Scalar>(n: usize, seed: u64) -> Result<Matrix<T>> {
    if n == 0 {
        return Err(invalid("random_orthogonal", "n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let g: Matrix<f64> = Matrix::gaussian(n, n, 1.0, &mut rng);
        // columns as contiguous vectors
        let mut cols: Vec<Vec<f64>> = (0..n).map(|c| g.col(c)).collect();
        let mut degenerate = false;
        for j in 0..n {
            for _pass in 0..2 {
                for i in 0..j {
                    let (done, rest) = cols.split_at_mut(j);
                    let qi = &done[i];
                    let v = &mut rest[0];
                    let proj: f64 = qi.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                    for (x, &q) in v.iter_mut().zip(qi) {
                        *x -= proj * q;
                    }
                }
            }
            let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-10 {
                degenerate = true;
                break;
            }
            for x in cols[j].iter_mut() {
                *x /= norm;
            }
        }
        if degenerate {
            // Practically unreachable; draw again from the same stream.
            continue;
        }
        let mut q = Matrix::<T>::zeros(n, n);
        for (c, col) in cols.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                q.set(r, c, T::lit(v));
            }
        }
        return Ok(q);
    }
}

/// Channel permutation. `mapping[i]` is the destination position of source
/// channel `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &d in &mapping {
            if d >= mapping.len() || seen[d] {
                return Err(invalid("Permutation::new", "mapping is not a bijection"));
            }
            seen[d] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &d)| i == d)
    }

    /// `x * P`: column `i` of `x` moves to column `mapping[i]`.
    pub fn permute_cols<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.len() {
            return Err(dims("Permutation::permute_cols", self.len(), x.cols()));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let src = x.row(r);
            let dst = out.row_mut(r);
            for (i, &d) in self.mapping.iter().enumerate() {
                dst[d] = src[i];
            }
        }
        Ok(out)
    }

    /// `P^T * w`: row `i` of `w` moves to row `mapping[i]`.
    pub fn unpermute_rows<T: Scalar>(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        if w.rows() != self.len() {
            return Err(dims("Permutation::unpermute_rows", self.len(), w.rows()));
        }
        let mut out = Matrix::zeros(w.rows(), w.cols());
        for (i, &d) in self.mapping.iter().enumerate() {
            out.row_mut(d).copy_from_slice(w.row(i));
        }
        Ok(out)
    }

    /// Dense permutation matrix with `P[i, mapping[i]] = 1`.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let n = self.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in self.mapping.iter().enumerate() {
            m.set(i, d, T::one());
        }
        m
    }
}

/// Zigzag channel assignment: channels sorted by descending magnitude (ties by
/// lower index) are dealt to blocks in serpentine order, filling slots within
/// a block in arrival order.
pub fn zigzag_permutation<T: Scalar>(magnitudes: &[T], block_size: usize) -> Result<Permutation> {
    let n = magnitudes.len();
    if block_size == 0 || !n.is_multiple_of(block_size) {
        return Err(invalid(
            "zigzag_permutation",
            format!("block size {block_size} does not divide {n} channels"),
        ));
    }
    let blocks = n / block_size;
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower index first on ties
    order.sort_by(|&a, &b| {
        magnitudes[b]
            .partial_cmp(&magnitudes[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mapping = vec![0; n];
    for (k, &ch) in order.iter().enumerate() {
        let round = k / blocks;
        let pos = k % blocks;
        let block = if round.is_multiple_of(2) { pos } else { blocks - 1 - pos };
        mapping[ch] = block * block_size + round;
    }
    Permutation::new(mapping)
}
