//! Dense row-major linear algebra and the transformer primitives used by the
//! engine.
//!
//! Everything here is a pure function of its inputs. Dot products longer than
//! [`WIDE_DOT_THRESHOLD`] terms accumulate in `f64` regardless of the scalar
//! type, so 32-bit results stay stable at `d = 128` and `ffn = 512`.

use crate::gemm::PackedBt;
use crate::{Error, Result, Scalar};

/// Dot products with more terms than this accumulate in `f64`.
pub const WIDE_DOT_THRESHOLD: usize = 64;

/// Layer-norm epsilon (BERT convention).
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Converts from another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
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

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    /// Copies the column block `[start, start + width)`.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(Error::invalid(format!(
                "column block {start}..{} out of range for {} columns",
                start + width,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.row_iter() {
            data.extend_from_slice(&r[start..start + width]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Writes `block` into the columns starting at `start`.
    pub fn set_column_block(&mut self, start: usize, block: &Self) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::invalid(format!(
                "cannot place {}x{} block at column {start} of {}x{}",
                block.rows, block.cols, self.rows, self.cols
            )));
        }
        for r in 0..self.rows {
            self.row_mut(r)[start..start + block.cols].copy_from_slice(block.row(r));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, k: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * k).collect(),
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[T]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} columns",
                bias.len(),
                self.cols
            )));
        }
        let cols = self.cols.max(1);
        for row in self.data.chunks_exact_mut(cols) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn map_in_place(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), T::max),
        )
    }
}

/// Dot product, widened to `f64` accumulation past [`WIDE_DOT_THRESHOLD`] terms.
///
/// Terms are accumulated in [`DOT_LANES`] interleaved partial sums, which
/// lets the loop vectorize; the summation order is fixed, so results are
/// deterministic.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    if a.len() > WIDE_DOT_THRESHOLD {
        T::of(lane_dot(a, b, 0.0f64, |x, y| x.as_f64() * y.as_f64()))
    } else {
        lane_dot(a, b, T::zero(), |x, y| x * y)
    }
}

/// Partial sums kept by [`dot`].
pub const DOT_LANES: usize = 8;

#[inline(always)]
fn lane_dot<T: Copy, A: Scalar>(a: &[T], b: &[T], zero: A, mul: impl Fn(T, T) -> A) -> A {
    let mut acc = [zero; DOT_LANES];
    let (ca, cb) = (a.chunks_exact(DOT_LANES), b.chunks_exact(DOT_LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..DOT_LANES {
            acc[i] += mul(x[i], y[i]);
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += mul(x, y);
    }
    s
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::invalid(format!(
            "matmul shape mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    matmul_transposed(a, &b.transpose())
}

/// `a · bᵀ`, the natural layout for `[out, in]` weight matrices.
pub fn matmul_transposed<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::invalid(format!(
            "matmul_transposed shape mismatch: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    if a.cols > WIDE_DOT_THRESHOLD {
        return Ok(wide_matmul_transposed(a, b));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for ar in a.row_iter() {
        for br in b.row_iter() {
            out.push(dot(ar, br));
        }
    }
    // row_iter yields nothing for zero-width inputs; the products are zero
    if a.cols == 0 {
        out = vec![T::zero(); a.rows * b.rows];
    }
    Matrix::new(a.rows, b.rows, out)
}

/// `a · bᵀ` through the packed `f64` kernel, for inner dimensions past
/// [`WIDE_DOT_THRESHOLD`].
fn wide_matmul_transposed<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    gemm_bt(a, &PackedBt::new(&b.data, b.rows, b.cols))
}

/// `a · bᵀ` against a pre-packed `b`. Accumulates in `f64`.
pub(crate) fn gemm_bt<T: Scalar>(a: &Matrix<T>, b: &PackedBt) -> Matrix<T> {
    assert_eq!(a.cols, b.k(), "gemm_bt: inner dimensions differ");
    Matrix {
        rows: a.rows,
        cols: b.n(),
        data: b.mul(&a.data, a.rows).into_iter().map(T::of).collect(),
    }
}

/// Numerically stable softmax in place on one slice.
fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    let inv = T::of(1.0 / sum);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    if m.is_empty() {
        return Err(Error::invalid("softmax_rows on an empty matrix"));
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Single-head scaled dot-product attention.
///
/// Returns `(map · V, map)` where `map = softmax(Q·Kᵀ / √d_h)`. With `prune`
/// set, every row of the map is the uniform distribution over the keys.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    prune: bool,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if q.cols != k.cols {
        return Err(Error::invalid(format!(
            "query width {} != key width {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(Error::invalid(format!(
            "key rows {} != value rows {}",
            k.rows, v.rows
        )));
    }
    if k.rows == 0 || q.rows == 0 {
        return Err(Error::invalid("attention over an empty query or key set"));
    }
    let map = if prune {
        Matrix::filled(q.rows, k.rows, T::one() / T::of(k.rows as f64))
    } else {
        let scale = T::one() / T::of(q.cols as f64).sqrt();
        let scores = matmul_transposed(q, k)?.scale(scale);
        softmax_rows(&scores)?
    };
    let out = matmul(&map, v)?;
    Ok((out, map))
}

fn mean_var<T: Scalar>(v: &[T]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = v
        .iter()
        .map(|x| {
            let d = x.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

/// `gain ⊙ (v − mean) / √(var + eps) + bias` with the biased variance.
pub fn layer_norm<T: Scalar>(v: &[T], gain: &[T], bias: &[T], eps: f64) -> Result<Vec<T>> {
    let mut out = v.to_vec();
    layer_norm_in_place(&mut out, gain, bias, eps)?;
    Ok(out)
}

fn layer_norm_in_place<T: Scalar>(v: &mut [T], gain: &[T], bias: &[T], eps: f64) -> Result<()> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(Error::invalid(format!(
            "layer_norm dims: input {}, gain {}, bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    if v.is_empty() {
        return Err(Error::invalid("layer_norm on an empty vector"));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let (mean, var) = mean_var(v);
    let inv = 1.0 / (var + eps).sqrt();
    for ((x, &g), &b) in v.iter_mut().zip(gain).zip(bias) {
        *x = T::of((x.as_f64() - mean) * inv) * g + b;
    }
    Ok(())
}

/// Applies [`layer_norm`] to every row of `m`.
pub fn layer_norm_rows<T: Scalar>(m: &mut Matrix<T>, gain: &[T], bias: &[T], eps: f64) -> Result<()> {
    for r in 0..m.rows {
        layer_norm_in_place(m.row_mut(r), gain, bias, eps)?;
    }
    Ok(())
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}
