//! Dense row-major kernels with explicit operation counters.
//!
//! Every kernel that performs multiply-accumulates takes an [`OpCounters`]
//! and adds exactly the number of MACs it executed. The analytical cost model
//! is checked against these counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix. The batch dimension is always `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} elements for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Single-row matrix holding `v`.
    pub fn row_vector(v: &[T]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
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

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rows `idx` gathered into a new matrix, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("Matrix::vstack", "column counts differ"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix {
            rows: parts.iter().map(|m| m.rows).sum(),
            cols,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column sums, i.e. `1ᵀ·self`.
    pub fn col_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Instrumentation for the kernels. Counts only grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub macs: u64,
    pub local_reads: u64,
    pub local_writes: u64,
    /// Weight words touched, charged by the training loops per the access
    /// discipline of each learning rule.
    pub weight_accesses: u64,
}

impl OpCounters {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    fn charge(&mut self, macs: usize, reads: usize, writes: usize) {
        self.macs += macs as u64;
        self.local_reads += reads as u64;
        self.local_writes += writes as u64;
    }

    pub fn add(&mut self, other: &OpCounters) {
        self.macs += other.macs;
        self.local_reads += other.local_reads;
        self.local_writes += other.local_writes;
        self.weight_accesses += other.weight_accesses;
    }
}

impl std::ops::Add for OpCounters {
    type Output = OpCounters;
    fn add(mut self, rhs: OpCounters) -> OpCounters {
        OpCounters::add(&mut self, &rhs);
        self
    }
}

#[inline]
fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight independent partial sums so the compiler can keep
/// several lanes in flight.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `A·B (+ C)`. Charges `p·q·r` MACs.
pub fn gemm<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    c_accum: Option<&Matrix<T>>,
    counters: &mut OpCounters,
) -> Result<Matrix<T>> {
    let (p, q) = a.shape();
    let (q2, r) = b.shape();
    if q != q2 {
        return Err(Error::shape("gemm", format!("{p}x{q} · {q2}x{r}")));
    }
    let mut out = match c_accum {
        Some(c) if c.shape() != (p, r) => {
            return Err(Error::shape(
                "gemm",
                format!("accumulator {:?}, expected {p}x{r}", c.shape()),
            ))
        }
        Some(c) => c.clone(),
        None => Matrix::zeros(p, r),
    };
    // k outer so each row of B stays hot across the batch rows of A.
    for k in 0..q {
        let b_row = b.row(k);
        for i in 0..p {
            let aik = a.data[i * q + k];
            axpy(&mut out.data[i * r..(i + 1) * r], aik, b_row);
        }
    }
    counters.charge(p * q * r, p * q + q * r, p * r);
    Ok(out)
}

/// `A·Bᵀ` without materialising the transpose. Charges `p·q·r` MACs.
pub fn gemm_nt<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    counters: &mut OpCounters,
) -> Result<Matrix<T>> {
    let (p, q) = a.shape();
    let (r, q2) = b.shape();
    if q != q2 {
        return Err(Error::shape("gemm_nt", format!("{p}x{q} · ({r}x{q2})ᵀ")));
    }
    let mut out = Matrix::zeros(p, r);
    for j in 0..r {
        let b_row = b.row(j);
        for i in 0..p {
            out.data[i * r + j] = dot(a.row(i), b_row);
        }
    }
    counters.charge(p * q * r, p * q + q * r, p * r);
    Ok(out)
}

/// `Aᵀ·B` without materialising the transpose. Charges `p·q·r` MACs.
pub fn gemm_tn<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    counters: &mut OpCounters,
) -> Result<Matrix<T>> {
    let (q, p) = a.shape();
    let (q2, r) = b.shape();
    if q != q2 {
        return Err(Error::shape("gemm_tn", format!("({q}x{p})ᵀ · {q2}x{r}")));
    }
    let mut out = Matrix::zeros(p, r);
    for k in 0..q {
        let b_row = b.row(k);
        let a_row = a.row(k);
        for i in 0..p {
            axpy(&mut out.data[i * r..(i + 1) * r], a_row[i], b_row);
        }
    }
    counters.charge(p * q * r, p * q + q * r, p * r);
    Ok(out)
}

/// In-place `W ← W − scale·AᵀB`, the fused outer-product weight update.
/// Charges the same `p·q·r` MACs as forming `AᵀB` explicitly.
pub fn sub_scaled_tn<T: Scalar>(
    w: &mut Matrix<T>,
    a: &Matrix<T>,
    b: &Matrix<T>,
    scale: T,
    counters: &mut OpCounters,
) -> Result<()> {
    let (q, p) = a.shape();
    let (q2, r) = b.shape();
    if q != q2 || w.shape() != (p, r) {
        return Err(Error::shape(
            "sub_scaled_tn",
            format!("W {:?} vs ({q}x{p})ᵀ · {q2}x{r}", w.shape()),
        ));
    }
    for i in 0..p {
        let w_row = &mut w.data[i * r..(i + 1) * r];
        for k in 0..q {
            let coef = -scale * a.data[k * p + i];
            axpy(w_row, coef, b.row(k));
        }
    }
    counters.charge(p * q * r, p * q + q * r + p * r, p * r);
    Ok(())
}

/// `A·x`, or `Aᵀ·x` when `transpose` is set. Charges `p·q` MACs.
pub fn gemv<T: Scalar>(
    a: &Matrix<T>,
    x: &[T],
    transpose: bool,
    counters: &mut OpCounters,
) -> Result<Vec<T>> {
    let (p, q) = a.shape();
    let out = if transpose {
        if x.len() != p {
            return Err(Error::shape("gemv", format!("({p}x{q})ᵀ · {}", x.len())));
        }
        let mut out = vec![T::zero(); q];
        for (i, &xi) in x.iter().enumerate() {
            axpy(&mut out, xi, a.row(i));
        }
        out
    } else {
        if x.len() != q {
            return Err(Error::shape("gemv", format!("{p}x{q} · {}", x.len())));
        }
        (0..p).map(|i| dot(a.row(i), x)).collect()
    };
    counters.charge(p * q, p * q + x.len(), out.len());
    Ok(out)
}

pub fn hadamard<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "hadamard",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
    })
}

pub fn relu<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU derivative written in terms of the activation `h = relu(a)`.
pub fn relu_grad<T: Scalar>(h: &Matrix<T>) -> Matrix<T> {
    h.map(|v| if v > T::zero() { T::one() } else { T::zero() })
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Checks that every row of `y` is a one-hot vector.
pub fn validate_one_hot<T: Scalar>(y: &Matrix<T>) -> Result<()> {
    for r in 0..y.rows {
        let row = y.row(r);
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros + 1 != row.len() {
            return Err(Error::Validation(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SoftmaxXent<T> {
    pub probs: Matrix<T>,
    /// Mean negative log-likelihood over the batch rows.
    pub loss: T,
    /// `probs − y`, not divided by the batch size.
    pub error: Matrix<T>,
}

pub fn softmax_xent<T: Scalar>(logits: &Matrix<T>, y: &Matrix<T>) -> Result<SoftmaxXent<T>> {
    if logits.shape() != y.shape() {
        return Err(Error::shape(
            "softmax_xent",
            format!("{:?} vs {:?}", logits.shape(), y.shape()),
        ));
    }
    validate_one_hot(y)?;
    let probs = softmax_rows(logits);
    Ok(xent_from_probs(probs, y))
}

/// Loss and error for probabilities that are already normalised; `y` must be
/// one-hot and shape-compatible.
pub(crate) fn xent_from_probs<T: Scalar>(probs: Matrix<T>, y: &Matrix<T>) -> SoftmaxXent<T> {
    let tiny = T::min_positive_value();
    let mut loss = T::zero();
    let mut error = probs.clone();
    for r in 0..probs.rows {
        for (c, e) in error.row_mut(r).iter_mut().enumerate() {
            let yv = y.get(r, c);
            if yv == T::one() {
                loss -= probs.get(r, c).max(tiny).ln();
            }
            *e -= yv;
        }
    }
    let b = T::of(probs.rows.max(1) as f64);
    SoftmaxXent {
        probs,
        loss: loss / b,
        error,
    }
}
