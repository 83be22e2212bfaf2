//! Dense row-major `f64` matrices.
//!
//! Every public operation either returns a matrix whose entries are all
//! finite or reports an error. Broadcasting is limited to adding a single
//! row vector to every row.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row = self.row(r);
            for (c, v) in row.iter().take(8).enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v}")?;
            }
            if row.len() > 8 {
                write!(f, ", ..")?;
            }
        }
        if self.rows > 6 {
            write!(f, "; ..")?;
        }
        write!(f, "]")
    }
}

/// Entry-wise operations accepted by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Scale,
}

/// Second operand of an entry-wise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    None,
    Scalar(f64),
    /// Same shape as the left operand, or a `1 x cols` row broadcast over rows.
    Matrix(&'a Matrix),
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Numeric(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Self { rows, cols, data }.finite("from_vec")
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("from_rows", (1, cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    /// Fills a matrix from a generator called in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// the entries finite.
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::dim(op, self.shape(), other.shape()))
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        gemm(
            (m, k, n),
            (&self.data, k as isize, 1),
            (&other.data, n as isize, 1),
            &mut out.data,
        );
        out.finite("matmul")
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("matmul_tn", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Matrix::zeros(m, n);
        gemm(
            (m, k, n),
            (&self.data, 1, m as isize),
            (&other.data, n as isize, 1),
            &mut out.data,
        );
        out.finite("matmul_tn")
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_nt", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, n);
        gemm(
            (m, k, n),
            (&self.data, k as isize, 1),
            (&other.data, 1, k as isize),
            &mut out.data,
        );
        out.finite("matmul_nt")
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        elementwise(ElemOp::Add, self, Operand::Matrix(other))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        elementwise(ElemOp::Sub, self, Operand::Matrix(other))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        elementwise(ElemOp::Mul, self, Operand::Matrix(other))
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        elementwise(ElemOp::Scale, self, Operand::Scalar(factor))
    }

    pub fn exp(&self) -> Result<Matrix> {
        elementwise(ElemOp::Exp, self, Operand::None)
    }

    pub fn log(&self) -> Result<Matrix> {
        elementwise(ElemOp::Log, self, Operand::None)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::dim("add_row", self.shape(), row.shape()));
        }
        self.add(row)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "add_assign" })
        }
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Column means as a `1 x cols` row. Zero rows yield zeros.
    pub fn mean_rows(&self) -> Matrix {
        let mut out = self.sum_rows();
        if self.rows > 0 {
            let n = self.rows as f64;
            out.data.iter_mut().for_each(|v| *v /= n);
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Gathers the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::dim("vstack", (rows, cols), m.shape()));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Applies an entry-wise operation. Binary operations accept an equally
/// shaped right operand, a broadcast row, or (for `Scale`) a scalar.
pub fn elementwise(op: ElemOp, a: &Matrix, b: Operand<'_>) -> Result<Matrix> {
    let name = match op {
        ElemOp::Add => "add",
        ElemOp::Sub => "sub",
        ElemOp::Mul => "mul",
        ElemOp::Exp => "exp",
        ElemOp::Log => "log",
        ElemOp::Scale => "scale",
    };
    let out = match (op, b) {
        (ElemOp::Exp, Operand::None) => a.map(f64::exp),
        (ElemOp::Log, Operand::None) => {
            if let Some(&bad) = a.data.iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("logarithm of non-positive value {bad}"),
                });
            }
            a.map(f64::ln)
        }
        (ElemOp::Scale, Operand::Scalar(s)) => a.map(|v| v * s),
        (ElemOp::Add | ElemOp::Sub | ElemOp::Mul, Operand::Scalar(s)) => {
            let f = binary(op);
            a.map(|v| f(v, s))
        }
        (ElemOp::Add | ElemOp::Sub | ElemOp::Mul, Operand::Matrix(b)) => {
            let f = binary(op);
            if a.shape() == b.shape() {
                Matrix {
                    rows: a.rows,
                    cols: a.cols,
                    data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                }
            } else if b.rows == 1 && b.cols == a.cols {
                let mut out = a.clone();
                for r in 0..out.rows {
                    for (x, &y) in out.row_mut(r).iter_mut().zip(&b.data) {
                        *x = f(*x, y);
                    }
                }
                out
            } else {
                return Err(Error::dim(name, a.shape(), b.shape()));
            }
        }
        _ => {
            return Err(Error::Domain {
                op: name,
                detail: "unsupported operand kind".into(),
            })
        }
    };
    out.finite(name)
}

fn binary(op: ElemOp) -> fn(f64, f64) -> f64 {
    match op {
        ElemOp::Add => |x, y| x + y,
        ElemOp::Sub => |x, y| x - y,
        _ => |x, y| x * y,
    }
}

type Strided<'a> = (&'a [f64], isize, isize);

fn gemm((m, k, n): (usize, usize, usize), a: Strided<'_>, b: Strided<'_>, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.len() == m * n);
    // SAFETY: the callers size every buffer to the (m, k, n) extents and pass
    // strides that stay inside them; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
