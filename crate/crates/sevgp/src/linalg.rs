//! Minimal dense matrix routines generic over [`Scalar`].
//!
//! nalgebra backs all plain-`f64` linear algebra in the public API; this
//! module exists because the objective/gradient path also needs Gram
//! matrices, Cholesky factors and triangular solves over [`Dual`] scalars.
//! Everything here is row-major and sized for desk-scale problems.

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Row-major dense matrix over a generic scalar.
#[derive(Clone, Debug)]
pub struct GMat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> GMat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        GMat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        GMat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.cols + j]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    /// Contiguous view of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> GMat<T> {
        GMat::from_fn(self.cols, self.rows, |i, j| self.get(j, i).clone())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &GMat<T>) -> GMat<T> {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out: GMat<T> = GMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.get_mut(i, j).add_prod(a, other.get(k, j));
                }
            }
        }
        out
    }

    /// `self * v` for a vector `v`.
    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        let mut out = vec![T::zero(); self.rows];
        for i in 0..self.rows {
            let acc = &mut out[i];
            for (a, x) in self.row(i).iter().zip(v) {
                acc.add_prod(a, x);
            }
        }
        out
    }

    pub fn value_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).value())
    }
}

impl GMat<f64> {
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        GMat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        self.value_matrix()
    }
}

/// Lower-triangular Cholesky factor together with the jitter that was added
/// to the diagonal to obtain it.
#[derive(Clone, Debug)]
pub struct CholFactor<T> {
    lower: GMat<T>,
    jitter: f64,
}

impl<T: Scalar> CholFactor<T> {
    pub fn lower(&self) -> &GMat<T> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// The jitter that was actually applied to the diagonal.
    pub fn applied_jitter(&self) -> f64 {
        self.jitter
    }

    /// log det of the factored matrix: `2 sum ln L_ii`.
    pub fn log_det(&self) -> T {
        let mut acc = T::zero();
        for i in 0..self.dim() {
            acc += self.lower.get(i, i).ln();
        }
        acc.clone() + acc
    }

    /// Solves `L y = b` (forward substitution).
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y: Vec<T> = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = b[i].clone();
            let row = self.lower.row(i);
            for (j, yj) in y.iter().enumerate() {
                acc.sub_prod(&row[j], yj);
            }
            y.push(acc / row[i].clone());
        }
        y
    }

    /// Solves `L^T x = b` (backward substitution).
    pub fn solve_lower_transpose(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x = vec![T::zero(); n];
        for i in (0..n).rev() {
            let mut acc = b[i].clone();
            for j in (i + 1)..n {
                acc.sub_prod(self.lower.get(j, i), &x[j]);
            }
            x[i] = acc / self.lower.get(i, i).clone();
        }
        x
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_lower_transpose(&self.solve_lower(b))
    }

    /// Solves `L Y = B` column-wise, returning `Y` with `B`'s shape.
    pub fn solve_lower_mat(&self, b: &GMat<T>) -> GMat<T> {
        let n = self.dim();
        assert_eq!(b.rows(), n);
        let mut y = b.clone();
        for col in 0..b.cols() {
            for i in 0..n {
                let mut acc = y.get(i, col).clone();
                let row = self.lower.row(i);
                for j in 0..i {
                    acc.sub_prod(&row[j], y.get(j, col));
                }
                y.set(i, col, acc / row[i].clone());
            }
        }
        y
    }

    /// Solves `L^T Y = B` column-wise.
    pub fn solve_lower_transpose_mat(&self, b: &GMat<T>) -> GMat<T> {
        let n = self.dim();
        assert_eq!(b.rows(), n);
        let mut y = b.clone();
        for col in 0..b.cols() {
            for i in (0..n).rev() {
                let mut acc = y.get(i, col).clone();
                for j in (i + 1)..n {
                    acc.sub_prod(self.lower.get(j, i), y.get(j, col));
                }
                y.set(i, col, acc / self.lower.get(i, i).clone());
            }
        }
        y
    }
}

pub const DEFAULT_JITTER: f64 = 1e-8;
const JITTER_STEPS: usize = 6;

/// Cholesky of `m + j I` where `j` starts at `jitter0` and escalates tenfold
/// up to six times until the factorization succeeds. A zero starting jitter
/// is allowed (useful when a positive diagonal shift is already baked into
/// `m`) and escalates to [`DEFAULT_JITTER`]. Success and failure are decided
/// on the primal values, so dual and plain evaluations take the same branch.
pub fn cholesky_jittered<T: Scalar>(m: &GMat<T>, jitter0: f64) -> Result<CholFactor<T>> {
    assert_eq!(m.rows(), m.cols(), "cholesky needs a square matrix");
    let mut jitter = jitter0;
    for _ in 0..=JITTER_STEPS {
        if let Some(lower) = try_cholesky(m, jitter) {
            return Ok(CholFactor { lower, jitter });
        }
        jitter = if jitter == 0.0 {
            DEFAULT_JITTER
        } else {
            jitter * 10.0
        };
    }
    Err(Error::NotPsd {
        min_eigenvalue: min_eigenvalue(&m.value_matrix()),
        max_jitter: jitter / 10.0,
    })
}

fn try_cholesky<T: Scalar>(m: &GMat<T>, jitter: f64) -> Option<GMat<T>> {
    let n = m.rows();
    let mut l = GMat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = m.get(i, j).clone();
            if i == j {
                acc += T::from_f64(jitter);
            }
            for k in 0..j {
                acc.sub_prod(l.get(i, k), l.get(j, k));
            }
            if i == j {
                if acc.value() <= 0.0 || !acc.value().is_finite() {
                    return None;
                }
                l.set(i, j, acc.sqrt());
            } else {
                let d = l.get(j, j).clone();
                l.set(i, j, acc / d);
            }
        }
    }
    Some(l)
}

/// Smallest eigenvalue of a symmetric matrix; used for diagnostics when a
/// factorization fails outright.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
