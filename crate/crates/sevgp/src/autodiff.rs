//! Forward-mode automatic differentiation.
//!
//! The variational objectives are differentiated programmatically: every
//! numeric routine on the objective path is generic over [`Scalar`], and is
//! instantiated either with plain `f64` (evaluation) or with [`Dual`] numbers
//! carrying a dense gradient vector (differentiation). Gradients obtained this
//! way are exact to machine precision, which the finite-difference test
//! harness verifies.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Real-like scalar: the common interface shared by `f64` and [`Dual`].
pub trait Scalar:
    Clone
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    /// The primal (value) part.
    fn value(&self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn powi(&self, n: i32) -> Self;
    fn recip(&self) -> Self {
        Self::one() / self.clone()
    }
    /// Fused accumulate `self += a * b`; the hot path of every matrix product.
    fn add_prod(&mut self, a: &Self, b: &Self);
    /// Fused accumulate `self -= a * b`.
    fn sub_prod(&mut self, a: &Self, b: &Self);
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
    fn add_prod(&mut self, a: &Self, b: &Self) {
        *self += a * b;
    }
    fn sub_prod(&mut self, a: &Self, b: &Self) {
        *self -= a * b;
    }
}

/// First-order dual number with a dense tangent vector.
///
/// An empty tangent is the "constant" broadcast form: it stands for a zero
/// gradient of whatever width the surrounding computation uses, so that
/// `Scalar::zero()`/`from_f64` need not know the width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub dx: Vec<f64>,
}

impl Dual {
    /// Constant with no tangent.
    pub fn constant(re: f64) -> Self {
        Dual { re, dx: Vec::new() }
    }

    /// Variable seeded with `d/d x_i = 1` out of `width` directions.
    pub fn variable(re: f64, i: usize, width: usize) -> Self {
        let mut dx = vec![0.0; width];
        dx[i] = 1.0;
        Dual { re, dx }
    }

    fn unary(&self, re: f64, scale: f64) -> Dual {
        Dual {
            re,
            dx: self.dx.iter().map(|d| d * scale).collect(),
        }
    }
}

// Combines tangents of two operands, treating an empty tangent as zeros.
fn zip_dx(a: &[f64], ca: f64, b: &[f64], cb: f64) -> Vec<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Vec::new(),
        (false, true) => a.iter().map(|x| x * ca).collect(),
        (true, false) => b.iter().map(|x| x * cb).collect(),
        (false, false) => {
            debug_assert_eq!(a.len(), b.len(), "dual tangent width mismatch");
            a.iter().zip(b).map(|(x, y)| x * ca + y * cb).collect()
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual {
            re: self.re + rhs.re,
            dx: zip_dx(&self.dx, 1.0, &rhs.dx, 1.0),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual {
            re: self.re - rhs.re,
            dx: zip_dx(&self.dx, 1.0, &rhs.dx, -1.0),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual {
            re: self.re * rhs.re,
            dx: zip_dx(&self.dx, rhs.re, &rhs.dx, self.re),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        // d(a/b) = da/b - a db/b^2
        let inv = 1.0 / rhs.re;
        Dual {
            re: self.re * inv,
            dx: zip_dx(&self.dx, inv, &rhs.dx, -self.re * inv * inv),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(mut self) -> Dual {
        self.re = -self.re;
        for d in &mut self.dx {
            *d = -*d;
        }
        self
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, rhs: Dual) {
        self.re += rhs.re;
        if self.dx.is_empty() {
            self.dx = rhs.dx;
        } else if !rhs.dx.is_empty() {
            debug_assert_eq!(self.dx.len(), rhs.dx.len());
            for (d, r) in self.dx.iter_mut().zip(&rhs.dx) {
                *d += r;
            }
        }
    }
}

impl SubAssign for Dual {
    fn sub_assign(&mut self, rhs: Dual) {
        self.re -= rhs.re;
        if self.dx.is_empty() {
            self.dx = rhs.dx.iter().map(|d| -d).collect();
        } else if !rhs.dx.is_empty() {
            debug_assert_eq!(self.dx.len(), rhs.dx.len());
            for (d, r) in self.dx.iter_mut().zip(&rhs.dx) {
                *d -= r;
            }
        }
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }

    fn value(&self) -> f64 {
        self.re
    }

    fn exp(&self) -> Self {
        let e = self.re.exp();
        self.unary(e, e)
    }

    fn ln(&self) -> Self {
        self.unary(self.re.ln(), 1.0 / self.re)
    }

    fn sqrt(&self) -> Self {
        let s = self.re.sqrt();
        self.unary(s, 0.5 / s)
    }

    fn powi(&self, n: i32) -> Self {
        self.unary(self.re.powi(n), f64::from(n) * self.re.powi(n - 1))
    }

    fn add_prod(&mut self, a: &Self, b: &Self) {
        self.re += a.re * b.re;
        let w = a.dx.len().max(b.dx.len());
        if self.dx.is_empty() && w > 0 {
            self.dx.resize(w, 0.0);
        }
        if !a.dx.is_empty() {
            for (d, x) in self.dx.iter_mut().zip(&a.dx) {
                *d += b.re * x;
            }
        }
        if !b.dx.is_empty() {
            for (d, x) in self.dx.iter_mut().zip(&b.dx) {
                *d += a.re * x;
            }
        }
    }

    fn sub_prod(&mut self, a: &Self, b: &Self) {
        self.re -= a.re * b.re;
        let w = a.dx.len().max(b.dx.len());
        if self.dx.is_empty() && w > 0 {
            self.dx.resize(w, 0.0);
        }
        if !a.dx.is_empty() {
            for (d, x) in self.dx.iter_mut().zip(&a.dx) {
                *d -= b.re * x;
            }
        }
        if !b.dx.is_empty() {
            for (d, x) in self.dx.iter_mut().zip(&b.dx) {
                *d -= a.re * x;
            }
        }
    }
}

/// Central finite differences of `f` at `point` with a per-component relative
/// step. Test harness companion to the dual-number gradients.
pub fn central_differences<F>(f: F, point: &[f64], rel_step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let h = rel_step * point[i].abs().max(1.0);
        work[i] = point[i] + h;
        let fp = f(&work);
        work[i] = point[i] - h;
        let fm = f(&work);
        work[i] = point[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}
