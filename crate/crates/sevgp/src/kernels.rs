//! Covariance kernels and Gram-matrix construction.
//!
//! Four primitive kernels (constant, squared-exponential, ARD, polynomial)
//! plus unweighted sums of them. All exponential kernels use the convention
//!
//! ```text
//! k(x, x') = amplitude * exp(-0.5 * sum_k (x_k - x'_k)^2 / l_k^2)
//! ```
//!
//! i.e. lengthscales sit in the denominator and the squared-exponential is
//! the ARD kernel with one shared lengthscale. Positive hyperparameters are
//! optimized in log space, so trainability is tracked per hyperparameter
//! here and [`pack_params`]/[`unpack_params`] move them in and out of flat
//! log-vectors.
//!
//! Kernels are described in config files by a small expression grammar:
//!
//! ```text
//! kernel   := constant(<p>) | se(a=<p>, l=<p>) | ard(theta=<p>, l=<vec>)
//!           | poly(degree=<int>) | sum(kernel, kernel, ...)
//! <p>      := ["~"] number            -- "~" marks the value trainable
//! <vec>    := ["~"] "[" number, ... "]" | ["~"] splat(number, count)
//! ```
//!
//! e.g. `sum(constant(1.0), se(a=0.5, l=~1.0))` is a fixed constant plus a
//! squared-exponential with fixed amplitude and trainable lengthscale.

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::linalg::GMat;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

const MAX_SUM_DEPTH: usize = 4;

/// Symbolic kernel description with per-hyperparameter trainability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `k(x, x') = value`, value >= 0.
    Constant { value: f64, train_value: bool },
    /// Squared exponential with one shared lengthscale.
    SqExp {
        amplitude: f64,
        lengthscale: f64,
        train_amplitude: bool,
        train_lengthscale: bool,
    },
    /// Automatic relevance determination: one lengthscale per input dimension.
    Ard {
        theta: f64,
        lengthscales: Vec<f64>,
        train_theta: bool,
        train_lengthscales: bool,
    },
    /// `k(x, x') = (x . x')^degree`; no trainable hyperparameters.
    Polynomial { degree: u32 },
    /// Unweighted sum of child kernels.
    Sum { children: Vec<KernelSpec> },
}

impl KernelSpec {
    pub fn constant(value: f64) -> Self {
        KernelSpec::Constant {
            value,
            train_value: false,
        }
    }

    /// Fixed-amplitude squared exponential; the usual starting point is to
    /// mark the lengthscale trainable via [`KernelSpec::train_lengthscales`].
    pub fn sq_exp(amplitude: f64, lengthscale: f64) -> Self {
        KernelSpec::SqExp {
            amplitude,
            lengthscale,
            train_amplitude: false,
            train_lengthscale: false,
        }
    }

    pub fn ard(theta: f64, lengthscales: Vec<f64>) -> Self {
        KernelSpec::Ard {
            theta,
            lengthscales,
            train_theta: false,
            train_lengthscales: false,
        }
    }

    pub fn polynomial(degree: u32) -> Self {
        KernelSpec::Polynomial { degree }
    }

    pub fn sum(children: Vec<KernelSpec>) -> Self {
        KernelSpec::Sum { children }
    }

    /// Marks every lengthscale hyperparameter in the tree trainable.
    pub fn train_lengthscales(mut self) -> Self {
        self.set_train_lengthscales();
        self
    }

    fn set_train_lengthscales(&mut self) {
        match self {
            KernelSpec::SqExp {
                train_lengthscale, ..
            } => *train_lengthscale = true,
            KernelSpec::Ard {
                train_lengthscales, ..
            } => *train_lengthscales = true,
            KernelSpec::Sum { children } => {
                for c in children {
                    c.set_train_lengthscales();
                }
            }
            _ => {}
        }
    }

    /// Validates hyperparameter domains, sum arity, and nesting depth.
    pub fn validate(&self) -> Result<()> {
        self.validate_depth(0)
    }

    fn validate_depth(&self, depth: usize) -> Result<()> {
        match self {
            KernelSpec::Constant { value, train_value } => {
                if *value < 0.0 || !value.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "constant kernel value must be nonnegative, got {value}"
                    )));
                }
                if *train_value && *value == 0.0 {
                    return Err(Error::InvalidArgument(
                        "a trainable constant must be strictly positive (log-space training)"
                            .into(),
                    ));
                }
                Ok(())
            }
            KernelSpec::SqExp {
                amplitude,
                lengthscale,
                ..
            } => {
                for (name, v) in [("amplitude", amplitude), ("lengthscale", lengthscale)] {
                    if *v <= 0.0 || !v.is_finite() {
                        return Err(Error::InvalidArgument(format!(
                            "se kernel {name} must be strictly positive, got {v}"
                        )));
                    }
                }
                Ok(())
            }
            KernelSpec::Ard {
                theta,
                lengthscales,
                ..
            } => {
                if *theta <= 0.0 || !theta.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "ard theta must be strictly positive, got {theta}"
                    )));
                }
                if lengthscales.is_empty() {
                    return Err(Error::InvalidArgument(
                        "ard kernel needs at least one lengthscale".into(),
                    ));
                }
                if lengthscales.iter().any(|l| *l <= 0.0 || !l.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "ard lengthscales must all be strictly positive".into(),
                    ));
                }
                Ok(())
            }
            KernelSpec::Polynomial { degree } => {
                if *degree == 0 {
                    return Err(Error::InvalidArgument(
                        "polynomial degree must be positive".into(),
                    ));
                }
                Ok(())
            }
            KernelSpec::Sum { children } => {
                if children.is_empty() {
                    return Err(Error::InvalidArgument("sum kernel has no children".into()));
                }
                if depth + 1 > MAX_SUM_DEPTH {
                    return Err(Error::InvalidArgument(format!(
                        "kernel nesting deeper than {MAX_SUM_DEPTH} levels"
                    )));
                }
                for c in children {
                    c.validate_depth(depth + 1)?;
                }
                Ok(())
            }
        }
    }

    /// Input dimension demanded by the kernel, if any (`None` = any).
    pub fn input_dim(&self) -> Result<Option<usize>> {
        match self {
            KernelSpec::Ard { lengthscales, .. } => Ok(Some(lengthscales.len())),
            KernelSpec::Sum { children } => {
                let mut dim = None;
                for c in children {
                    match (dim, c.input_dim()?) {
                        (None, d) => dim = d,
                        (Some(_), None) => {}
                        (Some(a), Some(b)) if a == b => {}
                        (Some(a), Some(b)) => {
                            return Err(Error::DimensionMismatch(format!(
                                "sum children demand input dims {a} and {b}"
                            )))
                        }
                    }
                }
                Ok(dim)
            }
            _ => Ok(None),
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if let Some(d) = self.input_dim()? {
            if d != dim {
                return Err(Error::DimensionMismatch(format!(
                    "kernel expects {d}-dimensional inputs, got {dim}"
                )));
            }
        }
        Ok(())
    }

    /// Number of trainable hyperparameters.
    pub fn trainable_count(&self) -> usize {
        match self {
            KernelSpec::Constant { train_value, .. } => usize::from(*train_value),
            KernelSpec::SqExp {
                train_amplitude,
                train_lengthscale,
                ..
            } => usize::from(*train_amplitude) + usize::from(*train_lengthscale),
            KernelSpec::Ard {
                lengthscales,
                train_theta,
                train_lengthscales,
                ..
            } => {
                usize::from(*train_theta)
                    + if *train_lengthscales {
                        lengthscales.len()
                    } else {
                        0
                    }
            }
            KernelSpec::Polynomial { .. } => 0,
            KernelSpec::Sum { children } => children.iter().map(|c| c.trainable_count()).sum(),
        }
    }
}

/// Flattens the trainable hyperparameters into a log-space vector
/// (pre-order over the kernel tree).
pub fn pack_params(k: &KernelSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(k.trainable_count());
    pack_into(k, &mut out);
    out
}

fn pack_into(k: &KernelSpec, out: &mut Vec<f64>) {
    match k {
        KernelSpec::Constant { value, train_value } => {
            if *train_value {
                out.push(value.ln());
            }
        }
        KernelSpec::SqExp {
            amplitude,
            lengthscale,
            train_amplitude,
            train_lengthscale,
        } => {
            if *train_amplitude {
                out.push(amplitude.ln());
            }
            if *train_lengthscale {
                out.push(lengthscale.ln());
            }
        }
        KernelSpec::Ard {
            theta,
            lengthscales,
            train_theta,
            train_lengthscales,
        } => {
            if *train_theta {
                out.push(theta.ln());
            }
            if *train_lengthscales {
                out.extend(lengthscales.iter().map(|l| l.ln()));
            }
        }
        KernelSpec::Polynomial { .. } => {}
        KernelSpec::Sum { children } => {
            for c in children {
                pack_into(c, out);
            }
        }
    }
}

/// Inverse of [`pack_params`]: exponentiates `v` back into the trainable
/// slots of `k`, leaving fixed hyperparameters untouched.
pub fn unpack_params(k: &KernelSpec, v: &[f64]) -> Result<KernelSpec> {
    let expected = k.trainable_count();
    if v.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "kernel expects {expected} packed parameters, got {}",
            v.len()
        )));
    }
    let mut iter = v.iter().copied();
    let mut out = k.clone();
    unpack_from(&mut out, &mut iter);
    Ok(out)
}

fn unpack_from(k: &mut KernelSpec, v: &mut impl Iterator<Item = f64>) {
    match k {
        KernelSpec::Constant { value, train_value } => {
            if *train_value {
                *value = v.next().expect("length checked").exp();
            }
        }
        KernelSpec::SqExp {
            amplitude,
            lengthscale,
            train_amplitude,
            train_lengthscale,
        } => {
            if *train_amplitude {
                *amplitude = v.next().expect("length checked").exp();
            }
            if *train_lengthscale {
                *lengthscale = v.next().expect("length checked").exp();
            }
        }
        KernelSpec::Ard {
            theta,
            lengthscales,
            train_theta,
            train_lengthscales,
        } => {
            if *train_theta {
                *theta = v.next().expect("length checked").exp();
            }
            if *train_lengthscales {
                for l in lengthscales {
                    *l = v.next().expect("length checked").exp();
                }
            }
        }
        KernelSpec::Polynomial { .. } => {}
        KernelSpec::Sum { children } => {
            for c in children {
                unpack_from(c, v);
            }
        }
    }
}

/// Kernel with hyperparameters lowered to a concrete scalar type, ready for
/// evaluation. Trainable hyperparameters pass through the `seed` closure so
/// gradient evaluations can attach tangents; everything else is lifted as a
/// constant.
#[derive(Clone, Debug)]
pub(crate) enum KernelNode<T> {
    Constant(T),
    /// `amp * exp(-0.5 * sum d_k^2 * inv_sq[k])`; `inv_sq` has one entry for
    /// SqExp (shared) or one per dimension for ARD.
    Exponential {
        amp: T,
        inv_sq: Vec<T>,
        shared: bool,
    },
    Polynomial(i32),
    Sum(Vec<KernelNode<T>>),
}

pub(crate) fn lift<T: Scalar>(k: &KernelSpec, seed: &mut impl FnMut(f64) -> T) -> KernelNode<T> {
    let lift_param = |train: bool, v: f64, seed: &mut dyn FnMut(f64) -> T| {
        if train {
            seed(v)
        } else {
            T::from_f64(v)
        }
    };
    match k {
        KernelSpec::Constant { value, train_value } => {
            KernelNode::Constant(lift_param(*train_value, *value, seed))
        }
        KernelSpec::SqExp {
            amplitude,
            lengthscale,
            train_amplitude,
            train_lengthscale,
        } => {
            let amp = lift_param(*train_amplitude, *amplitude, seed);
            let l = lift_param(*train_lengthscale, *lengthscale, seed);
            let inv = l.clone() * l;
            KernelNode::Exponential {
                amp,
                inv_sq: vec![inv.recip()],
                shared: true,
            }
        }
        KernelSpec::Ard {
            theta,
            lengthscales,
            train_theta,
            train_lengthscales,
        } => {
            let amp = lift_param(*train_theta, *theta, seed);
            let inv_sq = lengthscales
                .iter()
                .map(|l| {
                    let l = lift_param(*train_lengthscales, *l, seed);
                    (l.clone() * l).recip()
                })
                .collect();
            KernelNode::Exponential {
                amp,
                inv_sq,
                shared: false,
            }
        }
        KernelSpec::Polynomial { degree } => KernelNode::Polynomial(*degree as i32),
        KernelSpec::Sum { children } => {
            KernelNode::Sum(children.iter().map(|c| lift(c, seed)).collect())
        }
    }
}

pub(crate) fn eval_node<T: Scalar>(node: &KernelNode<T>, x: &[T], y: &[T]) -> T {
    match node {
        KernelNode::Constant(c) => c.clone(),
        KernelNode::Exponential {
            amp,
            inv_sq,
            shared,
        } => {
            let mut expo = T::zero();
            if *shared {
                let mut d2 = T::zero();
                for (xi, yi) in x.iter().zip(y) {
                    let d = xi.clone() - yi.clone();
                    d2.add_prod(&d, &d);
                }
                expo.add_prod(&d2, &inv_sq[0]);
            } else {
                for ((xi, yi), w) in x.iter().zip(y).zip(inv_sq) {
                    let d = xi.clone() - yi.clone();
                    let d2 = d.clone() * d;
                    expo.add_prod(&d2, w);
                }
            }
            amp.clone() * (expo * T::from_f64(-0.5)).exp()
        }
        KernelNode::Polynomial(degree) => {
            let mut dot = T::zero();
            for (xi, yi) in x.iter().zip(y) {
                dot.add_prod(xi, yi);
            }
            dot.powi(*degree)
        }
        KernelNode::Sum(children) => {
            let mut acc = T::zero();
            for c in children {
                acc += eval_node(c, x, y);
            }
            acc
        }
    }
}

/// Gram matrix over generic scalars: `out[i][j] = k(x.row(i), y.row(j))`.
pub(crate) fn gram_node<T: Scalar>(node: &KernelNode<T>, x: &GMat<T>, y: &GMat<T>) -> GMat<T> {
    assert_eq!(x.cols(), y.cols(), "gram inputs must share the column count");
    GMat::from_fn(x.rows(), y.rows(), |i, j| eval_node(node, x.row(i), y.row(j)))
}

/// Diagonal of the symmetric Gram matrix: `out[i] = k(x.row(i), x.row(i))`.
pub(crate) fn gram_diag_node<T: Scalar>(node: &KernelNode<T>, x: &GMat<T>) -> Vec<T> {
    (0..x.rows())
        .map(|i| eval_node(node, x.row(i), x.row(i)))
        .collect()
}

fn lift_f64(k: &KernelSpec) -> KernelNode<f64> {
    lift(k, &mut |v| v)
}

/// Evaluates `k(x, x')`.
pub fn eval(k: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "kernel arguments have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    k.check_dim(x.len())?;
    Ok(eval_node(&lift_f64(k), x, y))
}

/// Gram matrix `K[(i,j)] = k(x_i, y_j)` over the rows of two input matrices.
pub fn gram(k: &KernelSpec, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "gram inputs have {} and {} columns",
            x.ncols(),
            y.ncols()
        )));
    }
    k.check_dim(x.ncols())?;
    let node = lift_f64(k);
    let gx = GMat::from_dmatrix(x);
    let gy = GMat::from_dmatrix(y);
    Ok(gram_node(&node, &gx, &gy).to_dmatrix())
}

/// Symmetric Gram matrix of `x` with itself.
pub fn gram_sym(k: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    gram(k, x, x)
}

// ---------------------------------------------------------------------------
// Config-text expression grammar
// ---------------------------------------------------------------------------

/// Parses a kernel expression such as `sum(constant(1.0), se(a=0.5, l=~1.0))`.
pub fn parse_kernel(text: &str) -> Result<KernelSpec> {
    let mut p = Parser {
        chars: text.char_indices().peekable(),
        text,
    };
    let k = p.parse_kernel()?;
    p.skip_ws();
    if let Some((pos, c)) = p.chars.peek().copied() {
        return Err(Error::KernelParse(format!(
            "unexpected trailing input '{c}' at byte {pos}"
        )));
    }
    k.validate()?;
    Ok(k)
}

/// Renders a kernel back into the expression grammar (inverse of
/// [`parse_kernel`] up to number formatting).
pub fn to_config_string(k: &KernelSpec) -> String {
    fn param(v: f64, train: bool) -> String {
        if train {
            format!("~{v}")
        } else {
            format!("{v}")
        }
    }
    match k {
        KernelSpec::Constant { value, train_value } => {
            format!("constant({})", param(*value, *train_value))
        }
        KernelSpec::SqExp {
            amplitude,
            lengthscale,
            train_amplitude,
            train_lengthscale,
        } => format!(
            "se(a={}, l={})",
            param(*amplitude, *train_amplitude),
            param(*lengthscale, *train_lengthscale)
        ),
        KernelSpec::Ard {
            theta,
            lengthscales,
            train_theta,
            train_lengthscales,
        } => {
            let ls = lengthscales
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            format!(
                "ard(theta={}, l={}[{}])",
                param(*theta, *train_theta),
                if *train_lengthscales { "~" } else { "" },
                ls
            )
        }
        KernelSpec::Polynomial { degree } => format!("poly(degree={degree})"),
        KernelSpec::Sum { children } => {
            let inner = children
                .iter()
                .map(to_config_string)
                .collect::<Vec<_>>()
                .join(", ");
            format!("sum({inner})")
        }
    }
}

struct Parser<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    text: &'a str,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while matches!(self.chars.peek(), Some((_, c)) if c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn expect(&mut self, expected: char) -> Result<()> {
        self.skip_ws();
        match self.chars.next() {
            Some((_, c)) if c == expected => Ok(()),
            Some((pos, c)) => Err(Error::KernelParse(format!(
                "expected '{expected}' at byte {pos}, found '{c}'"
            ))),
            None => Err(Error::KernelParse(format!(
                "expected '{expected}', found end of input"
            ))),
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let mut out = String::new();
        while matches!(self.chars.peek(), Some((_, c)) if c.is_ascii_alphanumeric() || *c == '_') {
            out.push(self.chars.next().unwrap().1);
        }
        if out.is_empty() {
            Err(Error::KernelParse(format!(
                "expected an identifier near '{}'",
                self.rest_preview()
            )))
        } else {
            Ok(out)
        }
    }

    fn rest_preview(&mut self) -> String {
        match self.chars.peek() {
            Some((pos, _)) => self.text[*pos..].chars().take(16).collect(),
            None => "<end>".into(),
        }
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let mut out = String::new();
        while matches!(self.chars.peek(), Some((_, c))
            if c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'))
        {
            out.push(self.chars.next().unwrap().1);
        }
        out.parse::<f64>().map_err(|_| {
            Error::KernelParse(format!("expected a number, found '{out}' before '{}'", {
                let p = self.rest_preview();
                p
            }))
        })
    }

    /// `["~"] number` -> (value, trainable)
    fn param(&mut self) -> Result<(f64, bool)> {
        self.skip_ws();
        let train = matches!(self.chars.peek(), Some((_, '~')));
        if train {
            self.chars.next();
        }
        Ok((self.number()?, train))
    }

    fn key(&mut self, name: &str) -> Result<()> {
        let got = self.ident()?;
        if got != name {
            return Err(Error::KernelParse(format!(
                "expected parameter '{name}', found '{got}'"
            )));
        }
        self.expect('=')
    }

    /// `["~"] ([v, v, ...] | splat(v, n))` -> (values, trainable)
    fn vector(&mut self) -> Result<(Vec<f64>, bool)> {
        self.skip_ws();
        let train = matches!(self.chars.peek(), Some((_, '~')));
        if train {
            self.chars.next();
        }
        self.skip_ws();
        match self.chars.peek() {
            Some((_, '[')) => {
                self.chars.next();
                let mut vals = vec![self.number()?];
                loop {
                    self.skip_ws();
                    match self.chars.next() {
                        Some((_, ',')) => vals.push(self.number()?),
                        Some((_, ']')) => break,
                        other => {
                            return Err(Error::KernelParse(format!(
                                "expected ',' or ']' in lengthscale list, found {other:?}"
                            )))
                        }
                    }
                }
                Ok((vals, train))
            }
            _ => {
                let name = self.ident()?;
                if name != "splat" {
                    return Err(Error::KernelParse(format!(
                        "expected '[' or 'splat', found '{name}'"
                    )));
                }
                self.expect('(')?;
                let v = self.number()?;
                self.expect(',')?;
                let n = self.number()?;
                self.expect(')')?;
                if n < 1.0 || n.fract() != 0.0 {
                    return Err(Error::KernelParse(format!(
                        "splat count must be a positive integer, got {n}"
                    )));
                }
                Ok((vec![v; n as usize], train))
            }
        }
    }

    fn parse_kernel(&mut self) -> Result<KernelSpec> {
        let name = self.ident()?;
        self.expect('(')?;
        let spec = match name.as_str() {
            "constant" => {
                let (value, train_value) = self.param()?;
                KernelSpec::Constant { value, train_value }
            }
            "se" => {
                self.key("a")?;
                let (amplitude, train_amplitude) = self.param()?;
                self.expect(',')?;
                self.key("l")?;
                let (lengthscale, train_lengthscale) = self.param()?;
                KernelSpec::SqExp {
                    amplitude,
                    lengthscale,
                    train_amplitude,
                    train_lengthscale,
                }
            }
            "ard" => {
                self.key("theta")?;
                let (theta, train_theta) = self.param()?;
                self.expect(',')?;
                self.key("l")?;
                let (lengthscales, train_lengthscales) = self.vector()?;
                KernelSpec::Ard {
                    theta,
                    lengthscales,
                    train_theta,
                    train_lengthscales,
                }
            }
            "poly" => {
                self.key("degree")?;
                let d = self.number()?;
                if d < 1.0 || d.fract() != 0.0 {
                    return Err(Error::KernelParse(format!(
                        "poly degree must be a positive integer, got {d}"
                    )));
                }
                KernelSpec::Polynomial { degree: d as u32 }
            }
            "sum" => {
                let mut children = vec![self.parse_kernel()?];
                loop {
                    self.skip_ws();
                    match self.chars.peek() {
                        Some((_, ',')) => {
                            self.chars.next();
                            children.push(self.parse_kernel()?);
                        }
                        _ => break,
                    }
                }
                return {
                    self.expect(')')?;
                    Ok(KernelSpec::Sum { children })
                };
            }
            other => {
                return Err(Error::KernelParse(format!(
                    "unknown kernel '{other}' (expected constant/se/ard/poly/sum)"
                )))
            }
        };
        self.expect(')')?;
        Ok(spec)
    }
}
