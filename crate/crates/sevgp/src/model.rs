//! The self-explaining variational posterior.
//!
//! A model holds one sparse-GP coefficient block per feature; the target
//! process is the sum of coefficient processes multiplied elementwise by
//! their feature columns,
//!
//! ```text
//! f(X) = sum_k f_M^(k)(X) .* X_k
//! ```
//!
//! so the predictive mean decomposes exactly into per-feature contributions
//! (see [`SevgpModel::explain`]). The block-level linear algebra is generic
//! over [`Scalar`] because the training objectives re-run it with dual
//! numbers to obtain gradients.

use crate::autodiff::Scalar;
use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::gaussian::GaussianDist;
use crate::kernels::{self, KernelNode, KernelSpec};
use crate::linalg::{cholesky_jittered, CholFactor, GMat, DEFAULT_JITTER};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Which training objective the model is built for. The variants differ in
/// where prior knowledge enters: weight-space priors on the coefficient
/// processes (V41), a function-space prior on the composed predictor (V42),
/// or both (V43).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "41")]
    V41,
    #[serde(rename = "42")]
    V42,
    #[serde(rename = "43")]
    V43,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::V41 => write!(f, "41"),
            Variant::V42 => write!(f, "42"),
            Variant::V43 => write!(f, "43"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "41" | "4.1" | "v41" => Ok(Variant::V41),
            "42" | "4.2" | "v42" => Ok(Variant::V42),
            "43" | "4.3" | "v43" => Ok(Variant::V43),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected 41, 42 or 43)"
            ))),
        }
    }
}

/// Sparse variational GP over one feature's coefficient function:
/// inducing locations `Z`, variational distribution `N(a, L L^T)` over the
/// inducing values, and the kernel of the coefficient process.
#[derive(Clone, Debug)]
pub struct CoefficientBlock {
    /// M x K inducing locations (K = model feature count, bias included).
    pub z: DMatrix<f64>,
    /// Variational mean over inducing values.
    pub a: DVector<f64>,
    /// Lower-triangular factor with positive diagonal; S = L L^T.
    pub l: DMatrix<f64>,
    pub kernel: KernelSpec,
    /// Which feature column this block's coefficient multiplies.
    pub feature_index: usize,
}

impl CoefficientBlock {
    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    /// Variational covariance `S = L L^T`.
    pub fn s(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    pub fn validate(&self, feature_count: usize) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::Schema("block has zero inducing points".into()));
        }
        if self.z.ncols() != feature_count {
            return Err(Error::Schema(format!(
                "inducing locations have {} columns, model has {feature_count} features",
                self.z.ncols()
            )));
        }
        if self.a.len() != m || self.l.nrows() != m || self.l.ncols() != m {
            return Err(Error::Schema(format!(
                "block shapes disagree: Z is {m}x{}, a has {}, L is {}x{}",
                self.z.ncols(),
                self.a.len(),
                self.l.nrows(),
                self.l.ncols()
            )));
        }
        for i in 0..m {
            if self.l[(i, i)] <= 0.0 || !self.l[(i, i)].is_finite() {
                return Err(Error::Schema(format!(
                    "L diagonal entry {i} is {} (must be strictly positive)",
                    self.l[(i, i)]
                )));
            }
            for j in (i + 1)..m {
                if self.l[(i, j)] != 0.0 {
                    return Err(Error::Schema(format!(
                        "L has a nonzero above-diagonal entry at ({i},{j})"
                    )));
                }
            }
        }
        if self.feature_index >= feature_count {
            return Err(Error::Schema(format!(
                "feature index {} out of range for {feature_count} features",
                self.feature_index
            )));
        }
        self.kernel.validate()?;
        if let Some(d) = self.kernel.input_dim()? {
            if d != feature_count {
                return Err(Error::Schema(format!(
                    "block kernel expects {d}-dimensional inputs, model has {feature_count}"
                )));
            }
        }
        Ok(())
    }

    /// `Lambda = K_XM (K_MM + jitter I)^-1` via the factored solve.
    pub fn lambda_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let node = lift_f64(&self.kernel);
        let bm = block_math(&node, &GMat::from_dmatrix(&self.z), &GMat::from_dmatrix(x))?;
        Ok(bm.lam.to_dmatrix())
    }

    /// Marginal coefficient posterior at the rows of `x`:
    /// mean `Lambda a`, covariance `K_XX - Lambda (K_MM - S) Lambda^T`.
    pub fn coeff_posterior(&self, x: &DMatrix<f64>) -> Result<GaussianDist> {
        let (mean, cov) = self.posterior_moments(x)?;
        GaussianDist::new(mean, cov)
    }

    /// Posterior moments without factoring the covariance.
    pub(crate) fn posterior_moments(
        &self,
        x: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let node = lift_f64(&self.kernel);
        let gx = GMat::from_dmatrix(x);
        let bm = block_math(&node, &GMat::from_dmatrix(&self.z), &gx)?;
        let kxx = kernels::gram_node(&node, &gx, &gx);
        let a: Vec<f64> = self.a.iter().copied().collect();
        let mu = bm.mu(&a);
        let cov = bm.marginal_cov(&kxx, &GMat::from_dmatrix(&self.l));
        Ok((DVector::from_vec(mu), cov.to_dmatrix()))
    }

    /// Conditional moments given inducing values `u`:
    /// mean `Lambda u`, covariance `K_XX - Lambda K_MM Lambda^T`.
    pub(crate) fn conditional_moments(
        &self,
        x: &DMatrix<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if u.len() != self.m() {
            return Err(Error::DimensionMismatch(format!(
                "{} inducing values for {} inducing points",
                u.len(),
                self.m()
            )));
        }
        let node = lift_f64(&self.kernel);
        let gx = GMat::from_dmatrix(x);
        let bm = block_math(&node, &GMat::from_dmatrix(&self.z), &gx)?;
        let kxx = kernels::gram_node(&node, &gx, &gx);
        let uv: Vec<f64> = u.iter().copied().collect();
        let mean = bm.mu(&uv);
        let cov = bm.conditional_cov(&kxx);
        Ok((DVector::from_vec(mean), cov.to_dmatrix()))
    }
}

/// Per-feature record produced by [`SevgpModel::explain`].
#[derive(Clone, Debug, Serialize)]
pub struct Explanation {
    pub feature_index: usize,
    /// Posterior mean of the coefficient function at the query point.
    pub coeff_mean: f64,
    /// Posterior variance of the coefficient function at the query point.
    pub coeff_var: f64,
    /// `coeff_mean * x_k`; contributions sum exactly to the predictive mean.
    pub contribution: f64,
}

/// The full self-explaining variational model.
#[derive(Clone, Debug)]
pub struct SevgpModel {
    pub blocks: Vec<CoefficientBlock>,
    /// Gaussian likelihood noise variance.
    pub sigma2: f64,
    pub variant: Variant,
    /// Function-space prior over the composed predictor (V42/V43).
    pub full_prior_kernel: Option<KernelSpec>,
    /// Fixed priors for the coefficient processes. `None` ties each prior to
    /// its block's own kernel (the usual sparse-GP choice, and the one under
    /// which the ELBO is an actual evidence bound).
    pub coeff_prior_kernels: Option<Vec<KernelSpec>>,
    /// Prepend a constant 1-column so an intercept coefficient exists.
    pub include_bias_column: bool,
}

impl SevgpModel {
    pub fn new(
        blocks: Vec<CoefficientBlock>,
        sigma2: f64,
        variant: Variant,
        full_prior_kernel: Option<KernelSpec>,
        coeff_prior_kernels: Option<Vec<KernelSpec>>,
        include_bias_column: bool,
    ) -> Result<Self> {
        let model = SevgpModel {
            blocks,
            sigma2,
            variant,
            full_prior_kernel,
            coeff_prior_kernels,
            include_bias_column,
        };
        model.validate()?;
        Ok(model)
    }

    /// Feature count in model space (bias column included if enabled).
    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    /// Feature count expected from raw data (bias column excluded).
    pub fn data_feature_count(&self) -> usize {
        self.k() - usize::from(self.include_bias_column)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Schema("model has no coefficient blocks".into()));
        }
        if self.sigma2 <= 0.0 || !self.sigma2.is_finite() {
            return Err(Error::Schema(format!(
                "noise variance must be strictly positive, got {}",
                self.sigma2
            )));
        }
        let k = self.k();
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(k)?;
            if b.feature_index != i {
                return Err(Error::Schema(format!(
                    "block {i} claims feature index {}; blocks must be stored in feature order",
                    b.feature_index
                )));
            }
        }
        match self.variant {
            Variant::V41 => {}
            Variant::V42 | Variant::V43 => {
                if self.full_prior_kernel.is_none() {
                    return Err(Error::Schema(format!(
                        "variant {} requires a full-process prior kernel",
                        self.variant
                    )));
                }
            }
        }
        if let Some(pk) = &self.full_prior_kernel {
            pk.validate()?;
        }
        if let Some(priors) = &self.coeff_prior_kernels {
            if priors.len() != k {
                return Err(Error::Schema(format!(
                    "{} coefficient prior kernels for {k} blocks",
                    priors.len()
                )));
            }
            for p in priors {
                p.validate()?;
            }
        }
        Ok(())
    }

    /// Prior kernel for block `k`'s coefficient process: the fixed override
    /// if one was given, otherwise the block's own kernel.
    pub fn coeff_prior_kernel(&self, k: usize) -> &KernelSpec {
        match &self.coeff_prior_kernels {
            Some(priors) => &priors[k],
            None => &self.blocks[k].kernel,
        }
    }

    /// Maps raw data rows into model feature space (prepends the bias
    /// column when enabled) and checks the column count.
    pub fn augment(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let expected = self.data_feature_count();
        if x.ncols() != expected {
            return Err(Error::DimensionMismatch(format!(
                "model expects {expected} feature columns, got {}",
                x.ncols()
            )));
        }
        if !self.include_bias_column {
            return Ok(x.clone());
        }
        Ok(DMatrix::from_fn(x.nrows(), expected + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                x[(i, j - 1)]
            }
        }))
    }

    /// Marginal of the target process at the rows of `x`:
    /// mean `sum_k mu^(k) .* X_k`, covariance `sum_k Sigma^(k) .* X_k X_k^T`.
    pub fn predict_f(&self, x: &DMatrix<f64>) -> Result<GaussianDist> {
        let (mean, cov) = self.predict_f_moments(x)?;
        GaussianDist::new(mean, cov)
    }

    pub(crate) fn predict_f_moments(
        &self,
        x: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let xa = self.augment(x)?;
        let n = xa.nrows();
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        for b in &self.blocks {
            let (mu, sig) = b.posterior_moments(&xa)?;
            let col = xa.column(b.feature_index);
            for i in 0..n {
                mean[i] += mu[i] * col[i];
                for j in 0..n {
                    cov[(i, j)] += sig[(i, j)] * col[i] * col[j];
                }
            }
        }
        Ok((mean, cov))
    }

    /// Target-process distribution conditioned on inducing values `u` (one
    /// vector per block): mean `sum_k Lambda^(k) u^(k) .* X_k`, covariance
    /// `sum_k (K^(k) - Lambda^(k) K_MM^(k) Lambda^(k)T) .* X_k X_k^T`.
    pub fn conditional_f_given_inducing(
        &self,
        x: &DMatrix<f64>,
        u: &[DVector<f64>],
    ) -> Result<GaussianDist> {
        if u.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "{} inducing-value vectors for {} blocks",
                u.len(),
                self.k()
            )));
        }
        let xa = self.augment(x)?;
        let n = xa.nrows();
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        for (b, ub) in self.blocks.iter().zip(u) {
            let (mu, sig) = b.conditional_moments(&xa, ub)?;
            let col = xa.column(b.feature_index);
            for i in 0..n {
                mean[i] += mu[i] * col[i];
                for j in 0..n {
                    cov[(i, j)] += sig[(i, j)] * col[i] * col[j];
                }
            }
        }
        GaussianDist::new(mean, cov)
    }

    /// Predictive distribution over observations: `predict_f` plus
    /// `sigma2 I` on the covariance.
    pub fn predict_y(&self, x: &DMatrix<f64>) -> Result<GaussianDist> {
        let (mean, mut cov) = self.predict_f_moments(x)?;
        for i in 0..cov.nrows() {
            cov[(i, i)] += self.sigma2;
        }
        GaussianDist::new(mean, cov)
    }

    /// Per-feature decomposition of the prediction at a single point.
    pub fn explain(&self, x: &DVector<f64>) -> Result<Vec<Explanation>> {
        let row = DMatrix::from_fn(1, x.len(), |_, j| x[j]);
        let xa = self.augment(&row)?;
        let mut out = Vec::with_capacity(self.k());
        for b in &self.blocks {
            let (mu, sig) = b.posterior_moments(&xa)?;
            let xk = xa[(0, b.feature_index)];
            out.push(Explanation {
                feature_index: b.feature_index,
                coeff_mean: mu[0],
                coeff_var: sig[(0, 0)],
                contribution: mu[0] * xk,
            });
        }
        Ok(out)
    }

    /// Covariance of the additive coefficient construction under the
    /// (unconditioned) coefficient priors:
    /// `sum_k K_XX^(k) .* X_k X_k^T` with `K^(k)` from the prior kernel of
    /// block `k`.
    pub fn gpx_prior_cov(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let xa = self.augment(x)?;
        let n = xa.nrows();
        let mut cov = DMatrix::zeros(n, n);
        for b in &self.blocks {
            let kxx = kernels::gram_sym(self.coeff_prior_kernel(b.feature_index), &xa)?;
            let col = xa.column(b.feature_index);
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] += kxx[(i, j)] * col[i] * col[j];
                }
            }
        }
        Ok(cov)
    }
}

// ---------------------------------------------------------------------------
// Generic block linear algebra (shared with the objective/gradient path)
// ---------------------------------------------------------------------------

pub(crate) fn lift_f64(k: &KernelSpec) -> KernelNode<f64> {
    kernels::lift(k, &mut |v| v)
}

/// The factored quantities every block computation needs at input rows `x`:
/// `L_K = chol(K_MM + jitter I)`, `V = L_K^-1 K_MX` and
/// `Lambda = K_XM (K_MM + jitter I)^-1 = (L_K^-T V)^T`.
pub(crate) struct BlockMath<T> {
    pub l_k: CholFactor<T>,
    pub v: GMat<T>,
    pub lam: GMat<T>,
}

pub(crate) fn block_math<T: Scalar>(
    node: &KernelNode<T>,
    z: &GMat<T>,
    x: &GMat<T>,
) -> Result<BlockMath<T>> {
    let k_mm = kernels::gram_node(node, z, z);
    let l_k = cholesky_jittered(&k_mm, DEFAULT_JITTER)?;
    let k_mx = kernels::gram_node(node, z, x);
    let v = l_k.solve_lower_mat(&k_mx);
    let lam = l_k.solve_lower_transpose_mat(&v).transpose();
    Ok(BlockMath { l_k, v, lam })
}

impl<T: Scalar> BlockMath<T> {
    /// `Lambda a`.
    pub fn mu(&self, a: &[T]) -> Vec<T> {
        self.lam.matvec(a)
    }

    /// `W = Lambda L_S` (rows of `x` by inducing count).
    pub fn w(&self, l_s: &GMat<T>) -> GMat<T> {
        self.lam.matmul(l_s)
    }

    /// Marginal covariance `K_XX - V^T V + W W^T`
    /// (= `K_XX - Lambda (K_MM - S) Lambda^T`).
    pub fn marginal_cov(&self, kxx: &GMat<T>, l_s: &GMat<T>) -> GMat<T> {
        let w = self.w(l_s);
        let mut out = self.conditional_cov(kxx);
        let d = out.rows();
        for i in 0..d {
            for j in 0..d {
                let mut acc = out.get(i, j).clone();
                for m in 0..w.cols() {
                    acc.add_prod(w.get(i, m), w.get(j, m));
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Conditional covariance `K_XX - V^T V` (= `K_XX - Lambda K_MM Lambda^T`).
    pub fn conditional_cov(&self, kxx: &GMat<T>) -> GMat<T> {
        let d = kxx.rows();
        GMat::from_fn(d, d, |i, j| {
            let mut acc = kxx.get(i, j).clone();
            for m in 0..self.v.rows() {
                acc.sub_prod(self.v.get(m, i), self.v.get(m, j));
            }
            acc
        })
    }

    /// Diagonal of the marginal covariance, given `diag(K_XX)`.
    pub fn marginal_diag(&self, kdiag: &[T], l_s: &GMat<T>) -> Vec<T> {
        let w = self.w(l_s);
        kdiag
            .iter()
            .enumerate()
            .map(|(i, kd)| {
                let mut acc = kd.clone();
                for m in 0..self.v.rows() {
                    acc.sub_prod(self.v.get(m, i), self.v.get(m, i));
                }
                for m in 0..w.cols() {
                    acc.add_prod(w.get(i, m), w.get(i, m));
                }
                acc
            })
            .collect()
    }
}

/// `KL(N(a, L_S L_S^T) || N(0, P))` where `l_p` factors the prior covariance:
/// `0.5 [ ln|P| - ln|S| - M + ||L_P^-1 L_S||_F^2 + ||L_P^-1 a||^2 ]`.
pub(crate) fn kl_gaussian_chol<T: Scalar>(a: &[T], l_s: &GMat<T>, l_p: &CholFactor<T>) -> T {
    let m = l_p.dim();
    let mut ln_det_s = T::zero();
    for i in 0..m {
        ln_det_s += l_s.get(i, i).ln();
    }
    let ln_det_s = ln_det_s.clone() + ln_det_s;

    let w = l_p.solve_lower_mat(l_s);
    let mut trace = T::zero();
    for i in 0..m {
        for j in 0..m {
            trace.add_prod(w.get(i, j), w.get(i, j));
        }
    }
    let v = l_p.solve_lower(a);
    let mut maha = T::zero();
    for vi in &v {
        maha.add_prod(vi, vi);
    }
    (l_p.log_det() - ln_det_s - T::from_f64(m as f64) + trace + maha) * T::from_f64(0.5)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Content of a model file: the model plus optional standardization
/// statistics when it was trained on transformed data.
#[derive(Clone, Debug)]
pub struct SavedModel {
    pub model: SevgpModel,
    pub standardization: Option<Standardization>,
}

#[derive(Serialize, Deserialize)]
struct BlockSer {
    feature_index: usize,
    kernel: KernelSpec,
    z: Vec<Vec<f64>>,
    a: Vec<f64>,
    l: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelSer {
    format_version: u32,
    variant: Variant,
    sigma2: f64,
    include_bias_column: bool,
    full_prior_kernel: Option<KernelSpec>,
    coeff_prior_kernels: Option<Vec<KernelSpec>>,
    blocks: Vec<BlockSer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    standardization: Option<Standardization>,
}

const FORMAT_VERSION: u32 = 1;

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn rows_mat(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::Schema(format!("{what} has no rows")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Schema(format!("{what} rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl SevgpModel {
    pub fn to_json(&self, standardization: Option<&Standardization>) -> Result<String> {
        let ser = ModelSer {
            format_version: FORMAT_VERSION,
            variant: self.variant,
            sigma2: self.sigma2,
            include_bias_column: self.include_bias_column,
            full_prior_kernel: self.full_prior_kernel.clone(),
            coeff_prior_kernels: self.coeff_prior_kernels.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSer {
                    feature_index: b.feature_index,
                    kernel: b.kernel.clone(),
                    z: mat_rows(&b.z),
                    a: b.a.iter().copied().collect(),
                    l: mat_rows(&b.l),
                })
                .collect(),
            standardization: standardization.cloned(),
        };
        serde_json::to_string_pretty(&ser).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn save_file(&self, path: &Path, standardization: Option<&Standardization>) -> Result<()> {
        let mut text = self.to_json(standardization)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<SavedModel> {
        let ser: ModelSer =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("model file: {e}")))?;
        if ser.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                ser.format_version
            )));
        }
        let blocks = ser
            .blocks
            .into_iter()
            .map(|b| {
                Ok(CoefficientBlock {
                    z: rows_mat(&b.z, "inducing matrix Z")?,
                    a: DVector::from_vec(b.a),
                    l: rows_mat(&b.l, "variational factor L")?,
                    kernel: b.kernel,
                    feature_index: b.feature_index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = SevgpModel::new(
            blocks,
            ser.sigma2,
            ser.variant,
            ser.full_prior_kernel,
            ser.coeff_prior_kernels,
            ser.include_bias_column,
        )?;
        Ok(SavedModel {
            model,
            standardization: ser.standardization,
        })
    }

    pub fn load_file(path: &Path) -> Result<SavedModel> {
        let text = std::fs::read_to_string(path)?;
        SevgpModel::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use nalgebra::dmatrix;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lower(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                rng.random_range(0.3..1.2)
            } else if j < i {
                rng.random_range(-0.4..0.4)
            } else {
                0.0
            }
        })
    }

    fn random_block(rng: &mut ChaCha8Rng, m: usize, k: usize, feature_index: usize) -> CoefficientBlock {
        CoefficientBlock {
            z: DMatrix::from_fn(m, k, |_, _| rng.random_range(-2.0..2.0)),
            a: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
            l: random_lower(rng, m),
            kernel: KernelSpec::sq_exp(rng.random_range(0.4..1.5), rng.random_range(0.6..2.0)),
            feature_index,
        }
    }

    fn random_model(rng: &mut ChaCha8Rng, k: usize, m: usize) -> SevgpModel {
        let blocks = (0..k).map(|i| random_block(rng, m, k, i)).collect();
        SevgpModel::new(
            blocks,
            rng.random_range(0.05..0.5),
            Variant::V41,
            None,
            None,
            false,
        )
        .unwrap()
    }

    #[test]
    fn lambda_at_inducing_points_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let b = random_block(&mut rng, 4, 2, 0);
        let lam = b.lambda_matrix(&b.z).unwrap();
        let id = DMatrix::<f64>::identity(4, 4);
        assert!((lam - id).amax() < 1e-6);
    }

    #[test]
    fn lambda_constant_kernel_is_ones() {
        let b = CoefficientBlock {
            z: dmatrix![0.7],
            a: nalgebra::dvector![0.0],
            l: dmatrix![1.0],
            kernel: KernelSpec::constant(2.5),
            feature_index: 0,
        };
        let x = dmatrix![-1.0; 0.0; 3.0];
        let lam = b.lambda_matrix(&x).unwrap();
        for v in lam.iter() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lambda_matches_explicit_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..10 {
            let b = random_block(&mut rng, 3, 2, 0);
            let x = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-2.0..2.0));
            let lam = b.lambda_matrix(&x).unwrap();

            let node = lift_f64(&b.kernel);
            let gz = GMat::from_dmatrix(&b.z);
            let fac = block_math(&node, &gz, &GMat::from_dmatrix(&x)).unwrap();
            let mut kmm = kernels::gram_sym(&b.kernel, &b.z).unwrap();
            for i in 0..3 {
                kmm[(i, i)] += fac.l_k.applied_jitter();
            }
            let kxm = kernels::gram(&b.kernel, &x, &b.z).unwrap();
            let oracle = kxm * kmm.try_inverse().unwrap();
            assert!((lam - oracle).amax() < 1e-8);
        }
    }

    #[test]
    fn posterior_at_prior_parameters_is_prior_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut b = random_block(&mut rng, 4, 1, 0);
        b.a.fill(0.0);
        let kmm = kernels::gram_sym(&b.kernel, &b.z).unwrap();
        b.l = crate::gaussian::cholesky_psd(&kmm, 1e-8)
            .unwrap()
            .lower()
            .to_dmatrix();

        let x = DMatrix::from_fn(5, 1, |_, _| rng.random_range(-2.0..2.0));
        let post = b.coeff_posterior(&x).unwrap();
        let kxx = kernels::gram_sym(&b.kernel, &x).unwrap();
        assert!(post.mean().amax() < 1e-12);
        assert!((post.cov() - kxx).amax() < 1e-6);
    }

    #[test]
    fn posterior_mean_at_inducing_points_is_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let b = random_block(&mut rng, 4, 2, 0);
        let post = b.coeff_posterior(&b.z).unwrap();
        assert!((post.mean() - &b.a).amax() < 1e-5);
    }

    #[test]
    fn coeff_posterior_matches_monte_carlo_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let b = random_block(&mut rng, 3, 1, 0);
        let x = DMatrix::from_fn(4, 1, |_, _| rng.random_range(-2.0..2.0));
        let post = b.coeff_posterior(&x).unwrap();
        let (_, cond_cov) = b.conditional_moments(&x, &b.a).unwrap();

        let lam = b.lambda_matrix(&x).unwrap();
        let q_u = GaussianDist::new(b.a.clone(), b.s()).unwrap();
        let samples = 100_000usize;
        let n = x.nrows();
        let mut mean_acc = DVector::<f64>::zeros(n);
        let mut cov_acc = DMatrix::<f64>::zeros(n, n);
        let mut draws: Vec<DVector<f64>> = Vec::with_capacity(samples);
        for _ in 0..samples {
            let g = &lam * q_u.sample(&mut rng);
            mean_acc += &g;
            draws.push(g);
        }
        let mc_mean = mean_acc / samples as f64;
        for g in &draws {
            let c = g - &mc_mean;
            cov_acc += &c * c.transpose();
        }
        let mc_cov = cov_acc / (samples as f64 - 1.0);

        // Mean agreement within 3 standard errors per entry.
        let prop_cov = &lam * b.s() * lam.transpose();
        for i in 0..n {
            let se = (prop_cov[(i, i)] / samples as f64).sqrt();
            assert!(
                (mc_mean[i] - post.mean()[i]).abs() <= 3.0 * se,
                "mean entry {i}"
            );
        }
        // Covariance: mc covariance of the propagated mean plus conditional
        // covariance reconstructs the marginal, within 3 SE per entry.
        for i in 0..n {
            for j in 0..n {
                let var_ij = (prop_cov[(i, i)] * prop_cov[(j, j)] + prop_cov[(i, j)].powi(2))
                    / (samples as f64 - 1.0);
                let se = var_ij.sqrt();
                let recon = mc_cov[(i, j)] + cond_cov[(i, j)];
                assert!(
                    (recon - post.cov()[(i, j)]).abs() <= 3.0 * se,
                    "cov entry ({i},{j}): {} vs {}",
                    recon,
                    post.cov()[(i, j)]
                );
            }
        }
    }

    #[test]
    fn predict_with_ones_column_equals_coeff_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let model = random_model(&mut rng, 1, 3);
        let n = 5;
        let x = DMatrix::from_element(n, 1, 1.0);
        let pf = model.predict_f(&x).unwrap();
        let cp = model.blocks[0].coeff_posterior(&x).unwrap();
        assert_eq!(pf.mean(), cp.mean());
        assert_eq!(pf.cov(), cp.cov());
    }

    #[test]
    fn zero_row_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let model = random_model(&mut rng, 2, 3);
        let mut x = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        x.row_mut(2).fill(0.0);
        let pf = model.predict_f(&x).unwrap();
        assert_eq!(pf.mean()[2], 0.0);
        assert_eq!(pf.cov()[(2, 2)], 0.0);

        let py = model.predict_y(&x).unwrap();
        assert_eq!(py.cov()[(2, 2)], model.sigma2);
    }

    #[test]
    fn predict_f_matches_monte_carlo_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let model = random_model(&mut rng, 2, 3);
        let n = 4;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let pf = model.predict_f(&x).unwrap();

        let lam: Vec<DMatrix<f64>> = model
            .blocks
            .iter()
            .map(|b| b.lambda_matrix(&x).unwrap())
            .collect();
        let qs: Vec<GaussianDist> = model
            .blocks
            .iter()
            .map(|b| GaussianDist::new(b.a.clone(), b.s()).unwrap())
            .collect();
        let conds: Vec<DMatrix<f64>> = model
            .blocks
            .iter()
            .map(|b| b.conditional_moments(&x, &b.a).unwrap().1)
            .collect();

        let samples = 100_000usize;
        let mut mean_acc = DVector::<f64>::zeros(n);
        let mut draws = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut f = DVector::<f64>::zeros(n);
            for (k, b) in model.blocks.iter().enumerate() {
                let coeff = &lam[k] * qs[k].sample(&mut rng);
                for i in 0..n {
                    f[i] += coeff[i] * x[(i, b.feature_index)];
                }
            }
            mean_acc += &f;
            draws.push(f);
        }
        let mc_mean = mean_acc / samples as f64;
        let mut cov_acc = DMatrix::<f64>::zeros(n, n);
        for f in &draws {
            let c = f - &mc_mean;
            cov_acc += &c * c.transpose();
        }
        let mc_cov = cov_acc / (samples as f64 - 1.0);

        // Covariance of the sampled part: sum_k (Lam S Lam^T) .* x_k x_k^T.
        let mut prop_cov = DMatrix::<f64>::zeros(n, n);
        for (k, b) in model.blocks.iter().enumerate() {
            let c = &lam[k] * model.blocks[k].s() * lam[k].transpose();
            for i in 0..n {
                for j in 0..n {
                    prop_cov[(i, j)] += c[(i, j)] * x[(i, b.feature_index)] * x[(j, b.feature_index)];
                }
            }
        }
        let mut cond_total = DMatrix::<f64>::zeros(n, n);
        for (k, b) in model.blocks.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    cond_total[(i, j)] +=
                        conds[k][(i, j)] * x[(i, b.feature_index)] * x[(j, b.feature_index)];
                }
            }
        }

        for i in 0..n {
            let se = (prop_cov[(i, i)] / samples as f64).sqrt();
            assert!(
                (mc_mean[i] - pf.mean()[i]).abs() <= 3.0 * se,
                "mean entry {i}: {} vs {}",
                mc_mean[i],
                pf.mean()[i]
            );
        }
        for i in 0..n {
            for j in 0..n {
                let var_ij = (prop_cov[(i, i)] * prop_cov[(j, j)] + prop_cov[(i, j)].powi(2))
                    / (samples as f64 - 1.0);
                let se = var_ij.sqrt();
                let recon = mc_cov[(i, j)] + cond_total[(i, j)];
                assert!(
                    (recon - pf.cov()[(i, j)]).abs() <= 3.0 * se,
                    "cov entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn conditional_mean_at_a_equals_predict_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let model = random_model(&mut rng, 2, 4);
        let x = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-2.0..2.0));
        let u: Vec<DVector<f64>> = model.blocks.iter().map(|b| b.a.clone()).collect();
        let cond = model.conditional_f_given_inducing(&x, &u).unwrap();
        let pf = model.predict_f(&x).unwrap();
        assert!((cond.mean() - pf.mean()).amax() < 1e-12);
    }

    #[test]
    fn conditional_cov_vanishes_at_shared_inducing_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let z = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
        let blocks: Vec<CoefficientBlock> = (0..2)
            .map(|i| {
                let mut b = random_block(&mut rng, 3, 2, i);
                b.z = z.clone();
                b
            })
            .collect();
        let model = SevgpModel::new(blocks, 0.1, Variant::V41, None, None, false).unwrap();
        let u: Vec<DVector<f64>> = model
            .blocks
            .iter()
            .map(|b| DVector::from_fn(b.m(), |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let cond = model.conditional_f_given_inducing(&z, &u).unwrap();
        assert!(cond.cov().amax() < 1e-5);
    }

    #[test]
    fn law_of_total_variance_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = random_model(&mut rng, 3, 3);
        let x = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-2.0..2.0));
        let pf = model.predict_f(&x).unwrap();
        let u: Vec<DVector<f64>> = model.blocks.iter().map(|b| b.a.clone()).collect();
        let cond = model.conditional_f_given_inducing(&x, &u).unwrap();

        // cov over u of the conditional mean, computed analytically.
        let n = x.nrows();
        let mut mean_cov = DMatrix::<f64>::zeros(n, n);
        for b in &model.blocks {
            let lam = b.lambda_matrix(&x).unwrap();
            let c = &lam * b.s() * lam.transpose();
            for i in 0..n {
                for j in 0..n {
                    mean_cov[(i, j)] += c[(i, j)] * x[(i, b.feature_index)] * x[(j, b.feature_index)];
                }
            }
        }
        let total = &mean_cov + cond.cov();
        assert!((total - pf.cov()).amax() < 1e-8);
    }

    #[test]
    fn predict_y_is_predict_f_plus_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = random_model(&mut rng, 2, 3);
        let x = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-2.0..2.0));
        let pf = model.predict_f(&x).unwrap();
        let py = model.predict_y(&x).unwrap();
        assert_eq!(py.mean(), pf.mean());
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j {
                    pf.cov()[(i, j)] + model.sigma2
                } else {
                    pf.cov()[(i, j)]
                };
                assert_eq!(py.cov()[(i, j)], expect);
            }
        }
    }

    #[test]
    fn explain_sums_to_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = random_model(&mut rng, 3, 3);
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let recs = model.explain(&x).unwrap();
            let total: f64 = recs.iter().map(|r| r.contribution).sum();
            let row = DMatrix::from_fn(1, 3, |_, j| x[j]);
            let pf = model.predict_f(&row).unwrap();
            assert!((total - pf.mean()[0]).abs() < 1e-10);
        }

        // Zero input: every contribution vanishes.
        let recs = model.explain(&DVector::zeros(3)).unwrap();
        assert!(recs.iter().all(|r| r.contribution == 0.0));

        // Single feature valued 1: the contribution is the prediction.
        let m1 = random_model(&mut rng, 1, 3);
        let recs = m1.explain(&nalgebra::dvector![1.0]).unwrap();
        let pf = m1.predict_f(&dmatrix![1.0]).unwrap();
        assert!((recs[0].contribution - pf.mean()[0]).abs() < 1e-14);
    }

    #[test]
    fn gpx_prior_cov_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let model = random_model(&mut rng, 1, 3);
        let n = 5;
        let ones = DMatrix::from_element(n, 1, 1.0);
        let got = model.gpx_prior_cov(&ones).unwrap();
        let kxx = kernels::gram_sym(&model.blocks[0].kernel, &ones).unwrap();
        assert!((&got - &kxx).amax() < 1e-14);

        let zeros = DMatrix::zeros(n, 1);
        assert!(model.gpx_prior_cov(&zeros).unwrap().amax() == 0.0);

        let model2 = random_model(&mut rng, 2, 3);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let got = model2.gpx_prior_cov(&x).unwrap();
        let mut oracle = DMatrix::<f64>::zeros(n, n);
        for (k, b) in model2.blocks.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    let xi: Vec<f64> = x.row(i).iter().copied().collect();
                    let xj: Vec<f64> = x.row(j).iter().copied().collect();
                    oracle[(i, j)] +=
                        kernels::eval(&b.kernel, &xi, &xj).unwrap() * x[(i, k)] * x[(j, k)];
                }
            }
        }
        assert!((got - oracle).amax() < 1e-12);
    }

    #[test]
    fn prior_parameters_reproduce_gpx_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut model = random_model(&mut rng, 2, 4);
        for b in &mut model.blocks {
            b.a.fill(0.0);
            let kmm = kernels::gram_sym(&b.kernel, &b.z).unwrap();
            b.l = crate::gaussian::cholesky_psd(&kmm, 1e-8)
                .unwrap()
                .lower()
                .to_dmatrix();
        }
        let x = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-2.0..2.0));
        let pf = model.predict_f(&x).unwrap();
        let prior = model.gpx_prior_cov(&x).unwrap();
        assert!(pf.mean().amax() < 1e-12);
        assert!((pf.cov() - prior).amax() < 1e-8);
    }

    #[test]
    fn predict_cov_is_psd_across_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..200 {
            let k = rng.random_range(1..4);
            let model = random_model(&mut rng, k, 3);
            let n = rng.random_range(2..7);
            let x = DMatrix::from_fn(n, k, |_, _| rng.random_range(-2.0..2.0));
            let (_, cov) = model.predict_f_moments(&x).unwrap();
            let min_eig = min_eigenvalue(&cov);
            assert!(
                min_eig >= -1e-8 * n as f64,
                "predictive covariance not PSD: {min_eig}"
            );
        }
    }

    #[test]
    fn bias_column_augments_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let blocks = (0..3).map(|i| random_block(&mut rng, 3, 3, i)).collect();
        let model = SevgpModel::new(blocks, 0.1, Variant::V41, None, None, true).unwrap();
        assert_eq!(model.data_feature_count(), 2);
        let x = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let pf = model.predict_f(&x).unwrap();
        assert_eq!(pf.dim(), 4);
        // Bias block contributes even at the zero input.
        let recs = model.explain(&DVector::zeros(2)).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs[0].contribution.abs() > 0.0 || recs[0].coeff_mean == 0.0);
        assert!(recs[1..].iter().all(|r| r.contribution == 0.0));
    }

    #[test]
    fn persistence_round_trip_is_bit_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let model = random_model(&mut rng, 2, 3);
        let json = model.to_json(None).unwrap();
        let loaded = SevgpModel::from_json(&json).unwrap();
        let json2 = loaded.model.to_json(None).unwrap();
        assert_eq!(json, json2, "save→load→save must be byte-identical");

        for (a, b) in model.blocks.iter().zip(&loaded.model.blocks) {
            assert_eq!(a.z, b.z);
            assert_eq!(a.a, b.a);
            assert_eq!(a.l, b.l);
            assert_eq!(a.kernel, b.kernel);
        }
        assert_eq!(model.sigma2, loaded.model.sigma2);

        // With standardization attached.
        let d = crate::data::gen_synthetic(20, 1).unwrap();
        let stats = Standardization::fit(&d);
        let json3 = model.to_json(Some(&stats)).unwrap();
        let loaded3 = SevgpModel::from_json(&json3).unwrap();
        assert_eq!(loaded3.standardization.as_ref(), Some(&stats));
    }

    #[test]
    fn schema_violations_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let model = random_model(&mut rng, 2, 3);

        // Tampered L: negative diagonal.
        let mut bad = model.clone();
        bad.blocks[0].l[(0, 0)] = -1.0;
        assert!(bad.validate().is_err());

        // Above-diagonal entry.
        let mut bad = model.clone();
        bad.blocks[0].l[(0, 2)] = 0.5;
        assert!(bad.validate().is_err());

        // Missing full prior for V42.
        let mut bad = model.clone();
        bad.variant = Variant::V42;
        assert!(bad.validate().is_err());

        // Unknown format version.
        let json = model.to_json(None).unwrap().replace(
            "\"format_version\": 1",
            "\"format_version\": 99",
        );
        assert!(SevgpModel::from_json(&json).is_err());

        // Garbage JSON exits as a schema error.
        match SevgpModel::from_json("{not json").unwrap_err() {
            Error::Schema(_) => {}
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("41".parse::<Variant>().unwrap(), Variant::V41);
        assert_eq!("4.2".parse::<Variant>().unwrap(), Variant::V42);
        assert_eq!("v43".parse::<Variant>().unwrap(), Variant::V43);
        assert!("44".parse::<Variant>().is_err());
        assert_eq!(Variant::V42.to_string(), "42");
    }
}
