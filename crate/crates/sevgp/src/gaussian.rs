//! Multivariate-normal machinery and the exact-GP conjugate oracle.
//!
//! Everything downstream (variational posteriors, objectives, predictions)
//! manipulates Gaussians through this module. All solves go through Cholesky
//! factors; explicit inverses exist only inside test oracles.

use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::linalg::{cholesky_jittered, CholFactor, GMat};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Multivariate normal with a cached Cholesky factor of its covariance.
///
/// The factor is built with zero initial jitter so that well-conditioned
/// covariances are represented exactly; genuinely singular ones escalate to
/// a small diagonal perturbation, reported by
/// [`CholFactor::applied_jitter`]. Immutable once constructed.
#[derive(Clone, Debug)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: CholFactor<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if mean.len() != cov.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "mean has {} entries but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_symmetric(&cov)?;
        let chol = cholesky_jittered(&GMat::from_dmatrix(&cov), 0.0)?;
        Ok(GaussianDist { mean, cov, chol })
    }

    /// Standard normal of the given dimension.
    pub fn standard(dim: usize) -> Self {
        GaussianDist::new(DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity covariance always factors")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol(&self) -> &CholFactor<f64> {
        &self.chol
    }

    /// One draw `mean + L z`, `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let l = self.chol.lower();
        DVector::from_fn(n, |i, _| {
            let mut acc = self.mean[i];
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                acc += l.get(i, j) * zj;
            }
            acc
        })
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > 1e-10 * scale {
        return Err(Error::InvalidArgument(format!(
            "matrix is not symmetric (max asymmetry {worst:.3e})"
        )));
    }
    Ok(())
}

/// Cholesky factor of `M + j I` with `j` starting at `jitter0` and escalating
/// tenfold until the factorization succeeds; `M` must be symmetric.
pub fn cholesky_psd(m: &DMatrix<f64>, jitter0: f64) -> Result<CholFactor<f64>> {
    check_symmetric(m)?;
    cholesky_jittered(&GMat::from_dmatrix(m), jitter0)
}

/// Log density `ln N(y | d.mean, d.cov)` via the cached factor.
pub fn mvn_logpdf(y: &DVector<f64>, d: &GaussianDist) -> Result<f64> {
    if y.len() != d.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point has {} entries, distribution has {}",
            y.len(),
            d.dim()
        )));
    }
    let r: Vec<f64> = (y - &d.mean).iter().copied().collect();
    let w = d.chol.solve_lower(&r);
    let quad: f64 = w.iter().map(|v| v * v).sum();
    Ok(-0.5 * (d.dim() as f64 * LN_2PI + d.chol.log_det() + quad))
}

/// `KL(q || p)` between two Gaussians of equal dimension:
/// `0.5 [ ln|C_p| - ln|C_q| - n + tr(C_p^-1 C_q) + (m_p-m_q)^T C_p^-1 (m_p-m_q) ]`.
pub fn kl_mvn(q: &GaussianDist, p: &GaussianDist) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "KL between dimensions {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    let n = q.dim();
    // tr(C_p^-1 C_q) = ||L_p^-1 L_q||_F^2 with C_q = L_q L_q^T.
    let w = p.chol.solve_lower_mat(q.chol.lower());
    let mut trace = 0.0;
    for i in 0..n {
        for v in w.row(i) {
            trace += v * v;
        }
    }
    let dm: Vec<f64> = (p.mean() - q.mean()).iter().copied().collect();
    let v = p.chol.solve_lower(&dm);
    let maha: f64 = v.iter().map(|x| x * x).sum();
    Ok(0.5 * (p.chol.log_det() - q.chol.log_det() - n as f64 + trace + maha))
}

/// Expected Gaussian log-likelihood under uncertainty in the mean:
/// `E_{m ~ d}[ sum_i ln N(y_i | m_i, sigma2) ]
///  = sum_i ln N(y_i | d.mean_i, sigma2) - tr(d.cov) / (2 sigma2)`.
pub fn expected_gauss_loglik(y: &DVector<f64>, m: &GaussianDist, sigma2: f64) -> Result<f64> {
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be strictly positive, got {sigma2}"
        )));
    }
    if y.len() != m.dim() {
        return Err(Error::DimensionMismatch(format!(
            "targets have {} entries, mean distribution has {}",
            y.len(),
            m.dim()
        )));
    }
    let n = y.len() as f64;
    let quad: f64 = y
        .iter()
        .zip(m.mean().iter())
        .map(|(yi, mi)| (yi - mi) * (yi - mi))
        .sum();
    let fit = -0.5 * n * (LN_2PI + sigma2.ln()) - quad / (2.0 * sigma2);
    Ok(fit - m.cov().trace() / (2.0 * sigma2))
}

/// Exact conjugate GP regression posterior at `xstar`:
/// mean `K_*N (K_NN + sigma2 I)^-1 y`, covariance
/// `K_** - K_*N (K_NN + sigma2 I)^-1 K_N*`.
pub fn exact_gp_posterior(
    k: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: f64,
    xstar: &DMatrix<f64>,
) -> Result<GaussianDist> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "exact GP posterior needs at least one training point".into(),
        ));
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} training rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be strictly positive, got {sigma2}"
        )));
    }
    let mut a = kernels::gram_sym(k, x)?;
    for i in 0..a.nrows() {
        a[(i, i)] += sigma2;
    }
    // sigma2 already regularizes the diagonal, so start the factor at zero
    // jitter and only escalate if the system is truly degenerate.
    let fac = cholesky_jittered(&GMat::from_dmatrix(&a), 0.0)?;
    let alpha = fac.solve(y.as_slice());

    let k_sn = kernels::gram(k, xstar, x)?;
    let mean = DVector::from_fn(xstar.nrows(), |i, _| {
        let mut acc = 0.0;
        for (j, aj) in alpha.iter().enumerate() {
            acc += k_sn[(i, j)] * aj;
        }
        acc
    });

    let v = fac.solve_lower_mat(&GMat::from_dmatrix(&k_sn.transpose()));
    let k_ss = kernels::gram_sym(k, xstar)?;
    let vtv = v.transpose().matmul(&v).to_dmatrix();
    GaussianDist::new(mean, k_ss - vtv)
}

/// Log marginal likelihood `ln N(y | 0, C + sigma2 I)` of conjugate GP
/// regression with prior covariance `C`.
pub fn gp_log_evidence(c: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64) -> Result<f64> {
    if y.len() != c.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} targets but covariance is {}x{}",
            y.len(),
            c.nrows(),
            c.ncols()
        )));
    }
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be strictly positive, got {sigma2}"
        )));
    }
    check_symmetric(c)?;
    let mut a = c.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += sigma2;
    }
    let fac = cholesky_jittered(&GMat::from_dmatrix(&a), 0.0)?;
    let w = fac.solve_lower(y.as_slice());
    let quad: f64 = w.iter().map(|v| v * v).sum();
    Ok(-0.5 * (y.len() as f64 * LN_2PI + fac.log_det() + quad))
}
