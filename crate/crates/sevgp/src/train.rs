//! Parameter packing, exact gradients, optimizers, and the training loop.
//!
//! Gradients are computed with forward-mode dual numbers: the packed
//! parameter vector is lifted into [`Dual`] scalars one coordinate group at a
//! time (one group per coefficient block, plus one for the globals) and the
//! objective is re-evaluated generically. Coordinates outside the active
//! group carry empty tangents, so those parts of the computation run at
//! essentially `f64` speed, and the primal value is bit-identical to the
//! plain evaluation. Positivity of variances, lengthscales, and factor
//! diagonals is guaranteed by optimizing their logarithms.

use crate::autodiff::{Dual, Scalar};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::cholesky_psd;
use crate::kernels::{self, KernelSpec};
use crate::linalg::{GMat, DEFAULT_JITTER};
use crate::model::{CoefficientBlock, SevgpModel, Variant};
use crate::objectives::{
    eval_lifted, sample_augmentation, EvalContext, LiftedBlock, LiftedObjective, MeasurementSet,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

// ---------------------------------------------------------------------------
// Parameter vector layout
// ---------------------------------------------------------------------------

/// Maps a model's trainable parameters onto one flat vector and back.
///
/// The packed order is fixed: for each block in turn `a`, then the lower
/// triangle of `L` row by row (diagonal entries stored as logarithms), then
/// `Z` row-major when inducing locations are trainable, then the block
/// kernel's packed hyperparameters; after all blocks `ln sigma2`, and finally
/// the full-process prior kernel's packed hyperparameters, if any.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    train_z: bool,
    blocks: Vec<BlockLayout>,
    sigma_index: usize,
    full_count: usize,
    len: usize,
}

#[derive(Clone, Debug)]
struct BlockLayout {
    start: usize,
    m: usize,
    k: usize,
    kernel: usize,
}

impl ParamLayout {
    pub fn new(model: &SevgpModel, train_z: bool) -> Self {
        let mut offset = 0;
        let blocks: Vec<BlockLayout> = model
            .blocks
            .iter()
            .map(|b| {
                let m = b.z.nrows();
                let k = b.z.ncols();
                let kernel = b.kernel.trainable_count();
                let width =
                    m + m * (m + 1) / 2 + if train_z { m * k } else { 0 } + kernel;
                let bl = BlockLayout {
                    start: offset,
                    m,
                    k,
                    kernel,
                };
                offset += width;
                bl
            })
            .collect();
        let sigma_index = offset;
        let full_count = model
            .full_prior_kernel
            .as_ref()
            .map_or(0, KernelSpec::trainable_count);
        ParamLayout {
            train_z,
            blocks,
            sigma_index,
            full_count,
            len: sigma_index + 1 + full_count,
        }
    }

    /// Total packed length.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false // there is always at least ln sigma2
    }

    pub fn train_z(&self) -> bool {
        self.train_z
    }

    /// Index of `ln sigma2` in the packed vector.
    pub fn sigma_index(&self) -> usize {
        self.sigma_index
    }

    /// Seed groups for gradient passes: one contiguous range per block plus
    /// one for the global parameters.
    pub(crate) fn groups(&self) -> Vec<Range<usize>> {
        let mut g: Vec<Range<usize>> = Vec::with_capacity(self.blocks.len() + 1);
        for (i, b) in self.blocks.iter().enumerate() {
            let end = if i + 1 < self.blocks.len() {
                self.blocks[i + 1].start
            } else {
                self.sigma_index
            };
            g.push(b.start..end);
        }
        g.push(self.sigma_index..self.len);
        g
    }

    fn check_model(&self, model: &SevgpModel) -> Result<()> {
        if model.blocks.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch(format!(
                "layout built for {} blocks, model has {}",
                self.blocks.len(),
                model.blocks.len()
            )));
        }
        for (b, bl) in model.blocks.iter().zip(&self.blocks) {
            if b.z.nrows() != bl.m
                || b.z.ncols() != bl.k
                || b.kernel.trainable_count() != bl.kernel
            {
                return Err(Error::DimensionMismatch(
                    "model block shape does not match the layout".into(),
                ));
            }
        }
        let full = model
            .full_prior_kernel
            .as_ref()
            .map_or(0, KernelSpec::trainable_count);
        if full != self.full_count {
            return Err(Error::DimensionMismatch(
                "full-prior trainable count does not match the layout".into(),
            ));
        }
        Ok(())
    }

    /// Flattens the model's trainable parameters in the documented order.
    pub fn pack(&self, model: &SevgpModel) -> Result<Vec<f64>> {
        self.check_model(model)?;
        let mut p = Vec::with_capacity(self.len);
        for b in &model.blocks {
            p.extend(b.a.iter());
            for i in 0..b.z.nrows() {
                for j in 0..=i {
                    p.push(if i == j { b.l[(i, i)].ln() } else { b.l[(i, j)] });
                }
            }
            if self.train_z {
                for i in 0..b.z.nrows() {
                    for j in 0..b.z.ncols() {
                        p.push(b.z[(i, j)]);
                    }
                }
            }
            p.extend(kernels::pack_params(&b.kernel));
        }
        p.push(model.sigma2.ln());
        if let Some(fp) = &model.full_prior_kernel {
            p.extend(kernels::pack_params(fp));
        }
        debug_assert_eq!(p.len(), self.len);
        Ok(p)
    }

    /// Writes a packed vector back into the model, exponentiating the
    /// log-space coordinates.
    pub fn unpack_into(&self, model: &mut SevgpModel, p: &[f64]) -> Result<()> {
        self.check_model(model)?;
        if p.len() != self.len {
            return Err(Error::DimensionMismatch(format!(
                "packed vector length {} does not match layout length {}",
                p.len(),
                self.len
            )));
        }
        let mut at = 0;
        let mut take = |k: usize| {
            let s = &p[at..at + k];
            at += k;
            s
        };
        for b in &mut model.blocks {
            let m = b.z.nrows();
            for (i, v) in take(m).iter().enumerate() {
                b.a[i] = *v;
            }
            let tri = take(m * (m + 1) / 2);
            let mut t = 0;
            for i in 0..m {
                for j in 0..=i {
                    b.l[(i, j)] = if i == j { tri[t].exp() } else { tri[t] };
                    t += 1;
                }
            }
            if self.train_z {
                let zs = take(m * b.z.ncols());
                let cols = b.z.ncols();
                for i in 0..m {
                    for j in 0..cols {
                        b.z[(i, j)] = zs[i * cols + j];
                    }
                }
            }
            let kp = take(b.kernel.trainable_count());
            b.kernel = kernels::unpack_params(&b.kernel, kp)?;
        }
        model.sigma2 = take(1)[0].exp();
        if let Some(fp) = &model.full_prior_kernel {
            let fpp = take(self.full_count);
            model.full_prior_kernel = Some(kernels::unpack_params(fp, fpp)?);
        }
        debug_assert_eq!(at, self.len);
        Ok(())
    }

    /// Builds the generic objective representation from a packed vector of
    /// any scalar type; frozen parameters come from the model as constants.
    pub(crate) fn lift<T: Scalar>(
        &self,
        model: &SevgpModel,
        p: &[T],
    ) -> Result<LiftedObjective<T>> {
        self.check_model(model)?;
        if p.len() != self.len {
            return Err(Error::DimensionMismatch(format!(
                "packed vector length {} does not match layout length {}",
                p.len(),
                self.len
            )));
        }
        let mut it = p.iter();
        let mut blocks = Vec::with_capacity(model.blocks.len());
        for b in &model.blocks {
            let m = b.z.nrows();
            let k = b.z.ncols();
            let a: Vec<T> = (0..m).map(|_| it.next().unwrap().clone()).collect();
            let mut l = GMat::zeros(m, m);
            for i in 0..m {
                for j in 0..=i {
                    let v = it.next().unwrap().clone();
                    *l.get_mut(i, j) = if i == j { v.exp() } else { v };
                }
            }
            let z = if self.train_z {
                let mut z = GMat::zeros(m, k);
                for i in 0..m {
                    for j in 0..k {
                        *z.get_mut(i, j) = it.next().unwrap().clone();
                    }
                }
                z
            } else {
                GMat::from_fn(m, k, |i, j| T::from_f64(b.z[(i, j)]))
            };
            let node = kernels::lift(&b.kernel, &mut |_| it.next().unwrap().clone().exp());
            let prior = model
                .coeff_prior_kernels
                .as_ref()
                .map(|ps| kernels::lift(&ps[blocks.len()], &mut |v| T::from_f64(v)));
            blocks.push(LiftedBlock {
                node,
                prior,
                z,
                a,
                l,
                feature_index: b.feature_index,
            });
        }
        let sigma2 = it.next().unwrap().exp();
        let full_prior = model
            .full_prior_kernel
            .as_ref()
            .map(|fp| kernels::lift(fp, &mut |_| it.next().unwrap().clone().exp()));
        Ok(LiftedObjective {
            variant: model.variant,
            blocks,
            sigma2,
            full_prior,
            include_bias: model.include_bias_column,
        })
    }
}

// ---------------------------------------------------------------------------
// Gradient machinery
// ---------------------------------------------------------------------------

/// Anything evaluable on a packed parameter vector of a generic scalar type.
pub(crate) trait PackedObjective {
    fn eval<T: Scalar>(&self, p: &[T]) -> Result<T>;
}

/// Evaluates `obj` and its exact gradient by one dual-number forward pass
/// per seed group. The returned value is the primal of the first pass and is
/// bit-identical to a plain `f64` evaluation.
pub(crate) fn value_and_gradient<O: PackedObjective>(
    obj: &O,
    p: &[f64],
    groups: &[Range<usize>],
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; p.len()];
    let mut value = None;
    for g in groups {
        if g.is_empty() {
            continue;
        }
        let width = g.len();
        let lifted: Vec<Dual> = p
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if g.contains(&i) {
                    Dual::variable(v, i - g.start, width)
                } else {
                    Dual::constant(v)
                }
            })
            .collect();
        let r = obj.eval::<Dual>(&lifted)?;
        if value.is_none() {
            value = Some(r.re);
        }
        for i in g.clone() {
            grad[i] = r.dx.get(i - g.start).copied().unwrap_or(0.0);
        }
    }
    let value = match value {
        Some(v) => v,
        None => obj.eval::<f64>(p)?,
    };
    Ok((value, grad))
}

/// The data an objective evaluation is conditioned on. `measurement` is
/// required for the function-space variants and ignored by the weight-space
/// one; `lambda` scales the function-space penalty.
#[derive(Clone, Copy)]
pub struct ObjectiveData<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub measurement: Option<&'a MeasurementSet>,
    pub lambda: f64,
    pub n_total: usize,
}

struct ModelObjective<'a> {
    model: &'a SevgpModel,
    layout: &'a ParamLayout,
    data: &'a ObjectiveData<'a>,
}

impl ModelObjective<'_> {
    fn context(&self) -> Result<EvalContext<'_>> {
        let n = self.data.x.nrows();
        if self.data.y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} targets for {n} batch rows",
                self.data.y.len()
            )));
        }
        if self.data.n_total < n {
            return Err(Error::InvalidArgument(format!(
                "total count {} smaller than the batch ({n} rows)",
                self.data.n_total
            )));
        }
        let x_d = match (self.model.variant, self.data.measurement) {
            (Variant::V41, _) => self.data.x,
            (_, Some(d)) => {
                if d.n_train != n || d.x_d.ncols() != self.data.x.ncols() {
                    return Err(Error::DimensionMismatch(
                        "measurement set does not match the batch".into(),
                    ));
                }
                &d.x_d
            }
            (_, None) => {
                return Err(Error::InvalidArgument(
                    "function-space objectives need a measurement set".into(),
                ));
            }
        };
        Ok(EvalContext {
            x_d,
            n,
            y: self.data.y,
            n_total: self.data.n_total,
            lambda: self.data.lambda,
        })
    }
}

impl PackedObjective for ModelObjective<'_> {
    fn eval<T: Scalar>(&self, p: &[T]) -> Result<T> {
        let lifted = self.layout.lift(self.model, p)?;
        eval_lifted(&lifted, &self.context()?)
    }
}

/// The variant objective at packed parameters `p` (the model supplies the
/// structure and any frozen parameters).
pub fn objective_at(
    model: &SevgpModel,
    layout: &ParamLayout,
    p: &[f64],
    data: &ObjectiveData,
) -> Result<f64> {
    ModelObjective {
        model,
        layout,
        data,
    }
    .eval::<f64>(p)
}

/// The objective and its exact gradient with respect to every packed
/// coordinate.
pub fn objective_and_gradient(
    model: &SevgpModel,
    layout: &ParamLayout,
    p: &[f64],
    data: &ObjectiveData,
) -> Result<(f64, Vec<f64>)> {
    let obj = ModelObjective {
        model,
        layout,
        data,
    };
    value_and_gradient(&obj, p, &layout.groups())
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" | "rms_prop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer '{other}' (expected adam or rmsprop)"
            ))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const RMSPROP_DECAY: f64 = 0.9;
const OPT_EPS: f64 = 1e-8;

/// First-order ascent stepper (we maximize the bounds).
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        Optimizer {
            kind,
            lr,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    /// One ascent step `p += lr * direction(g)`.
    pub fn step(&mut self, p: &mut [f64], g: &[f64]) -> Result<()> {
        if p.len() != self.m.len() || g.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer state has {} coordinates, got {} params / {} grads",
                self.m.len(),
                p.len(),
                g.len()
            )));
        }
        match self.kind {
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for i in 0..p.len() {
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    p[i] += self.lr * mh / (vh.sqrt() + OPT_EPS);
                }
            }
            OptimizerKind::RmsProp => {
                for i in 0..p.len() {
                    self.v[i] = RMSPROP_DECAY * self.v[i] + (1.0 - RMSPROP_DECAY) * g[i] * g[i];
                    p[i] += self.lr * g[i] / (self.v[i].sqrt() + OPT_EPS);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration and initialization
// ---------------------------------------------------------------------------

/// Training hyperparameters.
///
/// The stochastic data term uses minibatches of `batch_size` rows (the
/// closed-form Gaussian expectations make Monte Carlo sampling of the
/// likelihood unnecessary); the function-space variants additionally draw
/// `augmentation` fresh uniform points per step from the training bounding
/// box, and their measurement set is the current batch plus those points.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub variant: Variant,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Rows per stochastic step; values of zero or at least `n` select
    /// deterministic full-batch training.
    pub batch_size: usize,
    /// Augmentation points per step (function-space variants only).
    pub augmentation: usize,
    /// Function-space penalty weight; `None` selects `1 / n_train`.
    pub lambda: Option<f64>,
    pub seed: u64,
    /// Inducing points per block, used at initialization.
    pub inducing: usize,
    /// Whether inducing locations are optimized.
    pub train_z: bool,
    /// Emit tab-separated `iteration objective sigma2` lines to stderr.
    pub progress: bool,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        TrainConfig {
            variant,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-2,
            iterations: 1000,
            batch_size: 100,
            augmentation: 20,
            lambda: None,
            seed: 0,
            inducing: 10,
            train_z: true,
            progress: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.inducing == 0 {
            return Err(Error::InvalidArgument(
                "need at least one inducing point per block".into(),
            ));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "lambda must be finite and nonnegative, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Model structure for [`init_model`]: kernels are per model-space feature
/// (include the bias block's kernel first when the bias column is enabled).
#[derive(Clone, Debug)]
pub struct ModelInit {
    pub kernels: Vec<KernelSpec>,
    pub full_prior_kernel: Option<KernelSpec>,
    pub coeff_prior_kernels: Option<Vec<KernelSpec>>,
    pub include_bias_column: bool,
    pub sigma2: f64,
}

impl ModelInit {
    pub fn new(kernels: Vec<KernelSpec>) -> Self {
        ModelInit {
            kernels,
            full_prior_kernel: None,
            coeff_prior_kernels: None,
            include_bias_column: false,
            sigma2: 0.1,
        }
    }
}

/// Builds the starting model: `a = 0`, `L` the Cholesky factor of each
/// block's prior `K_MM` (so every block KL starts at zero), and inducing
/// locations drawn per block as uniform subsamples of the training inputs
/// without replacement.
pub fn init_model<R: Rng>(
    init: &ModelInit,
    cfg: &TrainConfig,
    x: &DMatrix<f64>,
    rng: &mut R,
) -> Result<SevgpModel> {
    cfg.validate()?;
    let n = x.nrows();
    let m = cfg.inducing;
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot subsample {m} inducing points from {n} training rows"
        )));
    }
    let bias = usize::from(init.include_bias_column);
    let k_model = x.ncols() + bias;
    if init.kernels.len() != k_model {
        return Err(Error::DimensionMismatch(format!(
            "{} kernels for {k_model} model features",
            init.kernels.len()
        )));
    }
    let xm = DMatrix::from_fn(n, k_model, |i, j| {
        if j < bias {
            1.0
        } else {
            x[(i, j - bias)]
        }
    });
    let mut blocks = Vec::with_capacity(k_model);
    let mut idx: Vec<usize> = (0..n).collect();
    for (k, kernel) in init.kernels.iter().enumerate() {
        idx.shuffle(rng);
        let z = DMatrix::from_fn(m, k_model, |i, j| xm[(idx[i], j)]);
        let prior = init
            .coeff_prior_kernels
            .as_ref()
            .map_or(kernel, |ps| &ps[k]);
        let kmm = kernels::gram_sym(prior, &z)?;
        let l = cholesky_psd(&kmm, DEFAULT_JITTER)?.lower().to_dmatrix();
        blocks.push(CoefficientBlock {
            z,
            a: DVector::zeros(m),
            l,
            kernel: kernel.clone(),
            feature_index: k,
        });
    }
    SevgpModel::new(
        blocks,
        init.sigma2,
        cfg.variant,
        init.full_prior_kernel.clone(),
        init.coeff_prior_kernels.clone(),
        init.include_bias_column,
    )
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Runs `cfg.iterations` steps of stochastic ascent on the variant's
/// objective, updating the model in place, and returns the per-step
/// objective values (each evaluated at the pre-step parameters). Batch
/// order, augmentation draws, and every other random choice derive from
/// `cfg.seed`, so identical configurations reproduce identical traces.
pub fn fit(model: &mut SevgpModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.variant != model.variant {
        return Err(Error::InvalidArgument(format!(
            "config variant {} does not match model variant {}",
            cfg.variant, model.variant
        )));
    }
    let n = data.x.nrows();
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    if data.x.ncols() != model.data_feature_count() {
        return Err(Error::DimensionMismatch(format!(
            "training data has {} feature columns, model expects {}",
            data.x.ncols(),
            model.data_feature_count()
        )));
    }
    if data.y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {n} training rows",
            data.y.len()
        )));
    }
    if cfg.iterations == 0 {
        return Ok(Vec::new());
    }

    let layout = ParamLayout::new(model, cfg.train_z);
    let mut p = layout.pack(model)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, p.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = if cfg.batch_size == 0 {
        n
    } else {
        cfg.batch_size.min(n)
    };
    let full_batch = batch == n;
    let needs_measurement = model.variant != Variant::V41;
    let bounds = data.bounds();
    let lambda = cfg.lambda.unwrap_or(1.0 / n as f64);

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // forces a shuffle before the first minibatch
    let mut xb = data.x.clone();
    let mut yb = data.y.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        if !full_batch {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            xb = DMatrix::from_fn(batch, data.x.ncols(), |i, j| data.x[(idx[i], j)]);
            yb = DVector::from_fn(batch, |i, _| data.y[idx[i]]);
        }
        let mset = if needs_measurement {
            let aug = sample_augmentation(&bounds, cfg.augmentation, &mut rng)?;
            Some(MeasurementSet::new(&xb, &aug)?)
        } else {
            None
        };
        let od = ObjectiveData {
            x: &xb,
            y: &yb,
            measurement: mset.as_ref(),
            lambda,
            n_total: n,
        };
        let (value, grad) = objective_and_gradient(model, &layout, &p, &od)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: Some(it),
            });
        }
        if cfg.progress {
            eprintln!("{it}\t{value}\t{}", p[layout.sigma_index()].exp());
        }
        trace.push(value);
        opt.step(&mut p, &grad)?;
    }
    layout.unpack_into(model, &p)?;
    Ok(trace)
}
