//! The experiment drivers behind the CLI: the synthetic posterior-soundness
//! study, the cross-validated benchmark, and the fit / predict / explain
//! workflows. Every command is a pure function of its [`RunConfig`], writes
//! plot-ready CSV files, and is bit-reproducible given the same seed.

use crate::data::{self, gen_synthetic, kfold, load_csv, Dataset, Standardization};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::model::{SavedModel, SevgpModel, Variant};
use crate::train::{fit, init_model, ModelInit, OptimizerKind, TrainConfig};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One experiment run, loadable from a TOML file; command-line flags
/// override individual fields. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// CSV dataset path (mutually exclusive with `synthetic_size`).
    pub dataset: Option<PathBuf>,
    /// Target column name; defaults to the last CSV column.
    pub target_column: Option<String>,
    /// Generate the synthetic quadratic dataset with this many rows instead
    /// of reading a file.
    pub synthetic_size: Option<usize>,
    /// "41", "42" or "43".
    pub variant: String,
    /// "adam" or "rmsprop"; each command picks its own default when unset.
    pub optimizer: Option<String>,
    pub learning_rate: f64,
    /// Defaults per command: 3000 (soundness), 2000 (bench), 1000 (fit).
    pub iterations: Option<usize>,
    pub batch_size: usize,
    /// Augmentation points per step for the function-space variants.
    pub augmentation: usize,
    /// Function-space penalty weight; `None` selects `1 / n_train`.
    pub lambda: Option<f64>,
    pub seed: u64,
    /// Inducing points per block; defaults per command (4 soundness,
    /// 3 bench, 10 fit).
    pub inducing: Option<usize>,
    pub train_z: bool,
    pub folds: usize,
    pub out_dir: PathBuf,
    /// Model file for predict / explain.
    pub model: Option<PathBuf>,
    /// Standardize features and target before fitting (stats are stored in
    /// the model file and applied automatically at prediction time).
    pub standardize: bool,
    pub include_bias_column: bool,
    /// Block kernel for `fit`, in the kernel grammar; the same spec is used
    /// for every feature block.
    pub kernel: Option<String>,
    /// Full-process prior kernel, required by variants 42/43 in `fit`.
    pub full_prior_kernel: Option<String>,
    /// Neighbor count for the stability metric.
    pub neighbors: usize,
    /// Emit per-iteration progress lines on stderr.
    pub progress: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            target_column: None,
            synthetic_size: None,
            variant: "41".into(),
            optimizer: None,
            learning_rate: 1e-2,
            iterations: None,
            batch_size: 100,
            augmentation: 20,
            lambda: None,
            seed: 0,
            inducing: None,
            train_z: true,
            folds: 10,
            out_dir: PathBuf::from("."),
            model: None,
            standardize: true,
            include_bias_column: false,
            kernel: None,
            full_prior_kernel: None,
            neighbors: 10,
            progress: false,
        }
    }
}

impl RunConfig {
    /// Loads a TOML config, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::Schema(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    fn optimizer_or(&self, default: OptimizerKind) -> Result<OptimizerKind> {
        match &self.optimizer {
            None => Ok(default),
            Some(s) => s.parse(),
        }
    }

    fn train_config(
        &self,
        variant: Variant,
        default_iterations: usize,
        default_inducing: usize,
        default_optimizer: OptimizerKind,
    ) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(variant);
        cfg.optimizer = self.optimizer_or(default_optimizer)?;
        cfg.learning_rate = self.learning_rate;
        cfg.iterations = self.iterations.unwrap_or(default_iterations);
        cfg.batch_size = self.batch_size;
        cfg.augmentation = self.augmentation;
        cfg.lambda = self.lambda;
        cfg.seed = self.seed;
        cfg.inducing = self.inducing.unwrap_or(default_inducing);
        cfg.train_z = self.train_z;
        cfg.progress = self.progress;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Posterior soundness study
// ---------------------------------------------------------------------------

/// Evaluation grid of the soundness study: x in [-2, 2] with step 0.02.
pub const SOUNDNESS_GRID: usize = 201;

/// Result of one trained soundness instance, evaluated on the grid.
pub struct SoundnessRun {
    pub n: usize,
    pub variant: Variant,
    pub grid_x: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub data: Dataset,
    pub trace: Vec<f64>,
}

impl SoundnessRun {
    /// Root-mean-square distance of the posterior mean to the true mean
    /// `0.25 x^2` over grid points selected by `keep`.
    pub fn rmse_to_truth(&self, keep: impl Fn(f64) -> bool) -> Option<f64> {
        let mut acc = 0.0;
        let mut count = 0usize;
        for (x, m) in self.grid_x.iter().zip(&self.mean) {
            if keep(*x) {
                let r = m - 0.25 * x * x;
                acc += r * r;
                count += 1;
            }
        }
        (count > 0).then(|| (acc / count as f64).sqrt())
    }

    /// The sampled x-range of this run's training data.
    pub fn observed_range(&self) -> (f64, f64) {
        self.data.bounds()[0]
    }
}

/// Trains one instance of the synthetic study (quadratic data, the
/// constant-plus-SE coefficient kernel with fixed amplitude 0.5 and a
/// trainable lengthscale, a degree-2 polynomial full prior for the
/// function-space variants, 4 inducing points, lambda = 1/N) and evaluates
/// the posterior on the grid. The training sample depends on `seed` and `n`
/// only, so variants trained with the same pair see the same data.
pub fn run_soundness_instance(
    n: usize,
    variant: Variant,
    seed: u64,
    iterations: usize,
    progress: bool,
) -> Result<SoundnessRun> {
    let data = gen_synthetic(n, seed.wrapping_add(n as u64))?;

    let kernel = KernelSpec::sum(vec![
        KernelSpec::constant(1.0),
        KernelSpec::sq_exp(0.5, 1.0).train_lengthscales(),
    ]);
    let mut init = ModelInit::new(vec![kernel]);
    if variant != Variant::V41 {
        init.full_prior_kernel = Some(KernelSpec::polynomial(2));
    }

    let mut cfg = TrainConfig::new(variant);
    cfg.iterations = iterations;
    cfg.inducing = 4;
    cfg.lambda = Some(1.0 / n as f64);
    cfg.seed = seed
        .wrapping_add(n as u64)
        .wrapping_add(variant as u64 + 1);
    cfg.progress = progress;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(&init, &cfg, &data.x, &mut rng)?;
    let trace = fit(&mut model, &data, &cfg)?;

    let grid_x: Vec<f64> = (0..SOUNDNESS_GRID)
        .map(|i| i as f64 / 50.0 - 2.0)
        .collect();
    let grid = DMatrix::from_fn(SOUNDNESS_GRID, 1, |i, _| grid_x[i]);
    let pf = model.predict_f(&grid)?;
    let mean: Vec<f64> = pf.mean().iter().copied().collect();
    let sd: Vec<f64> = (0..SOUNDNESS_GRID)
        .map(|i| pf.cov()[(i, i)].max(0.0).sqrt())
        .collect();
    Ok(SoundnessRun {
        n,
        variant,
        grid_x,
        mean,
        sd,
        data,
        trace,
    })
}

/// Runs the full soundness study (N in {25, 100} x all three variants) and
/// writes `soundness_grid.csv` (columns `n,variant,x,mean,sd,lo,hi`) and
/// `soundness_train.csv` (columns `n,x,y`).
pub fn cmd_soundness(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let iterations = cfg.iterations.unwrap_or(3000);
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut grid = String::from("n,variant,x,mean,sd,lo,hi\n");
    let mut train = String::from("n,x,y\n");
    for n in [25usize, 100] {
        let mut sample_written = false;
        for variant in [Variant::V41, Variant::V42, Variant::V43] {
            let run = run_soundness_instance(n, variant, cfg.seed, iterations, cfg.progress)?;
            for i in 0..SOUNDNESS_GRID {
                let (m, s) = (run.mean[i], run.sd[i]);
                writeln!(
                    grid,
                    "{n},{variant},{},{m},{s},{},{}",
                    run.grid_x[i],
                    m - 2.0 * s,
                    m + 2.0 * s
                )
                .expect("string write");
            }
            if !sample_written {
                for i in 0..run.data.n() {
                    writeln!(train, "{n},{},{}", run.data.x[(i, 0)], run.data.y[i])
                        .expect("string write");
                }
                sample_written = true;
            }
        }
    }

    let grid_path = cfg.out_dir.join("soundness_grid.csv");
    let train_path = cfg.out_dir.join("soundness_train.csv");
    std::fs::write(&grid_path, grid)?;
    std::fs::write(&train_path, train)?;
    Ok(vec![grid_path, train_path])
}

// ---------------------------------------------------------------------------
// Cross-validated benchmark
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub variant: Variant,
    pub folds: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub inducing: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Neighbor count for the stability metric.
    pub neighbors: usize,
    pub train_z: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            variant: Variant::V41,
            folds: 10,
            iterations: 2000,
            batch_size: 100,
            seed: 0,
            inducing: 3,
            optimizer: OptimizerKind::RmsProp,
            learning_rate: 1e-2,
            neighbors: 10,
            train_z: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchFold {
    pub fold: usize,
    pub seed: u64,
    pub mse: f64,
    pub stability: f64,
    pub objective_final: f64,
}

#[derive(Clone, Debug)]
pub struct BenchSummary {
    pub folds: Vec<BenchFold>,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub stability_mean: f64,
    pub stability_sd: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// K-fold cross-validation with per-fold standardization fitted on the
/// training split: each block uses a constant-plus-ARD kernel (constant 1,
/// amplitude 2, trainable lengthscales), and both the mean-squared error on
/// the held-out fold and the coefficient stability over the training rows
/// are computed in standardized units. Folds run in parallel; each derives
/// its own seed, so results do not depend on scheduling.
pub fn run_bench(data: &Dataset, opts: &BenchOptions) -> Result<BenchSummary> {
    if opts.variant != Variant::V41 {
        return Err(Error::InvalidArgument(
            "the benchmark trains the weight-space variant (41); function-space \
             variants need a dataset-specific full prior"
                .into(),
        ));
    }
    let n = data.n();
    let k = data.k();
    let splits = kfold(n, opts.folds, opts.seed)?;

    let folds: Vec<BenchFold> = splits
        .par_iter()
        .enumerate()
        .map(|(f, test_idx)| -> Result<BenchFold> {
            let in_test = {
                let mut mask = vec![false; n];
                for &i in test_idx {
                    mask[i] = true;
                }
                mask
            };
            let train_idx: Vec<usize> = (0..n).filter(|i| !in_test[*i]).collect();
            let train_raw = data.subset(&train_idx)?;
            let test_raw = data.subset(test_idx)?;
            let stats = Standardization::fit(&train_raw);
            let train = stats.apply(&train_raw)?;
            let test = stats.apply(&test_raw)?;

            let kernel = KernelSpec::sum(vec![
                KernelSpec::constant(1.0),
                KernelSpec::ard(2.0, vec![1.0; k]).train_lengthscales(),
            ]);
            let init = ModelInit::new(vec![kernel; k]);
            let mut cfg = TrainConfig::new(opts.variant);
            cfg.optimizer = opts.optimizer;
            cfg.learning_rate = opts.learning_rate;
            cfg.iterations = opts.iterations;
            cfg.batch_size = opts.batch_size;
            cfg.seed = opts.seed.wrapping_add(1000 + f as u64);
            cfg.inducing = opts.inducing;
            cfg.train_z = opts.train_z;

            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = init_model(&init, &cfg, &train.x, &mut rng)?;
            let trace = fit(&mut model, &train, &cfg)?;

            let pred = model.predict_f(&test.x)?;
            let mse = data::mse(pred.mean(), &test.y)?;
            let coef_at = |row: &[f64]| -> Vec<f64> {
                let point = DVector::from_row_slice(row);
                model
                    .explain(&point)
                    .expect("explain on training rows")
                    .iter()
                    .map(|e| e.coeff_mean)
                    .collect()
            };
            let stability = data::stability(coef_at, &train.x, opts.neighbors)?;

            Ok(BenchFold {
                fold: f,
                seed: cfg.seed,
                mse,
                stability: stability.value,
                objective_final: trace.last().copied().unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (mse_mean, mse_sd) = mean_sd(&folds.iter().map(|f| f.mse).collect::<Vec<_>>());
    let (stability_mean, stability_sd) =
        mean_sd(&folds.iter().map(|f| f.stability).collect::<Vec<_>>());
    Ok(BenchSummary {
        folds,
        mse_mean,
        mse_sd,
        stability_mean,
        stability_sd,
    })
}

/// Runs the benchmark on a CSV dataset and writes `bench_results.csv` with
/// one row per fold plus `mean` and `sd` summary rows.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (data, name) = load_config_dataset(cfg)?;
    let opts = BenchOptions {
        variant: cfg.variant()?,
        folds: cfg.folds,
        iterations: cfg.iterations.unwrap_or(2000),
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        inducing: cfg.inducing.unwrap_or(3),
        optimizer: cfg.optimizer_or(OptimizerKind::RmsProp)?,
        learning_rate: cfg.learning_rate,
        neighbors: cfg.neighbors,
        train_z: cfg.train_z,
    };
    let summary = run_bench(&data, &opts)?;

    let mut out = String::from("dataset,variant,fold,mse,stability,objective_final,seed\n");
    for f in &summary.folds {
        writeln!(
            out,
            "{name},{},{},{},{},{},{}",
            opts.variant, f.fold, f.mse, f.stability, f.objective_final, f.seed
        )
        .expect("string write");
    }
    writeln!(
        out,
        "{name},{},mean,{},{},,",
        opts.variant, summary.mse_mean, summary.stability_mean
    )
    .expect("string write");
    writeln!(
        out,
        "{name},{},sd,{},{},,",
        opts.variant, summary.mse_sd, summary.stability_sd
    )
    .expect("string write");

    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("bench_results.csv");
    std::fs::write(&path, out)?;
    Ok(vec![path])
}

// ---------------------------------------------------------------------------
// Fit / predict / explain workflows
// ---------------------------------------------------------------------------

/// Loads the configured dataset (CSV file or synthetic), returning it with a
/// short name for reporting.
pub fn load_config_dataset(cfg: &RunConfig) -> Result<(Dataset, String)> {
    match (&cfg.dataset, cfg.synthetic_size) {
        (Some(_), Some(_)) => Err(Error::InvalidArgument(
            "set either dataset or synthetic_size, not both".into(),
        )),
        (None, Some(n)) => Ok((gen_synthetic(n, cfg.seed)?, format!("synthetic-{n}"))),
        (Some(path), None) => {
            let target = match &cfg.target_column {
                Some(t) => t.clone(),
                None => last_header_column(path)?,
            };
            let (data, dropped) = load_csv(path, &target)?;
            if dropped > 0 {
                eprintln!("note: dropped {dropped} malformed rows from {}", path.display());
            }
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            Ok((data, name))
        }
        (None, None) => Err(Error::InvalidArgument(
            "no dataset: set a CSV path or synthetic_size".into(),
        )),
    }
}

fn last_header_column(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    let first = text
        .lines()
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let delimiter = [',', ';', '\t']
        .into_iter()
        .max_by_key(|d| first.matches(*d).count())
        .unwrap();
    first
        .split(delimiter)
        .next_back()
        .map(|s| s.trim().trim_matches('"').to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Data(format!("{}: no columns in header", path.display())))
}

fn default_fit_kernel() -> KernelSpec {
    KernelSpec::sum(vec![
        KernelSpec::constant(1.0),
        KernelSpec::sq_exp(1.0, 1.0).train_lengthscales(),
    ])
}

/// Fits a model on the configured dataset and writes `model.json` (with the
/// standardization stats baked in when standardization is on) plus
/// `fit_trace.csv`.
pub fn cmd_fit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let variant = cfg.variant()?;
    let (raw, _) = load_config_dataset(cfg)?;
    let (data, stats) = if cfg.standardize {
        let stats = Standardization::fit(&raw);
        (stats.apply(&raw)?, Some(stats))
    } else {
        (raw, None)
    };

    let block_kernel = match &cfg.kernel {
        Some(text) => kernels::parse_kernel(text)?,
        None => default_fit_kernel(),
    };
    let k_model = data.k() + usize::from(cfg.include_bias_column);
    let mut init = ModelInit::new(vec![block_kernel; k_model]);
    init.include_bias_column = cfg.include_bias_column;
    if variant != Variant::V41 {
        let text = cfg.full_prior_kernel.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "variants 42/43 need full_prior_kernel (kernel grammar) in the config".into(),
            )
        })?;
        init.full_prior_kernel = Some(kernels::parse_kernel(text)?);
    }

    let tc = cfg.train_config(variant, 1000, 10, OptimizerKind::Adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = init_model(&init, &tc, &data.x, &mut rng)?;
    let trace = fit(&mut model, &data, &tc)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let model_path = cfg.out_dir.join("model.json");
    model.save_file(&model_path, stats.as_ref())?;

    let mut tr = String::from("iteration,objective\n");
    for (i, v) in trace.iter().enumerate() {
        writeln!(tr, "{i},{v}").expect("string write");
    }
    let trace_path = cfg.out_dir.join("fit_trace.csv");
    std::fs::write(&trace_path, tr)?;
    Ok(vec![model_path, trace_path])
}

/// Reads the feature columns of a prediction CSV in file order, dropping the
/// target column — by name when configured, else the last column when the
/// file has exactly one column too many — and checks the count against the
/// model.
fn load_features(path: &Path, expected: usize, target: Option<&str>) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let first = text
        .lines()
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let delimiter = [b',', b';', b'\t']
        .into_iter()
        .max_by_key(|d| first.matches(*d as char).count())
        .unwrap();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let drop_col = target
        .and_then(|t| headers.iter().position(|h| h == t))
        .or_else(|| (headers.len() == expected + 1).then_some(headers.len() - 1));
    let keep: Vec<usize> = (0..headers.len()).filter(|j| Some(*j) != drop_col).collect();
    if keep.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} feature columns, model expects {expected}",
            path.display(),
            keep.len()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("CSV parse: {e}")))?;
        let mut row = Vec::with_capacity(keep.len());
        let mut ok = true;
        for &j in &keep {
            match record.get(j).map(str::trim).and_then(|v| v.parse::<f64>().ok()) {
                Some(v) if v.is_finite() => row.push(v),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: no usable rows",
            path.display()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), expected, |i, j| rows[i][j]))
}

fn load_model(cfg: &RunConfig) -> Result<SavedModel> {
    let path = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no model file given (use --model)".into()))?;
    SevgpModel::load_file(path)
}

/// Predicts on a feature CSV with a saved model and writes
/// `predictions.csv` (`row,mean,var_f,var_y`, in original target units).
pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let saved = load_model(cfg)?;
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no dataset to predict on".into()))?;
    let x_raw = load_features(
        path,
        saved.model.data_feature_count(),
        cfg.target_column.as_deref(),
    )?;
    let x = match &saved.standardization {
        Some(s) => s.apply_x(&x_raw)?,
        None => x_raw,
    };

    let mut out = String::from("row,mean,var_f,var_y\n");
    let chunk = 256;
    let mut row = 0usize;
    while row < x.nrows() {
        let hi = (row + chunk).min(x.nrows());
        let block = DMatrix::from_fn(hi - row, x.ncols(), |i, j| x[(row + i, j)]);
        let pf = saved.model.predict_f(&block)?;
        for i in 0..block.nrows() {
            let (mut mean, mut var_f) = (pf.mean()[i], pf.cov()[(i, i)].max(0.0));
            let mut var_y = var_f + saved.model.sigma2;
            if let Some(s) = &saved.standardization {
                mean = s.invert_y_mean(mean);
                var_f = s.invert_y_var(var_f);
                var_y = s.invert_y_var(var_y);
            }
            writeln!(out, "{},{mean},{var_f},{var_y}", row + i).expect("string write");
        }
        row = hi;
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let out_path = cfg.out_dir.join("predictions.csv");
    std::fs::write(&out_path, out)?;
    Ok(vec![out_path])
}

/// Decomposes predictions into per-feature contributions and writes
/// `explanations.csv`: one `contrib_*` column per block (standardized target
/// units), their sum `mean_std`, and the prediction mean in original units.
pub fn cmd_explain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let saved = load_model(cfg)?;
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no dataset to explain".into()))?;
    let x_raw = load_features(
        path,
        saved.model.data_feature_count(),
        cfg.target_column.as_deref(),
    )?;
    let x = match &saved.standardization {
        Some(s) => s.apply_x(&x_raw)?,
        None => x_raw,
    };

    let names = block_names(&saved.model);
    let mut out = String::from("row");
    for n in &names {
        write!(out, ",contrib_{n}").expect("string write");
    }
    out.push_str(",mean_std,mean\n");

    for i in 0..x.nrows() {
        let point = DVector::from_fn(x.ncols(), |j, _| x[(i, j)]);
        let parts = saved.model.explain(&point)?;
        let mut total = 0.0;
        write!(out, "{i}").expect("string write");
        for p in &parts {
            total += p.contribution;
            write!(out, ",{}", p.contribution).expect("string write");
        }
        let mean = match &saved.standardization {
            Some(s) => s.invert_y_mean(total),
            None => total,
        };
        writeln!(out, ",{total},{mean}").expect("string write");
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let out_path = cfg.out_dir.join("explanations.csv");
    std::fs::write(&out_path, out)?;
    Ok(vec![out_path])
}

/// Column labels for the per-block outputs: `bias` for the bias block, then
/// generic feature positions (the model file does not store feature names).
fn block_names(model: &SevgpModel) -> Vec<String> {
    (0..model.k())
        .map(|j| {
            if model.include_bias_column && j == 0 {
                "bias".to_string()
            } else {
                format!("x{}", j - usize::from(model.include_bias_column))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_synthetic_csv(path: &Path, n: usize, seed: u64) {
        let d = gen_synthetic(n, seed).unwrap();
        let mut text = String::from("x,y\n");
        for i in 0..n {
            writeln!(text, "{},{}", d.x[(i, 0)], d.y[i]).unwrap();
        }
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn config_defaults_and_toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.variant().unwrap(), Variant::V41);
        assert_eq!(cfg.batch_size, 100);
        assert!(cfg.standardize);

        let dir = tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "variant = \"42\"\nseed = 7\nlearning_rate = 0.005\n").unwrap();
        let loaded = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(loaded.variant().unwrap(), Variant::V42);
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.learning_rate, 0.005);
        assert_eq!(loaded.batch_size, 100, "unset fields keep defaults");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "variannt = \"42\"\n").unwrap();
        let err = RunConfig::load(Some(&path)).unwrap_err();
        assert_eq!(err.exit_code(), 2, "schema violations exit 2");
    }

    #[test]
    fn soundness_instance_produces_full_grid() {
        let run = run_soundness_instance(25, Variant::V41, 3, 40, false).unwrap();
        assert_eq!(run.grid_x.len(), SOUNDNESS_GRID);
        assert_eq!(run.grid_x[0], -2.0);
        assert_eq!(run.grid_x[200], 2.0);
        assert!((run.grid_x[1] - run.grid_x[0] - 0.02).abs() < 1e-12);
        assert!(run.mean.iter().all(|v| v.is_finite()));
        assert!(run.sd.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(run.data.n(), 25);
        assert_eq!(run.trace.len(), 40);

        let rmse_all = run.rmse_to_truth(|_| true).unwrap();
        assert!(rmse_all.is_finite());
        assert!(run.rmse_to_truth(|x| x > 3.0).is_none(), "empty selection");
    }

    #[test]
    fn soundness_same_seed_same_data_across_variants() {
        let a = run_soundness_instance(25, Variant::V41, 5, 2, false).unwrap();
        let b = run_soundness_instance(25, Variant::V42, 5, 2, false).unwrap();
        assert_eq!(a.data.x, b.data.x);
        assert_eq!(a.data.y, b.data.y);
    }

    #[test]
    fn cmd_soundness_writes_plot_ready_files() {
        let dir = tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.iterations = Some(3);
        let files = cmd_soundness(&cfg).unwrap();
        assert_eq!(files.len(), 2);

        let grid = std::fs::read_to_string(&files[0]).unwrap();
        let lines: Vec<&str> = grid.lines().collect();
        assert_eq!(lines[0], "n,variant,x,mean,sd,lo,hi");
        assert_eq!(lines.len(), 1 + 2 * 3 * SOUNDNESS_GRID);
        // 201 rows per (n, variant) pair.
        let v42 = lines
            .iter()
            .filter(|l| l.starts_with("100,42,"))
            .count();
        assert_eq!(v42, SOUNDNESS_GRID);

        let train = std::fs::read_to_string(&files[1]).unwrap();
        assert_eq!(train.lines().count(), 1 + 25 + 100);

        // Bit-for-bit reproducibility.
        let dir2 = tempdir().unwrap();
        cfg.out_dir = dir2.path().to_path_buf();
        let files2 = cmd_soundness(&cfg).unwrap();
        assert_eq!(grid, std::fs::read_to_string(&files2[0]).unwrap());
    }

    #[test]
    fn bench_on_synthetic_data_summarizes_folds() {
        let data = gen_synthetic(60, 9).unwrap();
        let opts = BenchOptions {
            folds: 3,
            iterations: 15,
            batch_size: 25,
            seed: 9,
            neighbors: 5,
            ..BenchOptions::default()
        };
        let summary = run_bench(&data, &opts).unwrap();
        assert_eq!(summary.folds.len(), 3);
        let hand_mean =
            summary.folds.iter().map(|f| f.mse).sum::<f64>() / 3.0;
        assert!((summary.mse_mean - hand_mean).abs() < 1e-12);
        assert!(summary.folds.iter().all(|f| f.mse.is_finite() && f.mse >= 0.0));
        assert!(summary
            .folds
            .iter()
            .all(|f| f.stability.is_finite() && f.stability >= 0.0));

        // Distinct fold seeds, deterministic rerun.
        let again = run_bench(&data, &opts).unwrap();
        for (a, b) in summary.folds.iter().zip(&again.folds) {
            assert_eq!(a.mse, b.mse);
            assert_eq!(a.stability, b.stability);
        }
        assert!(run_bench(
            &data,
            &BenchOptions {
                variant: Variant::V42,
                ..opts
            }
        )
        .is_err());
    }

    #[test]
    fn cmd_bench_writes_fold_and_summary_rows() {
        let dir = tempdir().unwrap();
        let csv_path = dir.path().join("data.csv");
        write_synthetic_csv(&csv_path, 50, 4);

        let mut cfg = RunConfig::default();
        cfg.dataset = Some(csv_path);
        cfg.target_column = Some("y".into());
        cfg.out_dir = dir.path().to_path_buf();
        cfg.folds = 4;
        cfg.iterations = Some(10);
        cfg.batch_size = 20;
        cfg.neighbors = 5;
        let files = cmd_bench(&cfg).unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dataset,variant,fold,mse,stability,objective_final,seed");
        assert_eq!(lines.len(), 1 + 4 + 2, "4 folds + mean + sd");
        assert!(lines[5].contains(",mean,"));
        assert!(lines[6].contains(",sd,"));
    }

    #[test]
    fn fit_predict_explain_round_trip() {
        let dir = tempdir().unwrap();
        let csv_path = dir.path().join("data.csv");
        write_synthetic_csv(&csv_path, 40, 11);

        let mut cfg = RunConfig::default();
        cfg.dataset = Some(csv_path.clone());
        cfg.out_dir = dir.path().to_path_buf();
        cfg.iterations = Some(60);
        cfg.inducing = Some(4);
        cfg.seed = 11;
        let files = cmd_fit(&cfg).unwrap();
        assert!(files[0].ends_with("model.json") && files[0].exists());
        assert!(files[1].exists());

        let mut pcfg = RunConfig::default();
        pcfg.model = Some(files[0].clone());
        pcfg.dataset = Some(csv_path.clone());
        pcfg.target_column = Some("y".into());
        pcfg.out_dir = dir.path().to_path_buf();
        let pred_files = cmd_predict(&pcfg).unwrap();
        let pred = std::fs::read_to_string(&pred_files[0]).unwrap();
        let rows: Vec<&str> = pred.lines().collect();
        assert_eq!(rows[0], "row,mean,var_f,var_y");
        assert_eq!(rows.len(), 1 + 40);
        for row in &rows[1..] {
            let cells: Vec<f64> = row
                .split(',')
                .skip(1)
                .map(|c| c.parse().unwrap())
                .collect();
            assert!(cells.iter().all(|v| v.is_finite()));
            assert!(cells[2] >= cells[1] || (cells[2] - cells[1]).abs() < 1e-12,
                "var_y should exceed var_f");
        }

        let expl_files = cmd_explain(&pcfg).unwrap();
        let expl = std::fs::read_to_string(&expl_files[0]).unwrap();
        let rows: Vec<&str> = expl.lines().collect();
        assert_eq!(rows[0], "row,contrib_x0,mean_std,mean");
        assert_eq!(rows.len(), 1 + 40);
        for row in &rows[1..] {
            let cells: Vec<f64> = row
                .split(',')
                .skip(1)
                .map(|c| c.parse().unwrap())
                .collect();
            // One block: the contribution must equal the standardized mean.
            assert!((cells[0] - cells[1]).abs() <= 1e-10);
        }
    }

    #[test]
    fn predict_requires_matching_feature_count() {
        let dir = tempdir().unwrap();
        let csv_path = dir.path().join("data.csv");
        write_synthetic_csv(&csv_path, 30, 2);
        let mut cfg = RunConfig::default();
        cfg.dataset = Some(csv_path.clone());
        cfg.out_dir = dir.path().to_path_buf();
        cfg.iterations = Some(5);
        cfg.inducing = Some(3);
        let files = cmd_fit(&cfg).unwrap();

        // Prediction input with a bogus extra column and no target dropped.
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,b,c\n1,2,3\n").unwrap();
        let mut pcfg = RunConfig::default();
        pcfg.model = Some(files[0].clone());
        pcfg.dataset = Some(bad);
        pcfg.out_dir = dir.path().to_path_buf();
        assert!(cmd_predict(&pcfg).is_err());
    }

    #[test]
    fn fit_requires_full_prior_for_function_space_variants() {
        let dir = tempdir().unwrap();
        let csv_path = dir.path().join("data.csv");
        write_synthetic_csv(&csv_path, 30, 3);
        let mut cfg = RunConfig::default();
        cfg.dataset = Some(csv_path);
        cfg.out_dir = dir.path().to_path_buf();
        cfg.variant = "42".into();
        cfg.iterations = Some(5);
        cfg.inducing = Some(3);
        let err = cmd_fit(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        cfg.full_prior_kernel = Some("poly(degree=2)".into());
        assert!(cmd_fit(&cfg).is_ok());
    }

    #[test]
    fn last_header_column_detects_delimiter() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("semi.csv");
        std::fs::write(&p, "\"a\";\"b\";\"quality\"\n1;2;3\n").unwrap();
        assert_eq!(last_header_column(&p).unwrap(), "quality");
    }
}
