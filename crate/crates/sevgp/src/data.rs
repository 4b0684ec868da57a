//! Data generation, CSV ingestion, cross-validation, and evaluation metrics.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Regression dataset: one row per instance, one named column per feature.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    /// Set when the data has been passed through [`Standardization::apply`].
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, feature_names: Vec<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() < 2 {
            return Err(Error::Data(format!(
                "dataset needs at least 2 rows, got {}",
                x.nrows()
            )));
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite entries".into()));
        }
        Ok(Dataset {
            x,
            y,
            feature_names,
            standardization: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    /// Per-dimension (min, max) of the feature columns.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        (0..self.k())
            .map(|j| {
                let col = self.x.column(j);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect()
    }

    /// Row-subset copy (used by cross-validation splits).
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let x = DMatrix::from_fn(idx.len(), self.k(), |i, j| self.x[(idx[i], j)]);
        let y = DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]);
        let mut d = Dataset::new(x, y, self.feature_names.clone())?;
        d.standardization = self.standardization.clone();
        Ok(d)
    }
}

/// Quadratic synthetic benchmark: `x ~ U(-2, 2)`,
/// `y = 0.25 x^2 + eps`, `eps ~ N(0, 0.25)` (variance).
pub fn gen_synthetic(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs n >= 2, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.25f64.sqrt()).expect("valid std dev");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(-2.0..2.0);
        xs.push(x);
        ys.push(0.25 * x * x + noise.sample(&mut rng));
    }
    Dataset::new(
        DMatrix::from_column_slice(n, 1, &xs),
        DVector::from_vec(ys),
        vec!["x".into()],
    )
}

/// Z-score transform fitted on a training split; carries enough state to
/// standardize new data and to map predictions back to original units.
/// Constant feature columns pass through unscaled (sd forced to 1) and are
/// listed in `constant_columns` so callers can warn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
    pub constant_columns: Vec<usize>,
}

const SD_FLOOR: f64 = 1e-12;

fn column_stats(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl Standardization {
    /// Fits per-column statistics on `train` (population sd).
    pub fn fit(train: &Dataset) -> Self {
        let n = train.n();
        let mut x_mean = Vec::with_capacity(train.k());
        let mut x_sd = Vec::with_capacity(train.k());
        let mut constant_columns = Vec::new();
        for j in 0..train.k() {
            let (m, s) = column_stats(train.x.column(j).iter().copied(), n);
            x_mean.push(m);
            if s <= SD_FLOOR {
                constant_columns.push(j);
                x_sd.push(1.0);
            } else {
                x_sd.push(s);
            }
        }
        let (y_mean, y_sd_raw) = column_stats(train.y.iter().copied(), n);
        let y_sd = if y_sd_raw <= SD_FLOOR { 1.0 } else { y_sd_raw };
        Standardization {
            x_mean,
            x_sd,
            y_mean,
            y_sd,
            constant_columns,
        }
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        let x = self.apply_x(&d.x)?;
        let y = DVector::from_fn(d.n(), |i, _| (d.y[i] - self.y_mean) / self.y_sd);
        let mut out = Dataset::new(x, y, d.feature_names.clone())?;
        out.standardization = Some(self.clone());
        Ok(out)
    }

    pub fn apply_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "standardization fitted on {} columns, data has {}",
                self.x_mean.len(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.x_mean[j]) / self.x_sd[j]
        }))
    }

    /// Undoes the transform, returning data in original units.
    pub fn invert(&self, d: &Dataset) -> Result<Dataset> {
        if d.k() != self.x_mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "standardization fitted on {} columns, data has {}",
                self.x_mean.len(),
                d.k()
            )));
        }
        let x = DMatrix::from_fn(d.n(), d.k(), |i, j| {
            d.x[(i, j)] * self.x_sd[j] + self.x_mean[j]
        });
        let y = DVector::from_fn(d.n(), |i, _| d.y[i] * self.y_sd + self.y_mean);
        let mut out = Dataset::new(x, y, d.feature_names.clone())?;
        out.standardization = None;
        Ok(out)
    }

    /// Maps a predictive mean on the standardized scale back to data units.
    pub fn invert_y_mean(&self, mean_std: f64) -> f64 {
        mean_std * self.y_sd + self.y_mean
    }

    /// Maps a predictive variance on the standardized scale back to data units.
    pub fn invert_y_var(&self, var_std: f64) -> f64 {
        var_std * self.y_sd * self.y_sd
    }
}

/// Loads a numeric CSV with a header row, auto-detecting the delimiter among
/// comma/semicolon/tab. Rows with missing or non-numeric entries are dropped;
/// the second return value counts them.
pub fn load_csv(path: &Path, target_column: &str) -> Result<(Dataset, usize)> {
    let raw = std::fs::read_to_string(path)?;
    let first_line = raw.lines().next().unwrap_or("");
    let delimiter = [b',', b';', b'\t']
        .into_iter()
        .max_by_key(|d| first_line.matches(*d as char).count())
        .unwrap();

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(raw.as_bytes());

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| {
            Error::Data(format!(
                "target column '{target_column}' not found; header has: {}",
                headers.join(", ")
            ))
        })?;

    let ncols = headers.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("CSV parse failure: {e}")))?;
        if record.len() != ncols {
            dropped += 1;
            continue;
        }
        let parsed: Option<Vec<f64>> = record
            .iter()
            .map(|f| f.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        match parsed {
            Some(vals) => rows.push(vals),
            None => dropped += 1,
        }
    }
    if rows.len() < 2 {
        return Err(Error::Data(format!(
            "fewer than 2 usable rows in {} ({} dropped)",
            path.display(),
            dropped
        )));
    }

    let n = rows.len();
    let k = ncols - 1;
    let mut feature_names = headers.clone();
    feature_names.remove(target_idx);
    let x = DMatrix::from_fn(n, k, |i, j| {
        let src = if j < target_idx { j } else { j + 1 };
        rows[i][src]
    });
    let y = DVector::from_fn(n, |i, _| rows[i][target_idx]);
    Ok((Dataset::new(x, y, feature_names)?, dropped))
}

/// Disjoint fold index sets covering `0..n`, sizes differing by at most one;
/// deterministic in `seed`.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} rows into {k} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    Ok(folds)
}

/// Mean squared error.
pub fn mse(pred: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            y.len()
        )));
    }
    let n = y.len() as f64;
    Ok(pred
        .iter()
        .zip(y.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Result of the coefficient-stability measure.
#[derive(Clone, Copy, Debug)]
pub struct StabilityOutcome {
    /// Mean over instances of the per-instance local Lipschitz estimate.
    pub value: f64,
    /// Rows that had fewer than the requested number of distinct-location
    /// neighbors (all available ones were used instead).
    pub rows_with_fewer_neighbors: usize,
}

/// Coefficient stability: for each row `x_i`, the maximum of
/// `||F(x_i) - F(x_j)|| / ||x_i - x_j||` over the `m` nearest rows `x_j`
/// (Euclidean distance, exact duplicates excluded), averaged over rows.
/// `coef_at` maps a feature row to its stacked coefficient vector.
pub fn stability(
    coef_at: impl Fn(&[f64]) -> Vec<f64>,
    x: &DMatrix<f64>,
    m: usize,
) -> Result<StabilityOutcome> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "stability needs at least two rows".into(),
        ));
    }
    if m == 0 {
        return Err(Error::InvalidArgument(
            "stability needs at least one neighbor".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let coefs: Vec<Vec<f64>> = rows.iter().map(|r| coef_at(r)).collect();

    let mut total = 0.0;
    let mut counted = 0usize;
    let mut shortfall = 0usize;
    for i in 0..n {
        // Distances to all distinct-location rows, nearest first; ties broken
        // by row index so the selection is deterministic.
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2: f64 = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2.sqrt(), j)
            })
            .filter(|(d, _)| *d > 0.0)
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        if dists.is_empty() {
            shortfall += 1;
            continue;
        }
        if dists.len() < m {
            shortfall += 1;
        }
        let mut worst = 0.0f64;
        for (d, j) in dists.iter().take(m) {
            let diff: f64 = coefs[i]
                .iter()
                .zip(&coefs[*j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(diff / d);
        }
        total += worst;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Data(
            "no row has a distinct-location neighbor; stability undefined".into(),
        ));
    }
    Ok(StabilityOutcome {
        value: total / counted as f64,
        rows_with_fewer_neighbors: shortfall,
    })
}
