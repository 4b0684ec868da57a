//! What "self-explaining" means in practice: after training, every prediction
//! decomposes exactly into per-feature contributions `coefficient * feature`,
//! and the coefficients are functions of the input rather than global weights.
//!
//! Run with: `cargo run --release --example explain_predictions`

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sevgp::data::Dataset;
use sevgp::kernels::KernelSpec;
use sevgp::train::{fit, init_model, ModelInit, TrainConfig};
use sevgp::Variant;

fn main() -> sevgp::Result<()> {
    // Two features with different roles: y = sin(x1) * x1 + 0.5 * x2 + noise.
    // A varying coefficient model represents this as b1(x) * x1 + b2(x) * x2
    // where b1 tracks sin(x1) and b2 stays near the constant 0.5.
    let n = 150;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let x: DMatrix<f64> = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |i, _| {
        let (x1, x2) = (x[(i, 0)], x[(i, 1)]);
        x1.sin() * x1 + 0.5 * x2 + noise.sample(&mut rng)
    });
    let data = Dataset::new(x, y, vec!["x1".into(), "x2".into()])?;

    let kernel = KernelSpec::sum(vec![
        KernelSpec::constant(0.5),
        KernelSpec::sq_exp(0.5, 1.0).train_lengthscales(),
    ]);
    let init = ModelInit::new(vec![kernel.clone(), kernel]);
    let mut cfg = TrainConfig::new(Variant::V41);
    cfg.iterations = 800;
    cfg.batch_size = 0;
    cfg.inducing = 10;
    cfg.seed = 2;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(&init, &cfg, &data.x, &mut rng)?;
    fit(&mut model, &data, &cfg)?;

    // Decompose predictions along a slice where x2 is held at 1.
    println!("prediction = b1(x) * x1 + b2(x) * x2, decomposed along x2 = 1:\n");
    println!("    x1   b1 (truth sin x1)    b2 (truth 0.50)   contrib 1  contrib 2    mean");
    for x1 in [-1.5, -0.75, 0.0, 0.75, 1.5] {
        let point = DVector::from_column_slice(&[x1, 1.0]);
        let parts = model.explain(&point)?;
        let mean: f64 = parts.iter().map(|p| p.contribution).sum();
        let pred = model.predict_f(&DMatrix::from_fn(1, 2, |_, j| point[j]))?;
        // The decomposition is exact: contributions sum to the predictive mean.
        assert!((mean - pred.mean()[0]).abs() < 1e-10);
        println!(
            "  {x1:5.2}   {:6.3} ({:6.3})     {:6.3}            {:8.3}  {:8.3}  {:7.3}",
            parts[0].coeff_mean,
            x1.sin(),
            parts[1].coeff_mean,
            parts[0].contribution,
            parts[1].contribution,
            mean
        );
    }

    // Each coefficient also carries posterior uncertainty.
    let point = DVector::from_column_slice(&[0.75, 1.0]);
    println!("\ncoefficient posteriors at ({}, {}):", point[0], point[1]);
    for (p, name) in model.explain(&point)?.iter().zip(&data.feature_names) {
        println!(
            "  {name}: {:.3} +- {:.3}, contribution {:.3}",
            p.coeff_mean,
            2.0 * p.coeff_var.sqrt(),
            p.contribution
        );
    }
    Ok(())
}
