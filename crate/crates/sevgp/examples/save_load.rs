//! Model persistence: serialize a trained model (with its standardization)
//! to JSON, reload it, and confirm the round trip reproduces predictions
//! bit for bit.
//!
//! Run with: `cargo run --example save_load`

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sevgp::data::{gen_synthetic, Standardization};
use sevgp::kernels::KernelSpec;
use sevgp::train::{fit, init_model, ModelInit, TrainConfig};
use sevgp::{SevgpModel, Variant};

fn main() -> sevgp::Result<()> {
    let raw = gen_synthetic(50, 21)?;
    let stats = Standardization::fit(&raw);
    let data = stats.apply(&raw)?;

    let init = ModelInit::new(vec![KernelSpec::sq_exp(0.5, 1.0).train_lengthscales()]);
    let mut cfg = TrainConfig::new(Variant::V41);
    cfg.iterations = 200;
    cfg.batch_size = 0;
    cfg.inducing = 6;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(&init, &cfg, &data.x, &mut rng)?;
    fit(&mut model, &data, &cfg)?;

    let dir = std::env::temp_dir().join("sevgp-save-load-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.json");
    model.save_file(&path, Some(&stats))?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let saved = SevgpModel::load_file(&path)?;
    let stats2 = saved.standardization.expect("standardization was saved");

    // Raw-space query -> standardized features -> prediction -> raw units,
    // identical before and after the round trip.
    let query_raw = DMatrix::from_column_slice(3, 1, &[-1.5, 0.0, 1.5]);
    let before = model.predict_y(&stats.apply_x(&query_raw)?)?;
    let after = saved.model.predict_y(&stats2.apply_x(&query_raw)?)?;
    assert_eq!(before.mean(), after.mean());
    assert_eq!(before.cov(), after.cov());

    println!("\n  x (raw)   mean (raw)   sd (raw)");
    for i in 0..3 {
        println!(
            "  {:7.2}   {:10.4}   {:8.4}",
            query_raw[(i, 0)],
            stats2.invert_y_mean(after.mean()[i]),
            stats2.invert_y_var(after.cov()[(i, i)]).sqrt()
        );
    }
    println!("\nround trip reproduced predictions exactly");
    Ok(())
}
