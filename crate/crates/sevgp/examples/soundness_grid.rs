//! A reduced version of the synthetic soundness study: train the weight-space
//! and the marginal-matching variants on the same quadratic sample and compare
//! their posteriors on and beyond the observed input range.
//!
//! The full study (both sample sizes, all variants, 3000 iterations) runs via
//! the `soundness` subcommand of the binary; this example trains two instances
//! with a shorter budget so it finishes in seconds.
//!
//! Run with: `cargo run --release --example soundness_grid`

use sevgp::experiments::run_soundness_instance;
use sevgp::Variant;

fn main() -> sevgp::Result<()> {
    let (n, seed, iterations) = (100, 0, 600);

    let v41 = run_soundness_instance(n, Variant::V41, seed, iterations, false)?;
    let v42 = run_soundness_instance(n, Variant::V42, seed, iterations, false)?;
    let (lo, hi) = v41.observed_range();
    println!("trained on {n} points observed in [{lo:.2}, {hi:.2}]; grid covers [-2, 2]");

    // Same data for both, so the columns are directly comparable.
    assert_eq!(v41.data.y, v42.data.y);

    println!("\n                                   weight-space    quadratic prior");
    let regimes: [(&str, Box<dyn Fn(f64) -> bool>); 2] = [
        ("rmse inside observed range ", Box::new(|x| x >= lo && x <= hi)),
        ("rmse outside observed range", Box::new(|x| x < lo || x > hi)),
    ];
    for (label, keep) in regimes {
        println!(
            "  {label}        {:10.4}     {:10.4}",
            v41.rmse_to_truth(&keep).unwrap(),
            v42.rmse_to_truth(&keep).unwrap()
        );
    }
    println!(
        "\nThe functional prior pins the extrapolation to a quadratic shape, so the\n\
         marginal-matching variant should degrade far less outside the data."
    );

    println!("\nposterior slices (x, truth, mean +- 2 sd):");
    for idx in [0usize, 50, 100, 150, 200] {
        let x = v41.grid_x[idx];
        println!(
            "  x = {x:5.2}  truth {:6.3} | 41: {:7.3} +- {:5.3} | 42: {:7.3} +- {:5.3}",
            0.25 * x * x,
            v41.mean[idx],
            2.0 * v41.sd[idx],
            v42.mean[idx],
            2.0 * v42.sd[idx]
        );
    }
    Ok(())
}
