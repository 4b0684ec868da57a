//! Exact GP regression building blocks: posterior conditioning and the log
//! marginal evidence, shown on the synthetic quadratic dataset.
//!
//! Run with: `cargo run --example exact_gp`

use nalgebra::DMatrix;
use sevgp::data::gen_synthetic;
use sevgp::gaussian::{exact_gp_posterior, gp_log_evidence};
use sevgp::kernels::{self, KernelSpec};

fn main() -> sevgp::Result<()> {
    // y = 0.25 x^2 + eps, eps ~ N(0, 0.25), x ~ U(-2, 2).
    let data = gen_synthetic(40, 7)?;
    let sigma2 = 0.25;

    let kernel = KernelSpec::sq_exp(1.0, 1.0);
    let k_train = kernels::gram_sym(&kernel, &data.x)?;

    // Marginal evidence of this prior: a scalar measure of fit useful for
    // comparing kernels (and, in the tests, for bounding the variational
    // objectives).
    let evidence = gp_log_evidence(&k_train, &data.y, sigma2)?;
    println!("log evidence under SE(1, 1): {evidence:.4} nats");

    let rough = kernels::gram_sym(&KernelSpec::sq_exp(1.0, 0.2), &data.x)?;
    println!(
        "log evidence under SE(1, 0.2): {:.4} nats (shorter lengthscale fits noise)",
        gp_log_evidence(&rough, &data.y, sigma2)?
    );

    // Posterior at held-out points.
    let xs = DMatrix::from_column_slice(5, 1, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
    let post = exact_gp_posterior(&kernel, &data.x, &data.y, sigma2, &xs)?;

    println!("\n    x     truth     mean       sd");
    for i in 0..5 {
        let x = xs[(i, 0)];
        println!(
            "{x:5.1}  {:8.4} {:8.4} {:8.4}",
            0.25 * x * x,
            post.mean()[i],
            post.cov()[(i, i)].sqrt()
        );
    }
    Ok(())
}
