//! Kernel specifications: constructors, the text grammar, trainable
//! hyperparameters, and Gram matrices.
//!
//! Run with: `cargo run --example kernel_basics`

use nalgebra::DMatrix;
use sevgp::kernels::{self, KernelSpec};

fn main() -> sevgp::Result<()> {
    // Kernels are symbolic descriptions; `~` in the grammar marks a
    // hyperparameter as trainable.
    let from_text = kernels::parse_kernel("sum(constant(1.0), se(a=0.5, l=~1.0))")?;
    let from_code = KernelSpec::sum(vec![
        KernelSpec::constant(1.0),
        KernelSpec::sq_exp(0.5, 1.0).train_lengthscales(),
    ]);
    assert_eq!(from_text, from_code);
    println!("spec      : {}", kernels::to_config_string(&from_text));
    println!("trainable : {} hyperparameter(s)", from_text.trainable_count());

    // Trainable hyperparameters pack into log space (positivity for free).
    let packed = kernels::pack_params(&from_text);
    println!("packed    : {packed:?} (ln of the SE lengthscale)");
    let moved = kernels::unpack_params(&from_text, &[0.5f64.ln()])?;
    println!("unpacked  : {}", kernels::to_config_string(&moved));

    // Gram matrix on a few 1-d points.
    let x = DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
    let k = kernels::gram_sym(&from_text, &x)?;
    println!("\nGram matrix under the constant-plus-SE kernel:");
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| format!("{:7.4}", k[(i, j)])).collect();
        println!("  [{}]", row.join(", "));
    }

    // An ARD kernel in 3 dimensions and the degree-2 polynomial kernel.
    let ard = kernels::parse_kernel("ard(theta=2.0, l=~[1.0, 1.0, 1.0])")?;
    let poly = KernelSpec::polynomial(2);
    let p = DMatrix::from_row_slice(2, 3, &[0.5, -1.0, 2.0, 1.0, 0.0, -0.5]);
    println!("\nard k(x0, x1)  = {:.6}", kernels::eval(&ard, &[0.5, -1.0, 2.0], &[1.0, 0.0, -0.5])?);
    println!("poly k(x0, x1) = {:.6}", kernels::gram_sym(&poly, &p)?[(0, 1)]);
    Ok(())
}
