//! Finite-difference checks for every differentiable op.

use troikit::gradcheck::{check_all, check_op, GradcheckConfig};

fn main() -> troikit::Result<()> {
    let cfg = GradcheckConfig::default();
    for result in check_all(&cfg)? {
        println!("{result}");
    }
    let broken = GradcheckConfig {
        perturb: 0.01,
        ..cfg
    };
    println!("with a 1% error injected: {}", check_op("conv2d", &broken)?);
    Ok(())
}
