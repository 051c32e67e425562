//! Finite-difference checks: the built-in catalogue of every differentiable
//! op, then a hand-written composite function.

use cuboidnet::cli::gradient_suite;
use cuboidnet::tensor::{grad_check, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cuboidnet::Result<()> {
    for r in gradient_suite(0..3, 1e-6) {
        println!("{}", r.line());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let kernel = Tensor::randn(&[4, 2, 3, 3], 0.5, &mut rng);
    let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
    // conv -> sigmoid -> channel attention -> mean
    let f = |tape: &Tape, v: &Var| {
        let y = tape.sigmoid(&tape.conv2d(v, &tape.constant(kernel.clone()), None, 1, 1)?)?;
        let (avg, max) = tape.pool_channel_stats(&y)?;
        let att = tape.sigmoid(&tape.add(&avg, &max)?)?;
        tape.mean(&tape.mul(&y, &att)?)
    };
    println!("composite: relative error {:.2e}", grad_check(f, &x, 1e-5)?);
    Ok(())
}
