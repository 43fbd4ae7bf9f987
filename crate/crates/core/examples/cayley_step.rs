//! Take Cayley steps on the Stiefel manifold and watch orthogonality hold
//! while a linear objective decreases.
//!
//! cargo run --release --example cayley_step

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use xnn::model::{orthogonality_residual, orthonormal_q};
use xnn::optim::{cayley_step, CayleyStepper};
use xnn::rng::{seeded, Role};

fn main() -> xnn::Result<()> {
    let mut rng = seeded(3, Role::Check);
    let (p, k) = (8, 3);
    let mut w = orthonormal_q(&DMatrix::from_fn(p, k, |_, _| StandardNormal.sample(&mut rng)));
    // Minimize -trace(C^T W): the optimum aligns W with the top of C.
    let c = DMatrix::from_fn(p, k, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let objective = |w: &DMatrix<f64>| -(c.transpose() * w).trace();

    let mut stepper = CayleyStepper::new(0.1, 100);
    for step in 0..=200 {
        if step % 40 == 0 {
            println!("step {step:3}: objective {:+.6}, |W^T W - I| = {:.1e}", objective(&w), orthogonality_residual(&w));
        }
        let g = -&c;
        stepper.step(&mut w, &g)?;
    }

    // Zero gradient leaves W exactly in place.
    let still = cayley_step(&w, &DMatrix::zeros(p, k), 0.1)?;
    println!("zero-gradient step moved W by {:.1e}", (&still - &w).abs().max());
    Ok(())
}
