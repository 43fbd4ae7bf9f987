//! Two restricted configurations: a single-index model (`k = 1`) on linear
//! data, and the additive mode with the projection fixed to the identity.
//!
//! cargo run --release --example special_cases

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use xnn::data::{split, Dataset, Task};
use xnn::rng::{seeded, Role};
use xnn::train::{fit_pipeline, Hyperparams};

fn main() -> xnn::Result<()> {
    let mut rng = seeded(5, Role::TrainData);
    let (n, p) = (3000, 5);
    let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
    let truth = DVector::from_column_slice(&[0.6, -0.2, 0.0, 0.5, 0.3]);

    let ds = split(Dataset::new(x.clone(), &x * &truth, Task::Regression)?, 0.8, 0.2, &mut seeded(5, Role::Split))?;
    let hp = Hyperparams { k: 1, max_epochs: 300, ..Hyperparams::default() };
    let fit = fit_pipeline(&ds, &hp, &mut seeded(5, Role::Fit))?;
    let w = fit.model.w.column(0);
    println!("single index: |cos(w, truth)| = {:.5}", (w.dot(&truth) / truth.norm()).abs());

    // y = sin(pi x1) + x2^2 + noise-free, fitted feature by feature.
    let x3 = x.columns(0, 3).into_owned();
    let y = DVector::from_fn(n, |i, _| (std::f64::consts::PI * x3[(i, 0)]).sin() + x3[(i, 1)].powi(2));
    let ds = split(Dataset::new(x3, y, Task::Regression)?, 0.8, 0.2, &mut seeded(6, Role::Split))?;
    let hp = Hyperparams { gam_mode: true, k: 3, max_epochs: 300, ..Hyperparams::default() };
    let fit = fit_pipeline(&ds, &hp, &mut seeded(6, Role::Fit))?;
    println!("additive mode: W is the identity: {}", fit.model.w == DMatrix::identity(3, 3));
    for (j, ir) in fit.model.importance_ratios()?.iter().enumerate() {
        println!("  feature x{}: IR {:5.1}%", j + 1, 100.0 * ir);
    }
    Ok(())
}
