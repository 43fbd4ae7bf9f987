//! Fit the full pipeline on a simulated scenario and score it on fresh data.
//!
//! cargo run --release --example fit_scenario -- S1 10000 7

use std::time::Instant;

use xnn::data::{scenario, split, ScenarioId, ScenarioSpec, SplitLabel};
use xnn::rng::{seeded, stream, Role};
use xnn::train::{evaluate, fit_pipeline, Hyperparams};

fn main() -> xnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let id: ScenarioId = args.first().map(|s| s.parse()).transpose()?.unwrap_or(ScenarioId::S1);
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);

    let spec = ScenarioSpec::new(id);
    let ds = scenario(&spec, n, &mut stream(seed, id.index(), 0, Role::TrainData))?;
    let ds = split(ds, 0.8, 0.2, &mut stream(seed, id.index(), 0, Role::Split))?;
    let test = scenario(&spec, 10_000, &mut stream(seed, id.index(), 0, Role::TestData))?;

    let clock = Instant::now();
    let hp = Hyperparams { seed, ..Hyperparams::for_features(ds.p()) };
    let fit = fit_pipeline(&ds, &hp, &mut seeded(seed, Role::Fit))?;
    let (xt, yt) = test.part(SplitLabel::Train);
    let before = evaluate(&fit.unpruned, &xt, &yt, test.task)?;
    let after = evaluate(&fit.model, &xt, &yt, test.task)?;

    println!("{id} n={n} seed={seed}: {:.1}s", clock.elapsed().as_secs_f64());
    println!(
        "  epochs {} (best {}), fine-tune epochs {}",
        fit.fit_history.len(),
        fit.fit_history.best_epoch,
        fit.finetune_history.len()
    );
    println!("  test MSE before pruning {:.4}, after {:.4}", before.mse.unwrap(), after.mse.unwrap());
    println!("  kept subnetworks {:?}", fit.kept);
    for (j, ir) in fit.model.importance_ratios()?.iter().enumerate() {
        if *ir > 0.0 {
            let w: Vec<String> = fit.model.w.column(j).iter().map(|v| format!("{v:+.2}")).collect();
            println!("  IR {:5.1}%  w = [{}]", 100.0 * ir, w.join(" "));
        }
    }
    println!("  max orthogonality residual {:.2e}", fit.max_ortho_residual());
    if std::env::var_os("XNN_TRACE").is_some() {
        for e in fit.fit_history.epochs.iter().step_by(10) {
            println!("  epoch {:4} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_score);
        }
    }
    Ok(())
}
