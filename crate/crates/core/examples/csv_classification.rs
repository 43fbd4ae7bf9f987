//! Load a CSV file with a categorical column and min-max scaling, fit a
//! classifier, save the model, reload it and score new rows with the stored
//! encoding.
//!
//! cargo run --release --example csv_classification

use std::io::Write;

use rand::RngExt;
use xnn::data::{load_csv, load_csv_with, split, CsvSchema, Task};
use xnn::persist::SavedModel;
use xnn::rng::{seeded, Role};
use xnn::train::{evaluate, fit_pipeline, Hyperparams};

fn write_loans(path: &std::path::Path, rows: usize, seed: u64) -> std::io::Result<()> {
    let mut rng = seeded(seed, Role::TrainData);
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "income,debt_ratio,grade,default")?;
    for _ in 0..rows {
        let income: f64 = rng.random_range(150.0..40_000.0);
        let debt: f64 = rng.random_range(0.0..0.6);
        let grade = ["A", "B", "C", "D", "E"][rng.random_range(0..5usize)];
        let bump = match grade {
            "A" => -1.0,
            "E" => 1.0,
            _ => 0.0,
        };
        let logit = 4.0 * debt - income / 20_000.0 + bump;
        let y = u8::from(rng.random_bool(1.0 / (1.0 + (-logit).exp())));
        writeln!(f, "{income:.2},{debt:.4},{grade},{y}")?;
    }
    Ok(())
}

fn main() -> xnn::Result<()> {
    let dir = tempfile::tempdir()?;
    let (train_path, new_path) = (dir.path().join("loans.csv"), dir.path().join("new.csv"));
    write_loans(&train_path, 3000, 1)?;
    write_loans(&new_path, 1000, 2)?;

    let schema = CsvSchema { response: "default".into(), task: Task::Classification, categorical: vec!["grade".into()], scale: true };
    let ds = split(load_csv(&train_path, &schema)?, 0.8, 0.2, &mut seeded(0, Role::Split))?;
    println!("features: {:?}", ds.feature_names);

    let hp = Hyperparams { max_epochs: 200, ..Hyperparams::for_features(ds.p()) };
    let fit = fit_pipeline(&ds, &hp, &mut seeded(0, Role::Fit))?;
    let saved = SavedModel { model: fit.model, hyperparams: Some(fit.hp), feature_names: ds.feature_names.clone(), encoding: ds.encoding.clone() };
    let model_path = dir.path().join("model.json");
    saved.save(&model_path)?;

    let loaded = SavedModel::load(&model_path)?;
    let enc = loaded.encoding.as_ref().expect("encoding saved with the model");
    let fresh = load_csv_with(&new_path, "default", Task::Classification, enc)?;
    let m = evaluate(&loaded.model, &fresh.x, &fresh.y, fresh.task)?;
    println!("new rows: cross-entropy {:.4}, AUC {:.4}", m.cross_entropy.unwrap_or(f64::NAN), m.auc.unwrap_or(f64::NAN));
    Ok(())
}
