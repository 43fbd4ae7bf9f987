//! The `xnn` command line.
//!
//! Every setting can come from a JSON file given with `--config` or from a
//! flag of the same name; flags win over the file, and the file wins over
//! built-in defaults. Data and reports go to files under `--out`, progress
//! and errors to standard error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{run_benchmark, summarize, write_runs_csv, write_summary_csv, BenchConfig};
use crate::data::{load_csv, load_csv_with, scenario, split, CsvSchema, Dataset, Manifest, ScenarioId, ScenarioSpec, SplitLabel, Task};
use crate::diff::fd_check_suite;
use crate::error::{Result, XnnError};
use crate::persist::SavedModel;
use crate::report::ExplainReport;
use crate::rng::{seeded, Role};
use crate::train::{evaluate, fit_pipeline, grid_search, Hyperparams, LAMBDA_GRID};

/// Largest relative error the gradient check accepts.
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "xnn", version, about = "Explainable neural networks with orthogonal projections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulation scenario as CSV plus a JSON manifest.
    Simulate(Settings),
    /// Fit a model, writing the model, its training history and a report.
    Train(Settings),
    /// Score a saved model on a dataset.
    Evaluate(Settings),
    /// Report (and optionally plot) the ridge functions of a saved model.
    Explain(Settings),
    /// Repeated fits over scenarios and sizes, summarized per cell.
    Benchmark(Settings),
    /// Randomized finite-difference check of the analytic gradients.
    Fdcheck(Settings),
}

/// Run configuration. The same fields are accepted as flags and as keys of
/// the `--config` JSON document; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    /// JSON run configuration.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scenario: Option<ScenarioId>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Input CSV (header row, comma separated).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Saved model JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Response column of the input CSV.
    #[arg(long)]
    pub response: Option<String>,
    #[arg(long)]
    pub task: Option<Task>,
    /// Columns to one-hot encode.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Option<Vec<String>>,
    /// Min-max scale numeric columns to [-1, 1].
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub scale: bool,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,

    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Cumulative importance ratio kept by pruning.
    #[arg(long)]
    pub prune: Option<f64>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Hidden layer widths of each subnetwork.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Identity projection: one ridge function per feature.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub gam_mode: bool,
    /// Debug: unconstrained projection trained by Adam.
    #[arg(long, hide = true)]
    #[serde(skip_serializing_if = "is_false")]
    pub naive: bool,
    /// Train on the response as given instead of standardizing it.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub raw_response: bool,

    /// Tune lambda1 and lambda2 over a grid by validation score.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub grid_search: bool,
    #[arg(long, value_delimiter = ',')]
    pub lambda1_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambda2_grid: Option<Vec<f64>>,
    /// Write one SVG per retained subnetwork.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub plots: bool,
    /// Concurrent runs.
    #[arg(long)]
    pub jobs: Option<usize>,

    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<ScenarioId>>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,

    /// Finite-difference step.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Number of gradient-check configurations.
    #[arg(long)]
    pub configs: Option<usize>,
    /// Debug: perturb the analytic gradient (the check must then fail).
    #[arg(long, hide = true)]
    #[serde(skip_serializing_if = "is_false")]
    pub corrupt_gradient: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

macro_rules! prefer_flags {
    ($flags:ident, $file:ident, [$($opt:ident),*], [$($flag:ident),*]) => {
        Settings {
            config: None,
            $($opt: $flags.$opt.or($file.$opt),)*
            $($flag: $flags.$flag || $file.$flag,)*
        }
    };
}

impl Settings {
    /// Reads `--config` if given and overlays the flags on it.
    pub fn resolve(self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| XnnError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let file: Settings = serde_json::from_str(&text)
            .map_err(|e| XnnError::Config(format!("config {}: {e}", path.display())))?;
        let flags = self;
        Ok(prefer_flags!(
            flags,
            file,
            [
                seed, scenario, n, data, model, out, response, task, categorical, train_frac, val_frac, k, lambda1,
                lambda2, lambda3, tau, eta, batch_size, epochs, patience, prune, finetune_epochs, hidden,
                lambda1_grid, lambda2_grid, jobs, scenarios, sizes, reps, eps, configs
            ],
            [scale, gam_mode, naive, raw_response, grid_search, plots, corrupt_gradient]
        ))
    }

    fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn fractions(&self) -> (f64, f64) {
        (self.train_frac.unwrap_or(0.8), self.val_frac.unwrap_or(0.2))
    }

    fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1).max(1)
    }

    /// Hyperparameters for `p` features. Without an explicit `k`, uses
    /// `min(p, 10)`, or `p` in GAM mode.
    pub fn hyperparams(&self, p: usize) -> Result<Hyperparams> {
        let base = Hyperparams::for_features(p);
        let default_k = if self.gam_mode { p } else { base.k };
        let hp = Hyperparams {
            k: self.k.unwrap_or(default_k),
            lambda1: self.lambda1.unwrap_or(base.lambda1),
            lambda2: self.lambda2.unwrap_or(base.lambda2),
            lambda3: self.lambda3.unwrap_or(base.lambda3),
            eta: self.eta.unwrap_or(base.eta),
            tau: self.tau.unwrap_or(base.tau),
            batch_size: self.batch_size.or(base.batch_size),
            max_epochs: self.epochs.unwrap_or(base.max_epochs),
            patience: self.patience.unwrap_or(base.patience),
            hidden: self.hidden.clone().unwrap_or(base.hidden.clone()),
            prune_threshold: self.prune.unwrap_or(base.prune_threshold),
            finetune_epochs: self.finetune_epochs.unwrap_or(base.finetune_epochs),
            seed: self.seed_or_default(),
            gam_mode: self.gam_mode,
            naive: self.naive,
            standardize_response: !self.raw_response,
            ..base
        };
        hp.validate()?;
        Ok(hp)
    }

    fn response_name(&self) -> &str {
        self.response.as_deref().unwrap_or("y")
    }

    /// Training data: a CSV file when `--data` is given, otherwise a
    /// simulated scenario.
    fn training_data(&self) -> Result<Dataset> {
        let seed = self.seed_or_default();
        let ds = if let Some(path) = &self.data {
            let schema = CsvSchema {
                response: self.response_name().into(),
                task: self.task.unwrap_or(Task::Regression),
                categorical: self.categorical.clone().unwrap_or_default(),
                scale: self.scale,
            };
            load_csv(path, &schema)?
        } else {
            let id = self.scenario.ok_or_else(|| XnnError::Config("give --data or --scenario".into()))?;
            scenario(&ScenarioSpec::new(id), self.n.unwrap_or(10_000), &mut seeded(seed, Role::TrainData))?
        };
        let (tf, vf) = self.fractions();
        split(ds, tf, vf, &mut seeded(seed, Role::Split))
    }

    /// Data to score or explain a saved model with, encoded the way its
    /// training data was.
    fn data_for(&self, saved: &SavedModel, role: Role) -> Result<Dataset> {
        let task = self.task.unwrap_or(match saved.model.link {
            crate::model::LinkKind::Identity => Task::Regression,
            crate::model::LinkKind::Logit => Task::Classification,
        });
        if let Some(path) = &self.data {
            match &saved.encoding {
                Some(enc) => load_csv_with(path, self.response_name(), task, enc),
                None => load_csv(path, &CsvSchema { task, ..CsvSchema::regression(self.response_name()) }),
            }
        } else {
            let id = self.scenario.ok_or_else(|| XnnError::Config("give --data or --scenario".into()))?;
            scenario(&ScenarioSpec::new(id), self.n.unwrap_or(10_000), &mut seeded(self.seed_or_default(), role))
        }
    }

    fn load_model(&self) -> Result<SavedModel> {
        let path = self.model.as_ref().ok_or_else(|| XnnError::Config("--model is required".into()))?;
        SavedModel::load(path)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs one command. `Ok` carries the exit code for commands whose outcome
/// is a verdict rather than an error.
pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Simulate(s) => simulate(s.resolve()?).map(|_| 0),
        Command::Train(s) => train(s.resolve()?).map(|_| 0),
        Command::Evaluate(s) => evaluate_cmd(s.resolve()?).map(|_| 0),
        Command::Explain(s) => explain(s.resolve()?).map(|_| 0),
        Command::Benchmark(s) => benchmark(s.resolve()?).map(|_| 0),
        Command::Fdcheck(s) => fdcheck(s.resolve()?),
    }
}

fn simulate(s: Settings) -> Result<()> {
    let id = s.scenario.ok_or_else(|| XnnError::Config("--scenario is required (valid: S1, S2, S3, S4, S5, S6)".into()))?;
    let (n, seed) = (s.n.unwrap_or(10_000), s.seed_or_default());
    let (train_frac, val_frac) = s.fractions();
    let ds = scenario(&ScenarioSpec::new(id), n, &mut seeded(seed, Role::TrainData))?;
    let dir = s.out_dir()?;
    let stem = format!("{id}_n{n}_seed{seed}");
    let csv_path = dir.join(format!("{stem}.csv"));
    ds.write_csv(&csv_path)?;
    let mut columns = ds.feature_names.clone();
    columns.push("y".into());
    let manifest = Manifest { scenario: id, n, seed, train_frac, val_frac, noise_sd: ScenarioSpec::new(id).noise_sd, columns };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)? + "\n")?;
    eprintln!("wrote {}", csv_path.display());
    Ok(())
}

fn train(s: Settings) -> Result<()> {
    let ds = s.training_data()?;
    let hp = s.hyperparams(ds.p())?;
    let rng = seeded(hp.seed, Role::Fit);
    let fit = if s.grid_search {
        let l1 = s.lambda1_grid.clone().unwrap_or(LAMBDA_GRID.to_vec());
        let l2 = s.lambda2_grid.clone().unwrap_or(LAMBDA_GRID.to_vec());
        let (fit, cells) = grid_search(&ds, &hp, &l1, &l2, &rng, s.jobs())?;
        for c in &cells {
            eprintln!("lambda1 {:e} lambda2 {:e}: validation {:.6}", c.lambda1, c.lambda2, c.val_score);
        }
        fit
    } else {
        fit_pipeline(&ds, &hp, &mut rng.clone())?
    };
    let dir = s.out_dir()?;
    let saved = SavedModel {
        model: fit.model.clone(),
        hyperparams: Some(fit.hp.clone()),
        feature_names: ds.feature_names.clone(),
        encoding: ds.encoding.clone(),
    };
    saved.save(&dir.join("model.json"))?;
    fit.fit_history.write_csv(&dir.join("history.csv"))?;
    fit.finetune_history.write_csv(&dir.join("finetune_history.csv"))?;
    let (xt, _) = ds.part(SplitLabel::Train);
    let report = ExplainReport::build(&fit.model, &xt, &ds.feature_names)?;
    report.save(&dir.join("report.json"))?;
    if s.plots {
        report.write_svgs(&dir.join("plots"))?;
    }
    eprintln!(
        "trained {} epochs (best {}), kept {} of {} subnetworks, validation {:.6}",
        fit.fit_history.len(),
        fit.fit_history.best_epoch,
        fit.kept.len(),
        fit.hp.k,
        fit.val_score
    );
    Ok(())
}

fn evaluate_cmd(s: Settings) -> Result<()> {
    let saved = s.load_model()?;
    let ds = s.data_for(&saved, Role::TestData)?;
    let metrics = evaluate(&saved.model, &ds.x, &ds.y, ds.task)?;
    let dir = s.out_dir()?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    Ok(())
}

fn explain(s: Settings) -> Result<()> {
    let saved = s.load_model()?;
    // Same rows `train` used for the projection ranges.
    let (tf, vf) = s.fractions();
    let ds = split(s.data_for(&saved, Role::TrainData)?, tf, vf, &mut seeded(s.seed_or_default(), Role::Split))?;
    let (xt, _) = ds.part(SplitLabel::Train);
    let report = ExplainReport::build(&saved.model, &xt, &saved.feature_names)?;
    let dir = s.out_dir()?;
    report.save(&dir.join("report.json"))?;
    if s.plots {
        let files = report.write_svgs(&dir.join("plots"))?;
        eprintln!("wrote {} plots", files.len());
    }
    Ok(())
}

fn benchmark(s: Settings) -> Result<()> {
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        scenarios: s.scenarios.clone().or(s.scenario.map(|id| vec![id])).unwrap_or(defaults.scenarios),
        sizes: s.sizes.clone().or(s.n.map(|n| vec![n])).unwrap_or(defaults.sizes),
        repetitions: s.reps.unwrap_or(defaults.repetitions),
        seed: s.seed_or_default(),
        train_frac: s.fractions().0,
        val_frac: s.fractions().1,
        grid_search: s.grid_search,
        jobs: s.jobs(),
        hp: s.hyperparams(crate::data::SCENARIO_P)?,
        ..defaults
    };
    let records = run_benchmark(&cfg)?;
    for r in records.iter().filter(|r| r.error.is_some()) {
        eprintln!("{} n={} rep {} failed: {}", r.scenario, r.n, r.repetition, r.error.as_deref().unwrap_or(""));
    }
    let dir = s.out_dir()?;
    write_summary_csv(&dir.join("benchmark.csv"), &summarize(&records))?;
    write_runs_csv(&dir.join("benchmark_runs.csv"), &records)?;
    Ok(())
}

fn fdcheck(s: Settings) -> Result<i32> {
    let report = fd_check_suite(s.seed_or_default(), s.configs.unwrap_or(24), s.eps.unwrap_or(1e-6), s.corrupt_gradient)?;
    println!("max relative error {:.3e} over {} configurations", report.max_rel_err, report.errors.len());
    Ok(if report.max_rel_err <= FD_TOLERANCE { 0 } else { 1 })
}
