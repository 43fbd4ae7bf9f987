//! Explainable neural networks: additive index models with orthonormal
//! projection indexes and smooth, normalized subnetwork ridge functions,
//! trained by backpropagation with Cayley steps on the Stiefel manifold.
//!
//! ```no_run
//! use xnn::{data, rng, train};
//!
//! let spec = data::ScenarioSpec::new(data::ScenarioId::S1);
//! let ds = data::scenario(&spec, 2000, &mut rng::stream(7, 1, 0, rng::Role::TrainData))?;
//! let ds = data::split(ds, 0.8, 0.2, &mut rng::stream(7, 1, 0, rng::Role::Split))?;
//! let hp = train::Hyperparams::for_features(ds.p());
//! let fit = train::fit_pipeline(&ds, &hp, &mut rng::seeded(7, rng::Role::Fit))?;
//! println!("kept {:?}", fit.kept);
//! # Ok::<(), xnn::XnnError>(())
//! ```

pub mod bench;
pub mod cli;
pub mod data;
pub mod diff;
pub mod error;
pub mod model;
pub mod optim;
pub mod persist;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Result, XnnError};
pub use model::XnnModel;
pub use train::Hyperparams;
