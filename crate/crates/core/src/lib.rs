//! Proximity-constrained fine-tuning.
//!
//! Adam-based optimizers that keep fine-tuned parameters close to their
//! pretrained values, either through a penalty (L2-SP), a hard ℓ2 ball
//! (TPGM), a conditional projection with one global strength (SPD) or a
//! per-module strength that decays along the model stack (MAPS). A small
//! experiment harness runs pretrain → fine-tune pipelines on toy networks
//! and records how far each module drifts.

pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tasks;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use metrics::{ComparisonTable, MetricsRecord, MetricsTable};
pub use model::{build_model, ModelSpec, Network};
pub use optim::{AdamHyper, ProximalAdam, ProximityMode, ProximityPolicy, Schedule, StepReport};
pub use params::{FreezeMask, ModelParameters, ParameterGroup};
