//! Relevance-encoding variational autoencoders: a small reverse-mode autodiff
//! engine, the probabilistic model, training loop, data loaders and metrics.

pub mod autodiff;
pub mod config;
pub mod datasets;
pub mod distributions;
pub mod elbo;
pub mod error;
pub mod flows;
pub mod metrics;
pub mod networks;
pub mod rng;
pub mod special;
pub mod trainer;

pub use autodiff::{Adam, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
pub use config::{DatasetFamily, ExperimentConfig, FlowAlpha, Variant};
pub use error::{Error, Result};
pub use networks::checkpoint::Checkpoint;
pub use networks::{build_model, RenModel};
pub use trainer::{train, EpochRecord, TrainLog, Trainer};
