//! Shared fixtures for the benchmarks.

use ren_core::config::{DatasetFamily, ExperimentConfig};
use ren_core::datasets::{load_split, Split};
use ren_core::{build_model, RenModel, Tensor};

/// A toy experiment with the default model, plus its training rows.
pub fn toy_fixture(latent_dim: usize) -> (ExperimentConfig, RenModel, Tensor) {
    let mut cfg = ExperimentConfig::defaults(DatasetFamily::OneMoon);
    cfg.model.latent_dim = latent_dim;
    let model = build_model(&cfg).expect("default toy model builds");
    let data = load_split(&cfg, Split::Train).expect("toy data generates");
    (cfg, model, data)
}
