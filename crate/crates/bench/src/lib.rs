//! Shared fixtures for the criterion benches.

use privit_core::data::{gen_synthetic, DatasetSplit};
use privit_core::vit::{Model, ModelConfig};
use privit_core::Rng;

/// Desk-scale model with fresh switches and a batch of synthetic images.
pub fn desk_fixture(batch: usize) -> (Model, DatasetSplit) {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 0.001, &mut Rng::new(0)).expect("desk config");
    let per_class = batch.div_ceil(cfg.num_classes);
    let data = gen_synthetic(cfg.num_classes, per_class, cfg.image_size, cfg.channels, 0).expect("synthetic");
    (model, data)
}
