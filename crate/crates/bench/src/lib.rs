//! Shared fixtures for the benchmarks.

use dtunet_core::data::{generate_synthetic, SyntheticSpec};
use dtunet_core::model::ModelConfig;
use dtunet_core::{InputImage, SegmentationMask};

/// One synthetic image of side `size` with three curvilinear classes.
pub fn sample(size: usize, seed: u64) -> (InputImage, SegmentationMask) {
    let spec = SyntheticSpec {
        height: size,
        width: size,
        num_images: 1,
        rng_seed: seed,
        ..Default::default()
    };
    generate_synthetic(&spec).expect("valid spec").remove(0)
}

/// Reduced-width network used for desk-scale runs.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        depth: 3,
        base_channels: 8,
        norm_groups: 4,
        ..Default::default()
    }
}
