#![allow(dead_code)]

use insta_core::fsl::{ModelConfig, SyntheticTaskConfig};

/// 16×16 images, cheap enough for hundreds of episodes in a test.
pub fn tiny_data() -> SyntheticTaskConfig {
    SyntheticTaskConfig { image_size: [3, 16, 16], samples_per_class: 200, ..Default::default() }
}

/// Two pooled blocks: 8×4×4 features.
pub fn tiny_model() -> ModelConfig {
    ModelConfig { widths: vec![8, 8], pools: vec![true, true], ..Default::default() }
}
