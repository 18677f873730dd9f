//! Episodic few-shot pipeline at toy scale.

pub mod data;
pub mod episode;
pub mod backbone;
pub mod variant;
pub mod model;
pub mod train;
pub mod eval;
pub mod ablation;

pub use ablation::{ablate, AblationConfig, AblationRow};
pub use backbone::{backbone_forward, BackboneParams};
pub use data::{Split, SyntheticTaskConfig};
pub use episode::{sample_episode, Episode};
pub use eval::{evaluate, EvalConfig, EvalReport};
pub use model::{adapt_episode, classify, episode_loss, prototypes, AdaptOptions, ModelConfig, ModelParams};
pub use train::{train, TrainConfig, TrainOutcome};
pub use variant::AblationVariant;
