//! Episodic SGD on the mean query cross-entropy.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::batchnorm::BnMode;
use crate::error::{Error, Result};
use crate::fsl::data::{Split, SyntheticTaskConfig};
use crate::fsl::episode::{episode_rng, sample_episode, EpisodeDraw};
use crate::fsl::model::{episode_forward, AdaptOptions, ModelConfig, ModelParams};
use crate::fsl::variant::AblationVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    /// Queries per class in each training episode.
    pub queries: usize,
    /// Backbone learning rate.
    pub lr: f64,
    /// Generator and context modules use `lr · adapt_lr_ratio`.
    pub adapt_lr_ratio: f64,
    pub variant: AblationVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            way: 5,
            shot: 5,
            queries: 5,
            lr: 0.002,
            adapt_lr_ratio: 25.0,
            variant: AblationVariant::Ix,
        }
    }
}

/// Running SHA-256 over the sequence of episode draws.
#[derive(Debug, Clone, Default)]
pub struct StreamDigest(Sha256);

impl StreamDigest {
    pub fn update(&mut self, draw: &EpisodeDraw) {
        self.0.update(serde_json::to_vec(draw).expect("draw serializes"));
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    /// Loss of every training episode, in order.
    pub curve: Vec<f64>,
    pub stream_digest: String,
}

/// Trains a freshly initialized model; fully determined by `seed` and the configs.
pub fn train(
    data: &SyntheticTaskConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let model = ModelParams::init(model_cfg, data.image_size, cfg.variant, seed)?;
    train_from(model, data, cfg, seed)
}

/// Continues training `model` over the seed's training episode stream.
pub fn train_from(
    mut model: ModelParams,
    data: &SyntheticTaskConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    data.validate()?;
    if !(cfg.lr >= 0.0 && cfg.adapt_lr_ratio >= 0.0) {
        return Err(Error::Config("learning rates must be non-negative".into()));
    }
    let lr_adapt = cfg.lr * cfg.adapt_lr_ratio;
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut digest = StreamDigest::default();
    model.set_mode(BnMode::Train);
    for e in 0..cfg.episodes {
        let mut rng = episode_rng(seed, Split::Train, e as u64);
        let episode = sample_episode(data, Split::Train, cfg.way, cfg.shot, cfg.queries, &mut rng)?;
        digest.update(&episode.draw());
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let out = episode_forward(&mut g, &mut model, &vars, &episode, cfg.variant, AdaptOptions::default())?;
        let loss = g.value(out.loss).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { episode: e, loss });
        }
        g.backward(out.loss)?;
        model.sgd_step(&g, &vars, cfg.lr, lr_adapt);
        curve.push(loss);
    }
    model.set_mode(BnMode::Eval);
    Ok(TrainOutcome { model, curve, stream_digest: digest.finish() })
}
