//! Trains and evaluates every ablation variant on identical episode streams.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsl::data::SyntheticTaskConfig;
use crate::fsl::eval::{evaluate_with_digest, EvalConfig, EvalReport};
use crate::fsl::model::ModelConfig;
use crate::fsl::train::{train, TrainConfig};
use crate::fsl::variant::AblationVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub variants: Vec<AblationVariant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { train_episodes: 300, eval_episodes: 200, variants: AblationVariant::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub model: String,
    pub apply_to_support: String,
    pub apply_to_query: String,
    pub report: EvalReport,
    pub final_train_loss: f64,
    pub train_stream: String,
    pub eval_stream: String,
}

/// One row per variant, in the configured order. Every variant starts from the
/// same seed, so initial weights and all sampled episodes coincide.
pub fn ablate(
    data: &SyntheticTaskConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    cfg: &AblationConfig,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    cfg.variants
        .iter()
        .map(|&variant| {
            let tc = TrainConfig { episodes: cfg.train_episodes, variant, ..train_cfg.clone() };
            let outcome = train(data, model_cfg, &tc, seed)?;
            let ec = EvalConfig { episodes: cfg.eval_episodes, ..eval_cfg.clone() };
            let (report, eval_stream) = evaluate_with_digest(&outcome.model, data, &ec, variant, seed)?;
            Ok(AblationRow {
                variant,
                model: variant.model_name().to_string(),
                apply_to_support: variant.apply_to_support().to_string(),
                apply_to_query: variant.apply_to_query().to_string(),
                report,
                final_train_loss: outcome.curve.last().copied().unwrap_or(f64::NAN),
                train_stream: outcome.stream_digest,
                eval_stream,
            })
        })
        .collect()
}
