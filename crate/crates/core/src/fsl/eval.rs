//! Episode-level accuracy with a normal-approximation 95% interval.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::batchnorm::BnMode;
use crate::error::{Error, Result};
use crate::fsl::data::{Split, SyntheticTaskConfig};
use crate::fsl::episode::{episode_rng, sample_episode};
use crate::fsl::model::{episode_forward, AdaptOptions, ModelParams};
use crate::fsl::train::StreamDigest;
use crate::fsl::variant::AblationVariant;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 600, way: 5, shot: 5, queries: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episode_accuracies: Vec<f64>,
    pub mean: f64,
    /// `1.96 · s / √n` with the sample standard deviation `s`.
    pub ci95: f64,
    pub episode_count: usize,
}

impl EvalReport {
    pub fn from_accuracies(episode_accuracies: Vec<f64>) -> Result<Self> {
        let n = episode_accuracies.len();
        if n < 2 {
            return Err(Error::invalid(format!("a confidence interval needs ≥ 2 episodes, got {n}")));
        }
        let mean = compensated_sum(episode_accuracies.iter().copied()) / n as f64;
        let var = compensated_sum(episode_accuracies.iter().map(|a| (a - mean).powi(2))) / (n - 1) as f64;
        Ok(Self { ci95: 1.96 * var.sqrt() / (n as f64).sqrt(), mean, episode_count: n, episode_accuracies })
    }
}

// Neumaier summation; a run of identical accuracies averages back to itself.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Row-wise argmax (first index on ties).
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = predictions(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Evaluates `model` (BN in eval mode) on the seed's evaluation episode stream.
pub fn evaluate(
    model: &ModelParams,
    data: &SyntheticTaskConfig,
    cfg: &EvalConfig,
    variant: AblationVariant,
    seed: u64,
) -> Result<EvalReport> {
    Ok(evaluate_with_digest(model, data, cfg, variant, seed)?.0)
}

pub(crate) fn evaluate_with_digest(
    model: &ModelParams,
    data: &SyntheticTaskConfig,
    cfg: &EvalConfig,
    variant: AblationVariant,
    seed: u64,
) -> Result<(EvalReport, String)> {
    if cfg.episodes < 2 {
        return Err(Error::invalid(format!("a confidence interval needs ≥ 2 episodes, got {}", cfg.episodes)));
    }
    data.validate()?;
    let mut model = model.clone();
    model.set_mode(BnMode::Eval);
    let mut digest = StreamDigest::default();
    let mut accs = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let mut rng = episode_rng(seed, Split::Eval, e as u64);
        let episode = sample_episode(data, Split::Eval, cfg.way, cfg.shot, cfg.queries, &mut rng)?;
        digest.update(&episode.draw());
        let mut g = Graph::inference();
        let vars = model.bind(&mut g);
        let out = episode_forward(&mut g, &mut model, &vars, &episode, variant, AdaptOptions::default())?;
        accs.push(accuracy(g.value(out.logits), &episode.query_labels));
    }
    Ok((EvalReport::from_accuracies(accs)?, digest.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn always_class_zero_is_chance() {
        let labels: Vec<usize> = (0..5).flat_map(|c| std::iter::repeat_n(c, 15)).collect();
        let logits = Tensor::zeros(&[75, 5]);
        let accs: Vec<f64> = (0..10).map(|_| accuracy(&logits, &labels)).collect();
        let r = EvalReport::from_accuracies(accs).unwrap();
        assert_eq!(r.mean, 0.2);
        assert_eq!(r.ci95, 0.0);
    }

    #[test]
    fn perfect_episodes() {
        let r = EvalReport::from_accuracies(vec![1.0; 7]).unwrap();
        assert_eq!((r.mean, r.ci95, r.episode_count), (1.0, 0.0, 7));
    }

    #[test]
    fn ci_formula() {
        let accs = vec![0.5, 0.7, 0.9, 0.6];
        let r = EvalReport::from_accuracies(accs.clone()).unwrap();
        let m = 2.7 / 4.0;
        let s = (accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 3.0).sqrt();
        assert!((r.ci95 - 1.96 * s / 2.0).abs() < 1e-12);
        assert!(EvalReport::from_accuracies(vec![1.0]).is_err());
    }
}
