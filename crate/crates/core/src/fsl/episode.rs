//! N-way K-shot episode sampling.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fsl::data::{mix64, Split, SyntheticTaskConfig};
use crate::tensor::Tensor;

/// One sampled task. Supports and queries are stored class-major:
/// row `i·K + j` is shot `j` of episode class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_images: Tensor,
    pub support_labels: Vec<usize>,
    pub query_images: Tensor,
    pub query_labels: Vec<usize>,
    pub way: usize,
    pub shot: usize,
    /// Dataset class behind each episode label.
    pub classes: Vec<usize>,
    pub support_indices: Vec<Vec<usize>>,
    pub query_indices: Vec<Vec<usize>>,
}

/// Which classes and sample indices an episode drew; enough to compare streams.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct EpisodeDraw {
    pub classes: Vec<usize>,
    pub support_indices: Vec<Vec<usize>>,
    pub query_indices: Vec<Vec<usize>>,
}

impl Episode {
    pub fn draw(&self) -> EpisodeDraw {
        EpisodeDraw {
            classes: self.classes.clone(),
            support_indices: self.support_indices.clone(),
            query_indices: self.query_indices.clone(),
        }
    }

    pub fn queries_per_class(&self) -> usize {
        self.query_labels.len() / self.way
    }
}

/// Independent generator for episode `index` of a stream; lets any episode be
/// reproduced without replaying its predecessors.
pub fn episode_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let stream = match split {
        Split::Train => 1u64,
        Split::Eval => 2u64,
    };
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed ^ (stream << 56)) ^ index))
}

/// Draws classes and sample indices only (no rendering).
pub fn sample_draw(
    cfg: &SyntheticTaskConfig,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeDraw> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::invalid("way, shot and queries must be positive"));
    }
    if way > cfg.class_count {
        return Err(Error::invalid(format!(
            "{way}-way episode from {} classes",
            cfg.class_count
        )));
    }
    if shot + queries > cfg.samples_per_class {
        return Err(Error::invalid(format!(
            "{} samples per class requested, {} available",
            shot + queries,
            cfg.samples_per_class
        )));
    }
    let classes = index::sample(rng, cfg.class_count, way).into_vec();
    let mut support_indices = Vec::with_capacity(way);
    let mut query_indices = Vec::with_capacity(way);
    for _ in 0..way {
        let picks = index::sample(rng, cfg.samples_per_class, shot + queries).into_vec();
        support_indices.push(picks[..shot].to_vec());
        query_indices.push(picks[shot..].to_vec());
    }
    Ok(EpisodeDraw { classes, support_indices, query_indices })
}

pub fn sample_episode(
    cfg: &SyntheticTaskConfig,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let draw = sample_draw(cfg, way, shot, queries, rng)?;
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    let mut support_labels = Vec::with_capacity(way * shot);
    let mut query_labels = Vec::with_capacity(way * queries);
    for (label, &class) in draw.classes.iter().enumerate() {
        for &i in &draw.support_indices[label] {
            support.push(cfg.render(class, i, split)?);
            support_labels.push(label);
        }
        for &i in &draw.query_indices[label] {
            query.push(cfg.render(class, i, split)?);
            query_labels.push(label);
        }
    }
    Ok(Episode {
        support_images: Tensor::stack(&support)?,
        support_labels,
        query_images: Tensor::stack(&query)?,
        query_labels,
        way,
        shot,
        classes: draw.classes,
        support_indices: draw.support_indices,
        query_indices: draw.query_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticTaskConfig {
        SyntheticTaskConfig { image_size: [3, 8, 8], ..Default::default() }
    }

    #[test]
    fn counts_and_disjointness() {
        let cfg = small();
        let ep = sample_episode(&cfg, Split::Train, 5, 5, 15, &mut episode_rng(0, Split::Train, 0)).unwrap();
        assert_eq!(ep.support_images.shape()[0], 25);
        assert_eq!(ep.query_images.shape()[0], 75);
        for label in 0..5 {
            assert_eq!(ep.support_labels.iter().filter(|&&l| l == label).count(), 5);
            for i in &ep.query_indices[label] {
                assert!(!ep.support_indices[label].contains(i));
            }
        }
        let mut classes = ep.classes.clone();
        classes.sort();
        classes.dedup();
        assert_eq!(classes.len(), 5);
        assert!(ep.query_labels.iter().all(|&l| l < 5));
    }

    #[test]
    fn same_rng_state_same_episode() {
        let cfg = small();
        let a = sample_episode(&cfg, Split::Eval, 3, 2, 4, &mut episode_rng(9, Split::Eval, 5)).unwrap();
        let b = sample_episode(&cfg, Split::Eval, 3, 2, 4, &mut episode_rng(9, Split::Eval, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_ways() {
        let cfg = small();
        let r = sample_draw(&cfg, 11, 1, 1, &mut episode_rng(0, Split::Train, 0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn class_frequencies_within_binomial_bound() {
        // each class is included with probability N / C = 1/2
        let cfg = small();
        let (episodes, way) = (1000usize, 5usize);
        let mut hits = vec![0usize; cfg.class_count];
        for e in 0..episodes {
            let d = sample_draw(&cfg, way, 1, 1, &mut episode_rng(3, Split::Train, e as u64)).unwrap();
            for c in d.classes {
                hits[c] += 1;
            }
        }
        let p = way as f64 / cfg.class_count as f64;
        let mean = episodes as f64 * p;
        let sd = (episodes as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - mean).abs() <= 5.0 * sd, "{h} vs {mean} ± {}", 5.0 * sd);
        }
    }
}
