//! Batch normalization over axis 1 of a `batch×channels×…` tensor.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BNState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
    /// When false, gamma/beta stay at 1/0 and receive no updates.
    pub affine: bool,
}

impl BNState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            epsilon: 1e-5,
            mode: BnMode::Train,
            affine: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds batch statistics into the running estimates. `count` is the number
    /// of values per channel; variance is bias-corrected when `count > 1`.
    pub fn absorb(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.momentum;
        let correction = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
        for (r, v) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v * correction;
        }
    }
}

/// Per-channel statistics needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}

pub(crate) fn layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("batch_norm needs batch×channels×…, got {:?}", x.shape())));
    }
    if x.shape()[1] != channels {
        return Err(Error::shape(format!(
            "batch_norm: {} channels in state, input {:?}",
            channels,
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    let inner: usize = x.shape()[2..].iter().product();
    Ok((batch, inner))
}

/// Forward pass with explicit affine parameters. Returns the output, the
/// cache for the backward pass and, in train mode, `(mean, var, count)`.
pub(crate) fn forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &BNState,
) -> Result<(Tensor, BnCache, Option<(Vec<f64>, Vec<f64>, usize)>)> {
    let c = state.channels();
    let (batch, inner) = layout(x, c)?;
    if batch == 0 {
        return Err(Error::invalid("batch_norm on an empty batch"));
    }
    let count = batch * inner;
    let d = x.data();
    let (mean, var, stats) = match state.mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for n in 0..batch {
                for ch in 0..c {
                    let s = &d[(n * c + ch) * inner..(n * c + ch + 1) * inner];
                    mean[ch] += s.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for n in 0..batch {
                for ch in 0..c {
                    let s = &d[(n * c + ch) * inner..(n * c + ch + 1) * inner];
                    var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean.clone(), var.clone(), Some((mean, var, count)))
        }
        BnMode::Eval => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for ch in 0..c {
            let range = (n * c + ch) * inner..(n * c + ch + 1) * inner;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for i in range {
                let xh = (d[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BnCache { x_hat: Tensor::new(shape, x_hat)?, inv_std, mode: state.mode },
        stats,
    ))
}

/// Gradients `(dx, dgamma, dbeta)`.
pub(crate) fn backward(grad: &Tensor, gamma: &Tensor, cache: &BnCache) -> (Tensor, Tensor, Tensor) {
    let c = gamma.len();
    let batch = grad.shape()[0];
    let inner: usize = grad.shape()[2..].iter().product();
    let count = (batch * inner) as f64;
    let g = grad.data();
    let xh = cache.x_hat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for n in 0..batch {
        for ch in 0..c {
            for i in (n * c + ch) * inner..(n * c + ch + 1) * inner {
                dbeta[ch] += g[i];
                dgamma[ch] += g[i] * xh[i];
            }
        }
    }
    let mut dx = vec![0.0; grad.len()];
    for n in 0..batch {
        for ch in 0..c {
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            for i in (n * c + ch) * inner..(n * c + ch + 1) * inner {
                dx[i] = match cache.mode {
                    BnMode::Train => {
                        scale * (g[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                    }
                    BnMode::Eval => scale * g[i],
                };
            }
        }
    }
    (
        Tensor::new(grad.shape().to_vec(), dx).expect("bn dx"),
        Tensor::from_vec(dgamma),
        Tensor::from_vec(dbeta),
    )
}

/// Value-level batch norm: normalizes with batch statistics in train mode
/// (updating the running estimates) or with running statistics in eval mode.
pub fn batch_norm(x: &Tensor, state: &mut BNState) -> Result<Tensor> {
    let (out, _, stats) = forward(x, &state.gamma, &state.beta, state)?;
    if let Some((mean, var, count)) = stats {
        state.absorb(&mean, &var, count);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_maps_to_beta() {
        let mut st = BNState::new(3);
        st.beta = Tensor::full(&[3], 7.0);
        let y = batch_norm(&Tensor::full(&[4, 3, 2, 2], 2.5), &mut st).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn normalized_input_is_nearly_unchanged() {
        // per channel: values ±1 → mean 0, biased variance 1
        let x = Tensor::new(vec![2, 2, 1, 1], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let mut st = BNState::new(2);
        let y = batch_norm(&x, &mut st).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn batch_statistics_follow_gamma_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[8, 4, 5, 5], 3.0, &mut rng);
        let mut st = BNState::new(4);
        st.epsilon = 1e-12;
        st.gamma = Tensor::from_vec(vec![0.5, 2.0, -1.5, 1.0]);
        st.beta = Tensor::from_vec(vec![1.0, -2.0, 0.0, 3.0]);
        let y = batch_norm(&x, &mut st).unwrap();
        for ch in 0..4 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| y.at(&[n, ch, i / 5, i % 5]))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((m - st.beta.data()[ch]).abs() < 1e-9);
            assert!((v - st.gamma.data()[ch].powi(2)).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[5, 2, 3], 1.0, &mut rng);
        let mut st = BNState::new(2);
        batch_norm(&x, &mut st).unwrap();
        st.mode = BnMode::Eval;
        let full = batch_norm(&x, &mut st).unwrap();
        let one = batch_norm(&Tensor::stack(&[x.select0(2)]).unwrap(), &mut st).unwrap();
        assert_eq!(one.select0(0), full.select0(2));
    }

    #[test]
    fn running_stats_update_and_empty_batch() {
        let mut st = BNState::new(1);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        batch_norm(&x, &mut st).unwrap();
        // mean 2, biased var 1, unbiased 2
        assert!((st.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
        let single = Tensor::new(vec![1, 1], vec![4.0]).unwrap();
        assert!(batch_norm(&single, &mut st).unwrap().data()[0].is_finite());
    }
}
