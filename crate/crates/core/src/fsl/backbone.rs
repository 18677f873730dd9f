//! Small convolutional feature extractor: blocks of 3×3 conv, BN, ReLU and
//! an optional 2×2 max pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::batchnorm::{BNState, BnMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BNState,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub blocks: Vec<ConvBlock>,
}

impl BackboneParams {
    pub fn init(in_channels: usize, widths: &[usize], pools: &[bool], seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.len() != pools.len() {
            return Err(Error::Config(format!(
                "backbone needs matching non-empty widths and pools, got {} and {}",
                widths.len(),
                pools.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = in_channels;
        let mut blocks = Vec::with_capacity(widths.len());
        for (&c_out, &pool) in widths.iter().zip(pools) {
            let bound = 1.0 / ((c_in * 9) as f64).sqrt();
            blocks.push(ConvBlock {
                weight: Tensor::uniform(&[c_out, c_in, 3, 3], bound, &mut rng),
                bias: Tensor::zeros(&[c_out]),
                bn: BNState::new(c_out),
                pool,
            });
            c_in = c_out;
        }
        Ok(Self { blocks })
    }

    /// Feature extents `(c, h, w)` for an `H×W` input.
    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let pools = self.blocks.iter().filter(|b| b.pool).count() as u32;
        let c = self.blocks.last().map(|b| b.weight.shape()[0]).unwrap_or(0);
        (c, h >> pools, w >> pools)
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].weight.shape()[1]
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.blocks.iter_mut().for_each(|b| b.bn.mode = mode);
    }

    /// `[weight, bias, gamma, beta]` per block.
    pub fn bind(&self, g: &mut Graph) -> Vec<[Var; 4]> {
        self.blocks
            .iter()
            .map(|b| {
                [
                    g.param(b.weight.clone()),
                    g.param(b.bias.clone()),
                    g.leaf(b.bn.gamma.clone(), b.bn.affine),
                    g.leaf(b.bn.beta.clone(), b.bn.affine),
                ]
            })
            .collect()
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.bias, &mut b.bn.gamma, &mut b.bn.beta])
            .collect()
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let BNState { gamma, beta, running_mean, running_var, .. } = &mut b.bn;
            for (name, t) in [
                ("weight", &mut b.weight),
                ("bias", &mut b.bias),
                ("bn.gamma", gamma),
                ("bn.beta", beta),
                ("bn.running_mean", running_mean),
                ("bn.running_var", running_var),
            ] {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out
    }

    /// `batch×3×H×W` images to `batch×c×h×w` features.
    pub fn forward_graph(&mut self, g: &mut Graph, vars: &[[Var; 4]], images: Var) -> Result<Var> {
        let mut x = images;
        for (block, &[w, b, gamma, beta]) in self.blocks.iter_mut().zip(vars) {
            x = g.conv2d(x, w, b)?;
            x = g.batch_norm(x, gamma, beta, &mut block.bn)?;
            x = g.relu(x);
            if block.pool {
                x = g.max_pool2(x)?;
            }
        }
        Ok(x)
    }
}

/// Value-level feature extraction.
pub fn backbone_forward(images: &Tensor, params: &mut BackboneParams) -> Result<Tensor> {
    images.expect_rank(4, "backbone input")?;
    if images.shape()[1] != params.in_channels() {
        return Err(Error::shape(format!(
            "backbone expects {} input channels, got {:?}",
            params.in_channels(),
            images.shape()
        )));
    }
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let x = g.constant(images.clone());
    let out = params.forward_graph(&mut g, &vars, x)?;
    Ok(g.value(out).clone())
}
