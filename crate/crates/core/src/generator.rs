//! Shared dynamic kernel generator.
//!
//! Two decoupled branches produce `c×h×w×k×k` kernels from a `c×h×w` feature
//! map. The channel branch encodes the map into a frequency descriptor, maps
//! it through a bottleneck MLP to `c·k²` values, normalizes and broadcasts
//! them over space. The spatial branch predicts `k²` taps per pixel with a
//! 1×1 convolution, normalizes and broadcasts them over channels. The
//! dynamic kernel is their elementwise product.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::batchnorm::{BNState, BnMode};
use crate::error::{Error, Result};
use crate::msa::{self, FrequencySelection};
use crate::ops;
use crate::tensor::Tensor;

/// Channel descriptor used by the channel branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Msa(FrequencySelection),
    Gap,
}

impl Encoder {
    pub fn weights(&self, c: usize, h: usize, w: usize) -> Result<Tensor> {
        match self {
            Encoder::Msa(sel) => sel.weights(c, h, w),
            Encoder::Gap => Ok(msa::gap_weights(c, h, w)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub sp_w: Tensor,
    pub sp_b: Tensor,
    pub bn_ch: BNState,
    pub bn_sp: BNState,
    pub sigma: f64,
    pub k: usize,
    pub encoder: Encoder,
    /// When false the MLP biases stay at zero.
    pub mlp_bias: bool,
}

/// `⌊σ·c⌋`, at least 1.
pub fn hidden_width(c: usize, sigma: f64) -> usize {
    ((sigma * c as f64).floor() as usize).max(1)
}

impl GeneratorParams {
    /// Fan-in scaled uniform weights, zero biases, identity BN affine.
    pub fn init(c: usize, sigma: f64, k: usize, encoder: Encoder, seed: u64) -> Result<Self> {
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::invalid(format!("sigma must lie in (0,1), got {sigma}")));
        }
        if k == 0 || k % 2 == 0 {
            return Err(Error::invalid(format!("kernel extent must be odd, got {k}")));
        }
        let hid = hidden_width(c, sigma);
        let kk = k * k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        Ok(Self {
            mlp_w1: Tensor::uniform(&[hid, c], fan(c), &mut rng),
            mlp_b1: Tensor::zeros(&[hid]),
            mlp_w2: Tensor::uniform(&[kk * c, hid], fan(hid), &mut rng),
            mlp_b2: Tensor::zeros(&[kk * c]),
            sp_w: Tensor::uniform(&[kk, c], fan(c), &mut rng),
            sp_b: Tensor::zeros(&[kk]),
            bn_ch: BNState::new(c),
            bn_sp: BNState::new(kk),
            sigma,
            k,
            encoder,
            mlp_bias: true,
        })
    }

    /// Every weight and bias zero.
    pub fn zeroed(c: usize, sigma: f64, k: usize, encoder: Encoder) -> Result<Self> {
        let mut p = Self::init(c, sigma, k, encoder, 0)?;
        for t in p.learnable_mut().into_iter().take(6) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.mlp_w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.mlp_w1.shape()[0]
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.bn_ch.mode = mode;
        self.bn_sp.mode = mode;
    }

    /// Learnable tensors in binding order.
    pub fn learnable(&self) -> [&Tensor; 10] {
        [
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.sp_w,
            &self.sp_b,
            &self.bn_ch.gamma,
            &self.bn_ch.beta,
            &self.bn_sp.gamma,
            &self.bn_sp.beta,
        ]
    }

    pub fn learnable_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.sp_w,
            &mut self.sp_b,
            &mut self.bn_ch.gamma,
            &mut self.bn_ch.beta,
            &mut self.bn_sp.gamma,
            &mut self.bn_sp.beta,
        ]
    }

    fn trainable_mask(&self) -> [bool; 10] {
        let (b, ch, sp) = (self.mlp_bias, self.bn_ch.affine, self.bn_sp.affine);
        [true, b, true, b, true, true, ch, ch, sp, sp]
    }

    pub const NAMES: [&'static str; 10] = [
        "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "sp_w", "sp_b", "bn_ch.gamma", "bn_ch.beta",
        "bn_sp.gamma", "bn_sp.beta",
    ];

    /// Learnable tensors plus BN running statistics, with stable names.
    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let names = Self::NAMES;
        let (bn_ch_stats, bn_sp_stats);
        {
            let Self { mlp_w1, mlp_b1, mlp_w2, mlp_b2, sp_w, sp_b, bn_ch, bn_sp, .. } = self;
            let BNState { gamma: cg, beta: cb, running_mean: cm, running_var: cv, .. } = bn_ch;
            let BNState { gamma: sg, beta: sb, running_mean: sm, running_var: sv, .. } = bn_sp;
            for (n, t) in names.iter().zip([mlp_w1, mlp_b1, mlp_w2, mlp_b2, sp_w, sp_b, cg, cb, sg, sb]) {
                out.push((n.to_string(), t));
            }
            bn_ch_stats = [("bn_ch.running_mean", cm), ("bn_ch.running_var", cv)];
            bn_sp_stats = [("bn_sp.running_mean", sm), ("bn_sp.running_var", sv)];
        }
        for (n, t) in bn_ch_stats.into_iter().chain(bn_sp_stats) {
            out.push((n.to_string(), t));
        }
        out
    }

    /// Puts the learnable tensors on the graph; frozen ones become constants.
    pub fn bind(&self, g: &mut Graph) -> GeneratorVars {
        let mask = self.trainable_mask();
        let vars: Vec<Var> = self
            .learnable()
            .into_iter()
            .zip(mask)
            .map(|(t, train)| g.leaf(t.clone(), train))
            .collect();
        GeneratorVars::from_slice(&vars)
    }
}

/// Graph handles for the learnable generator tensors.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub sp_w: Var,
    pub sp_b: Var,
    pub ch_gamma: Var,
    pub ch_beta: Var,
    pub sp_gamma: Var,
    pub sp_beta: Var,
}

impl GeneratorVars {
    /// Builds from handles in [`GeneratorParams::learnable`] order.
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            mlp_w1: v[0],
            mlp_b1: v[1],
            mlp_w2: v[2],
            mlp_b2: v[3],
            sp_w: v[4],
            sp_b: v[5],
            ch_gamma: v[6],
            ch_beta: v[7],
            sp_gamma: v[8],
            sp_beta: v[9],
        }
    }

    pub fn list(&self) -> [Var; 10] {
        [
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
            self.sp_w,
            self.sp_b,
            self.ch_gamma,
            self.ch_beta,
            self.sp_gamma,
            self.sp_beta,
        ]
    }
}

/// Channel, spatial and fused kernels for a batch, each `batch×c×h×w×k×k`.
#[derive(Debug, Clone, Copy)]
pub struct KernelParts {
    pub channel: Var,
    pub spatial: Var,
    pub fused: Var,
}

fn batch_dims(g: &Graph, x: Var) -> Result<[usize; 4]> {
    match *g.value(x).shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::shape(format!("generator expects batch×c×h×w, got {s:?}"))),
    }
}

/// Channel branch on a `batch×c×h×w` input.
pub fn channel_branch(g: &mut Graph, v: &GeneratorVars, p: &mut GeneratorParams, x: Var) -> Result<Var> {
    let [b, c, h, w] = batch_dims(g, x)?;
    let k = p.k;
    let weights = Rc::new(p.encoder.weights(c, h, w)?);
    let tau = g.channel_weighted_sum(x, weights)?;
    let hidden = g.linear(tau, v.mlp_w1, v.mlp_b1)?;
    let hidden = g.relu(hidden);
    let flat = g.linear(hidden, v.mlp_w2, v.mlp_b2)?;
    let kern = g.reshape(flat, &[b, c, k, k])?;
    let kern = g.batch_norm(kern, v.ch_gamma, v.ch_beta, &mut p.bn_ch)?;
    let kern = g.reshape(kern, &[b, c, 1, 1, k, k])?;
    g.broadcast_to(kern, &[b, c, h, w, k, k])
}

/// Spatial branch on a `batch×c×h×w` input.
pub fn spatial_branch(g: &mut Graph, v: &GeneratorVars, p: &mut GeneratorParams, x: Var) -> Result<Var> {
    let [b, c, h, w] = batch_dims(g, x)?;
    let k = p.k;
    let taps = g.conv1x1(x, v.sp_w, v.sp_b)?;
    let taps = g.batch_norm(taps, v.sp_gamma, v.sp_beta, &mut p.bn_sp)?;
    let taps = g.permute(taps, &[0, 2, 3, 1])?;
    let taps = g.reshape(taps, &[b, 1, h, w, k, k])?;
    g.broadcast_to(taps, &[b, c, h, w, k, k])
}

/// Runs both branches on a batch and fuses them. BN in train mode treats the
/// whole batch as one normalization group.
pub fn generate(g: &mut Graph, v: &GeneratorVars, p: &mut GeneratorParams, x: Var) -> Result<KernelParts> {
    let channel = channel_branch(g, v, p, x)?;
    let spatial = spatial_branch(g, v, p, x)?;
    let fused = g.hadamard(spatial, channel)?;
    Ok(KernelParts { channel, spatial, fused })
}

fn run_single(
    s: &Tensor,
    p: &mut GeneratorParams,
    branch: fn(&mut Graph, &GeneratorVars, &mut GeneratorParams, Var) -> Result<Var>,
) -> Result<Tensor> {
    s.expect_rank(3, "kernel generator input")?;
    let mut g = Graph::new();
    let v = p.bind(&mut g);
    let x = g.constant(Tensor::stack(std::slice::from_ref(s))?);
    let out = branch(&mut g, &v, p, x)?;
    Ok(g.value(out).select0(0))
}

/// Channel kernel `Ĝ^ch` of one `c×h×w` map.
pub fn channel_kernel(s: &Tensor, p: &mut GeneratorParams) -> Result<Tensor> {
    run_single(s, p, channel_branch)
}

/// Spatial kernel `Ĝ^sp` of one `c×h×w` map.
pub fn spatial_kernel(s: &Tensor, p: &mut GeneratorParams) -> Result<Tensor> {
    run_single(s, p, spatial_branch)
}

/// `Ĝ^sp ⊙ Ĝ^ch`.
pub fn fuse_channel_spatial(ch: &Tensor, sp: &Tensor) -> Result<Tensor> {
    ops::hadamard(sp, ch)
}

/// Dynamic kernel of one map through both branches.
pub fn dynamic_kernel(s: &Tensor, p: &mut GeneratorParams) -> Result<Tensor> {
    run_single(s, p, |g, v, p, x| Ok(generate(g, v, p, x)?.fused))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub dynamic: u64,
    pub standard: u64,
}

/// Size of a dynamic kernel (`c·h·w·k²`) against a static convolution
/// kernel (`c_out·c·k²`).
pub fn param_count_report(c: u64, c_out: u64, h: u64, w: u64, k: u64) -> ParamCount {
    ParamCount { dynamic: c * h * w * k * k, standard: c_out * c * k * k }
}
