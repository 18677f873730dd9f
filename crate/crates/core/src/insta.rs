//! Instance kernels, task kernel, their fusion, and dynamic convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorParams};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Channel,
    Spatial,
    Dyn,
    Instance,
    Task,
    Insta,
}

/// A `c×h×w×k×k` kernel tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicKernel {
    values: Tensor,
    kind: KernelKind,
}

impl DynamicKernel {
    pub fn new(values: Tensor, kind: KernelKind) -> Result<Self> {
        let s = values.shape();
        if s.len() != 5 || s[3] != s[4] {
            return Err(Error::shape(format!("dynamic kernel must be c×h×w×k×k, got {s:?}")));
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.values.shape()[4]
    }
}

/// Context module: two per-sample 1×1 convs, a sum over the support set,
/// then two more 1×1 convs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextParams {
    pub pre_w1: Tensor,
    pub pre_b1: Tensor,
    pub pre_w2: Tensor,
    pub pre_b2: Tensor,
    pub post_w1: Tensor,
    pub post_b1: Tensor,
    pub post_w2: Tensor,
    pub post_b2: Tensor,
}

impl ContextParams {
    pub fn init(c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (c as f64).sqrt();
        let mut w = || Tensor::uniform(&[c, c], bound, &mut rng);
        let (pre_w1, pre_w2, post_w1, post_w2) = (w(), w(), w(), w());
        let b = || Tensor::zeros(&[c]);
        Self {
            pre_w1,
            pre_b1: b(),
            pre_w2,
            pre_b2: b(),
            post_w1,
            post_b1: b(),
            post_w2,
            post_b2: b(),
        }
    }

    /// All four layers are identity maps.
    pub fn identity(c: usize) -> Self {
        let (i, z) = (Tensor::eye(c), Tensor::zeros(&[c]));
        Self {
            pre_w1: i.clone(),
            pre_b1: z.clone(),
            pre_w2: i.clone(),
            pre_b2: z.clone(),
            post_w1: i.clone(),
            post_b1: z.clone(),
            post_w2: i,
            post_b2: z,
        }
    }

    pub fn channels(&self) -> usize {
        self.pre_w1.shape()[0]
    }

    pub const NAMES: [&'static str; 8] =
        ["pre_w1", "pre_b1", "pre_w2", "pre_b2", "post_w1", "post_b1", "post_w2", "post_b2"];

    pub fn learnable(&self) -> [&Tensor; 8] {
        [
            &self.pre_w1,
            &self.pre_b1,
            &self.pre_w2,
            &self.pre_b2,
            &self.post_w1,
            &self.post_b1,
            &self.post_w2,
            &self.post_b2,
        ]
    }

    pub fn learnable_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.pre_w1,
            &mut self.pre_b1,
            &mut self.pre_w2,
            &mut self.pre_b2,
            &mut self.post_w1,
            &mut self.post_b1,
            &mut self.post_w2,
            &mut self.post_b2,
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> [Var; 8] {
        self.learnable().map(|t| g.param(t.clone()))
    }
}

/// Task summary `S̃` (`1×c×h×w`) of a `batch×c×h×w` support stack.
pub fn context_graph(g: &mut Graph, ctx: &[Var; 8], supports: Var) -> Result<Var> {
    let [pw1, pb1, pw2, pb2, qw1, qb1, qw2, qb2] = *ctx;
    let x = g.conv1x1(supports, pw1, pb1)?;
    let x = g.relu(x);
    let x = g.conv1x1(x, pw2, pb2)?;
    let x = g.sum_axis0(x);
    let x = g.conv1x1(x, qw1, qb1)?;
    let x = g.relu(x);
    g.conv1x1(x, qw2, qb2)
}

/// `mean_{p,q}(unfold(F) ⊙ G) + F` on `batch×c×h×w` features and
/// `batch×c×h×w×k×k` kernels.
pub fn adapt_graph(g: &mut Graph, features: Var, kernels: Var) -> Result<Var> {
    let ks = g.value(kernels).shape().to_vec();
    let fs = g.value(features).shape().to_vec();
    if ks.len() != fs.len() + 2 || ks[..fs.len()] != fs[..] || ks[fs.len()] != ks[fs.len() + 1] {
        return Err(Error::shape(format!("features {fs:?} do not match kernels {ks:?}")));
    }
    let k = ks[fs.len()];
    let patches = g.unfold(features, k)?;
    let weighted = g.hadamard(patches, kernels)?;
    let conv = g.mean_over_tail(weighted, 2)?;
    g.add(conv, features)
}

fn check_uniform(items: &[Tensor], what: &str) -> Result<()> {
    let first = items.first().ok_or_else(|| Error::invalid(format!("{what}: empty list")))?;
    first.expect_rank(3, what)?;
    for t in items {
        first.expect_same_shape(t)?;
    }
    Ok(())
}

/// One instance kernel per support map. The supports are normalized as one
/// batch when the generator is in train mode.
pub fn instance_kernels(supports: &[Tensor], gen: &mut GeneratorParams) -> Result<Vec<DynamicKernel>> {
    check_uniform(supports, "instance_kernels")?;
    let mut g = Graph::new();
    let v = gen.bind(&mut g);
    let x = g.constant(Tensor::stack(supports)?);
    let parts = generator::generate(&mut g, &v, gen, x)?;
    let all = g.value(parts.fused);
    (0..supports.len())
        .map(|i| DynamicKernel::new(all.select0(i), KernelKind::Instance))
        .collect()
}

/// Aggregates the support set into one `c×h×w` task summary.
pub fn context_summary(supports: &[Tensor], ctx: &ContextParams) -> Result<Tensor> {
    check_uniform(supports, "context_summary")?;
    let mut g = Graph::new();
    let vars = ctx.learnable().map(|t| g.constant(t.clone()));
    let x = g.constant(Tensor::stack(supports)?);
    let s = context_graph(&mut g, &vars, x)?;
    Ok(g.value(s).select0(0))
}

/// Runs the (shared) generator on the task summary.
pub fn task_kernel(summary: &Tensor, gen: &mut GeneratorParams) -> Result<DynamicKernel> {
    summary.expect_rank(3, "task_kernel")?;
    let values = generator::dynamic_kernel(summary, gen)?;
    DynamicKernel::new(values, KernelKind::Task)
}

/// `G^in ⊙ G^ta`.
pub fn fuse_insta(inst: &DynamicKernel, task: &DynamicKernel) -> Result<DynamicKernel> {
    if inst.kind != KernelKind::Instance || task.kind != KernelKind::Task {
        return Err(Error::invalid(format!(
            "fuse_insta needs (instance, task) kernels, got ({:?}, {:?})",
            inst.kind, task.kind
        )));
    }
    DynamicKernel::new(ops::hadamard(&inst.values, &task.values)?, KernelKind::Insta)
}

fn check_pair(f: &Tensor, kernel: &DynamicKernel) -> Result<()> {
    f.expect_rank(3, "adapt")?;
    if kernel.values.shape()[..3] != f.shape()[..] {
        return Err(Error::shape(format!(
            "feature map {:?} does not match kernel {:?}",
            f.shape(),
            kernel.values.shape()
        )));
    }
    Ok(())
}

/// Dynamic convolution with residual: `mean_{p,q}(unfold(F) ⊙ G) + F`.
pub fn adapt(f: &Tensor, kernel: &DynamicKernel) -> Result<Tensor> {
    check_pair(f, kernel)?;
    let k = kernel.k();
    let patches = ops::unfold(f, k)?;
    let conv = ops::mean_over_tail(&ops::hadamard(&patches, &kernel.values)?, 2)?;
    ops::add(&conv, f)
}

/// Explicit sliding-window form of the dynamic convolution (no residual):
/// every output pixel averages its zero-padded `k×k` neighbourhood weighted
/// by that pixel's own kernel.
pub fn dynamic_conv_oracle(f: &Tensor, kernel: &DynamicKernel) -> Result<Tensor> {
    check_pair(f, kernel)?;
    let [c, h, w] = [f.shape()[0], f.shape()[1], f.shape()[2]];
    let k = kernel.k();
    let half = (k as isize - 1) / 2;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for a in 0..h {
            for b in 0..w {
                let mut acc = 0.0;
                for p in 0..k {
                    for q in 0..k {
                        let ia = a as isize + p as isize - half;
                        let ib = b as isize + q as isize - half;
                        let pixel = if ia >= 0 && ia < h as isize && ib >= 0 && ib < w as isize {
                            f.at(&[ch, ia as usize, ib as usize])
                        } else {
                            0.0
                        };
                        acc += pixel * kernel.values.at(&[ch, a, b, p, q]);
                    }
                }
                out.set(&[ch, a, b], acc / (k * k) as f64);
            }
        }
    }
    Ok(out)
}
