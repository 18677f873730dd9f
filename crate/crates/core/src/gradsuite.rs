//! Finite-difference checks for every differentiable op and the composed
//! modules, from single ops up to a full micro-episode.

use std::cell::RefCell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::batchnorm::BNState;
use crate::error::Result;
use crate::fsl::backbone::BackboneParams;
use crate::fsl::model::{adapt_graph_episode, protonet_head, AdaptOptions, ModelParams, ModelVars};
use crate::fsl::variant::AblationVariant;
use crate::generator::{self, Encoder, GeneratorParams, GeneratorVars};
use crate::gradcheck::grad_check_many;
use crate::insta::{self, ContextParams};
use crate::msa::FrequencySelection;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

/// Fixed random linear functional so that vector outputs reduce to a scalar
/// with a non-degenerate gradient.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let p = g.hadamard(x, w)?;
    Ok(g.sum(p))
}

struct Suite {
    rng: RefCell<ChaCha8Rng>,
    eps: f64,
    entries: Vec<GradCheckEntry>,
}

impl Suite {
    fn rand(&self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut *self.rng.borrow_mut())
    }

    fn check<F>(&mut self, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let err = grad_check_many(|g, v| { let y = f(g, v)?; probe(g, y, 7) }, &inputs, self.eps)?;
        self.entries.push(GradCheckEntry { name: name.to_string(), max_rel_err: err });
        Ok(())
    }
}

fn micro_generator(c: usize, h: usize, w: usize, seed: u64) -> Result<GeneratorParams> {
    GeneratorParams::init(c, 0.25, 3, Encoder::Msa(FrequencySelection::for_shape(c, h, w)?), seed)
}

/// Runs the whole suite; each entry is the worst relative error of one check.
pub fn run_suite(seed: u64, eps: f64) -> Result<Vec<GradCheckEntry>> {
    let mut out = op_checks(seed, eps)?;
    out.extend(module_checks(seed, eps)?);
    Ok(out)
}

/// One check per differentiable graph op.
pub fn op_checks(seed: u64, eps: f64) -> Result<Vec<GradCheckEntry>> {
    let mut s = Suite { rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)), eps, entries: Vec::new() };

    let (a, b) = (s.rand(&[2, 3, 4]), s.rand(&[2, 3, 4]));
    s.check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))?;
    s.check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))?;
    s.check("hadamard", vec![a.clone(), b], |g, v| g.hadamard(v[0], v[1]))?;
    s.check("scale", vec![a.clone()], |g, v| Ok(g.scale(v[0], -1.7)))?;
    s.check("relu", vec![a.clone()], |g, v| Ok(g.relu(v[0])))?;
    s.check("reshape", vec![a.clone()], |g, v| g.reshape(v[0], &[6, 4]))?;
    s.check("permute", vec![a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]))?;
    s.check("broadcast_to", vec![s.rand(&[2, 1, 4])], |g, v| g.broadcast_to(v[0], &[2, 3, 4]))?;
    s.check("mean_over_tail", vec![s.rand(&[2, 3, 3, 3])], |g, v| g.mean_over_tail(v[0], 2))?;
    s.check("sum_axis0", vec![a.clone()], |g, v| Ok(g.sum_axis0(v[0])))?;
    s.check("slice0", vec![s.rand(&[4, 3])], |g, v| g.slice0(v[0], 1, 2))?;
    s.check("concat0", vec![a, s.rand(&[1, 3, 4])], |g, v| g.concat0(&[v[0], v[1]]))?;
    s.check("unfold", vec![s.rand(&[2, 3, 4, 4])], |g, v| g.unfold(v[0], 3))?;
    s.check("conv1x1", vec![s.rand(&[2, 3, 3, 3]), s.rand(&[4, 3]), s.rand(&[4])], |g, v| {
        g.conv1x1(v[0], v[1], v[2])
    })?;
    s.check("linear", vec![s.rand(&[3, 5]), s.rand(&[4, 5]), s.rand(&[4])], |g, v| g.linear(v[0], v[1], v[2]))?;
    s.check("matmul", vec![s.rand(&[3, 5]), s.rand(&[5, 2])], |g, v| g.matmul(v[0], v[1]))?;
    s.check("conv2d", vec![s.rand(&[2, 2, 5, 5]), s.rand(&[3, 2, 3, 3]), s.rand(&[3])], |g, v| {
        g.conv2d(v[0], v[1], v[2])
    })?;
    s.check("max_pool2", vec![s.rand(&[2, 2, 4, 4])], |g, v| g.max_pool2(v[0]))?;
    s.check("batch_norm", vec![s.rand(&[4, 3, 2, 2]), s.rand(&[3]), s.rand(&[3])], |g, v| {
        let mut st = BNState::new(3);
        g.batch_norm(v[0], v[1], v[2], &mut st)
    })?;
    let sel = FrequencySelection::lowest(4, 3, 3)?;
    let weights = Rc::new(sel.weights(8, 3, 3)?);
    s.check("channel_weighted_sum", vec![s.rand(&[2, 8, 3, 3])], move |g, v| {
        g.channel_weighted_sum(v[0], weights.clone())
    })?;
    s.check("squared_distances", vec![s.rand(&[3, 4]), s.rand(&[2, 4])], |g, v| g.squared_distances(v[0], v[1]))?;
    s.check("cross_entropy", vec![s.rand(&[4, 3]).scale(3.0)], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))?;
    s.check("dynamic_conv", vec![s.rand(&[2, 3, 4, 4]), s.rand(&[2, 3, 4, 4, 3, 3])], |g, v| {
        insta::adapt_graph(g, v[0], v[1])
    })?;
    Ok(s.entries)
}

/// Generator, context module, full micro-episodes and a micro backbone.
pub fn module_checks(seed: u64, eps: f64) -> Result<Vec<GradCheckEntry>> {
    let mut s = Suite { rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f64)), eps, entries: Vec::new() };
    let (c, h, w) = (8, 3, 3);
    let gen = micro_generator(c, h, w, 11)?;
    let mut inputs = vec![s.rand(&[3, c, h, w])];
    inputs.extend(gen.learnable().into_iter().cloned());
    s.check("generator", inputs, |g, v| {
        let mut p = gen.clone();
        generator::generate(g, &GeneratorVars::from_slice(&v[1..]), &mut p, v[0]).map(|k| k.fused)
    })?;

    let ctx = ContextParams::init(c, 12);
    let mut inputs = vec![s.rand(&[4, c, h, w])];
    inputs.extend(ctx.learnable().into_iter().cloned());
    s.check("context", inputs, |g, v| {
        let vars: [Var; 8] = v[1..].try_into().expect("eight context tensors");
        insta::context_graph(g, &vars, v[0])
    })?;

    for variant in [AblationVariant::Ix, AblationVariant::Viii] {
        let name = format!("pipeline_{}", variant.id());
        let entry = micro_episode(&mut s, variant)?;
        s.entries.push(GradCheckEntry { name, max_rel_err: entry });
    }

    let mut bb = BackboneParams::init(3, &[4, 4], &[true, false], 13)?;
    bb.blocks.iter_mut().for_each(|b| b.bn.gamma = Tensor::full(&[b.bn.channels()], 1.3));
    let mut inputs = vec![s.rand(&[4, 3, 8, 8])];
    inputs.extend(bb.learnable_mut().into_iter().map(|t| t.clone()));
    s.check("backbone", inputs, |g, v| {
        let mut p = bb.clone();
        let vars: Vec<[Var; 4]> = v[1..].chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        p.forward_graph(g, &vars, v[0])
    })?;

    Ok(s.entries)
}

/// 2-way 2-shot episode on `8×3×3` features, one query per class; every
/// feature, generator and context tensor is a checked input.
fn micro_episode(s: &mut Suite, variant: AblationVariant) -> Result<f64> {
    let (c, h, w) = (8, 3, 3);
    let gen = micro_generator(c, h, w, 21)?;
    let task_gen = if variant.shares_generator() { None } else { Some(micro_generator(c, h, w, 22)?) };
    let model = ModelParams {
        backbone: BackboneParams { blocks: Vec::new() },
        generator: gen,
        task_generator: task_gen,
        context: ContextParams::init(c, 23),
        temperature: 4.0,
    };
    let mut inputs = vec![s.rand(&[4, c, h, w]), s.rand(&[2, c, h, w])];
    inputs.extend(model.generator.learnable().into_iter().cloned());
    inputs.extend(model.context.learnable().into_iter().cloned());
    if let Some(t) = &model.task_generator {
        inputs.extend(t.learnable().into_iter().cloned());
    }
    grad_check_many(
        |g, v| {
            let mut m = model.clone();
            let vars = ModelVars {
                backbone: Vec::new(),
                generator: GeneratorVars::from_slice(&v[2..12]),
                context: v[12..20].try_into().expect("eight context tensors"),
                task_generator: m.task_generator.as_ref().map(|_| GeneratorVars::from_slice(&v[20..30])),
            };
            let (sa, qa) = adapt_graph_episode(g, &mut m, &vars, v[0], v[1], variant, AdaptOptions::default())?;
            Ok(protonet_head(g, sa, qa, &[0, 0, 1, 1], &[0, 1], 2, 2, m.temperature)?.1)
        },
        &inputs,
        s.eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_is_linear() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let y = probe(&mut g, x, 3).unwrap();
        g.backward(y).unwrap();
        let grad = g.grad(x).unwrap().clone();
        let dot: f64 = grad.data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a * b).sum();
        assert!((dot - g.value(y).data()[0]).abs() < 1e-12);
    }
}
