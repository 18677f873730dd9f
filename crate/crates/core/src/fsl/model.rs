//! Backbone, kernel generator(s) and context module wired into an episodic
//! ProtoNet classifier.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::batchnorm::BnMode;
use crate::error::{Error, Result};
use crate::fsl::backbone::BackboneParams;
use crate::fsl::data::mix64;
use crate::fsl::episode::Episode;
use crate::fsl::variant::{AblationVariant, QueryKernel, SupportKernel};
use crate::generator::{self, Encoder, GeneratorParams, GeneratorVars};
use crate::insta::{self, ContextParams};
use crate::msa::FrequencySelection;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of each backbone block.
    pub widths: Vec<usize>,
    /// Whether each backbone block ends with a 2×2 max pool.
    pub pools: Vec<bool>,
    pub sigma: f64,
    pub k: usize,
    pub temperature: f64,
    /// Explicit `[u, v]` list; defaults to the lowest frequencies fitting the feature map.
    pub frequencies: Option<Vec<[usize; 2]>>,
    pub mlp_bias: bool,
    pub bn_affine: bool,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 16, 32, 32],
            pools: vec![true, true, true, false],
            sigma: 0.2,
            k: 3,
            temperature: 64.0,
            frequencies: None,
            mlp_bias: true,
            bn_affine: true,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub generator: GeneratorParams,
    /// Separate task-kernel generator, only for the unshared variant.
    pub task_generator: Option<GeneratorParams>,
    pub context: ContextParams,
    pub temperature: f64,
}

/// Graph handles for every learnable tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: Vec<[Var; 4]>,
    pub generator: GeneratorVars,
    pub task_generator: Option<GeneratorVars>,
    pub context: [Var; 8],
}

impl ModelParams {
    /// Fresh parameters for `variant`; every sub-module draws from its own
    /// seed derived from `seed`, so variants share identical backbone,
    /// generator and context initializations.
    pub fn init(
        cfg: &ModelConfig,
        image_size: [usize; 3],
        variant: AblationVariant,
        seed: u64,
    ) -> Result<Self> {
        if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
            return Err(Error::Config(format!("model.temperature must be positive, got {}", cfg.temperature)));
        }
        let mut backbone = BackboneParams::init(image_size[0], &cfg.widths, &cfg.pools, mix64(seed ^ 1))?;
        let (c, h, w) = backbone.output_shape(image_size[1], image_size[2]);
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("backbone pools {:?} shrink {image_size:?} to nothing", cfg.pools)));
        }
        let encoder = if variant.uses_gap() {
            Encoder::Gap
        } else {
            let sel = match &cfg.frequencies {
                Some(pairs) => FrequencySelection::new(pairs.clone())?,
                None => FrequencySelection::for_shape(c, h, w)?,
            };
            if c % sel.n() != 0 {
                return Err(Error::Config(format!("{} frequency groups do not divide {c} channels", sel.n())));
            }
            if sel.pairs().iter().any(|&[u, v]| u >= h || v >= w) {
                return Err(Error::Config(format!("frequency pair outside the {h}×{w} feature map")));
            }
            Encoder::Msa(sel)
        };
        let make_gen = |s: u64| -> Result<GeneratorParams> {
            let mut g = GeneratorParams::init(c, cfg.sigma, cfg.k, encoder.clone(), s)?;
            g.mlp_bias = cfg.mlp_bias;
            for bn in [&mut g.bn_ch, &mut g.bn_sp] {
                bn.affine = cfg.bn_affine;
                bn.momentum = cfg.bn_momentum;
            }
            Ok(g)
        };
        let generator = make_gen(mix64(seed ^ 2))?;
        let task_generator = if variant.shares_generator() { None } else { Some(make_gen(mix64(seed ^ 3))?) };
        for b in &mut backbone.blocks {
            b.bn.momentum = cfg.bn_momentum;
            b.bn.affine = cfg.bn_affine;
        }
        Ok(Self {
            backbone,
            generator,
            task_generator,
            context: ContextParams::init(c, mix64(seed ^ 4)),
            temperature: cfg.temperature,
        })
    }

    pub fn feature_shape(&self, image_h: usize, image_w: usize) -> (usize, usize, usize) {
        self.backbone.output_shape(image_h, image_w)
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.backbone.set_mode(mode);
        self.generator.set_mode(mode);
        if let Some(t) = &mut self.task_generator {
            t.set_mode(mode);
        }
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            backbone: self.backbone.bind(g),
            generator: self.generator.bind(g),
            task_generator: self.task_generator.as_ref().map(|t| t.bind(g)),
            context: self.context.bind(g),
        }
    }

    /// Plain SGD: backbone tensors move with `lr_backbone`, generator and
    /// context tensors with `lr_adapt`.
    pub fn sgd_step(&mut self, g: &Graph, vars: &ModelVars, lr_backbone: f64, lr_adapt: f64) {
        let step = |t: &mut Tensor, v: Var, lr: f64| {
            if let Some(grad) = g.grad(v) {
                for (x, d) in t.data_mut().iter_mut().zip(grad.data()) {
                    *x -= lr * d;
                }
            }
        };
        let bb_vars = vars.backbone.iter().flatten().copied();
        for (t, v) in self.backbone.learnable_mut().into_iter().zip(bb_vars) {
            step(t, v, lr_backbone);
        }
        for (t, v) in self.generator.learnable_mut().into_iter().zip(vars.generator.list()) {
            step(t, v, lr_adapt);
        }
        if let (Some(tg), Some(tv)) = (&mut self.task_generator, &vars.task_generator) {
            for (t, v) in tg.learnable_mut().into_iter().zip(tv.list()) {
                step(t, v, lr_adapt);
            }
        }
        for (t, v) in self.context.learnable_mut().into_iter().zip(vars.context) {
            step(t, v, lr_adapt);
        }
    }

    /// Every tensor (learnable and running statistics) under a stable name.
    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (n, t) in self.backbone.state_mut() {
            out.push((format!("backbone.{n}"), t));
        }
        for (n, t) in self.generator.state_mut() {
            out.push((format!("generator.{n}"), t));
        }
        if let Some(tg) = &mut self.task_generator {
            for (n, t) in tg.state_mut() {
                out.push((format!("task_generator.{n}"), t));
            }
        }
        for (n, t) in ContextParams::NAMES.iter().zip(self.context.learnable_mut()) {
            out.push((format!("context.{n}"), t));
        }
        out
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut copy = self.clone();
        copy.state_mut().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    fn check_variant(&self, variant: AblationVariant) -> Result<()> {
        let gap = self.generator.encoder == Encoder::Gap;
        if variant.uses_gap() != gap && variant.support_kernel() != SupportKernel::None {
            return Err(Error::invalid(format!(
                "variant ({variant}) needs a {} encoder",
                if variant.uses_gap() { "GAP" } else { "MSA" }
            )));
        }
        if !variant.shares_generator() && self.task_generator.is_none() {
            return Err(Error::invalid(format!("variant ({variant}) needs a separate task generator")));
        }
        Ok(())
    }
}

/// Test hooks for the adaptation path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdaptOptions {
    /// Replace every instance kernel by all-ones.
    pub force_instance_ones: bool,
}

/// Applies the variant's kernels to `NK×c×h×w` support and `NQ×c×h×w` query
/// features. The shared generator sees supports, the task summary and (for
/// query instance kernels) the queries as one batch.
pub fn adapt_graph_episode(
    g: &mut Graph,
    model: &mut ModelParams,
    vars: &ModelVars,
    support: Var,
    query: Var,
    variant: AblationVariant,
    opts: AdaptOptions,
) -> Result<(Var, Var)> {
    model.check_variant(variant)?;
    if variant.support_kernel() == SupportKernel::None && variant.query_kernel() == QueryKernel::None {
        return Ok((support, query));
    }
    let nk = g.value(support).shape()[0];
    let nq = g.value(query).shape()[0];
    let kernel_shape = {
        let s = g.value(support).shape();
        vec![s[1], s[2], s[3], model.generator.k, model.generator.k]
    };
    let with_batch = |b: usize| {
        let mut s = vec![b];
        s.extend_from_slice(&kernel_shape);
        s
    };

    let summary = if variant.needs_task_kernel() {
        Some(insta::context_graph(g, &vars.context, support)?)
    } else {
        None
    };

    let (mut instance, task, query_instance) = match (&mut model.task_generator, &vars.task_generator) {
        (Some(task_gen), Some(task_vars)) => {
            let inst = generator::generate(g, &vars.generator, &mut model.generator, support)?.fused;
            let summary = summary.expect("unshared variants use the task kernel");
            let task = generator::generate(g, task_vars, task_gen, summary)?.fused;
            (Some(inst), Some(task), None)
        }
        _ => match summary {
            Some(summary) => {
                let mut parts = vec![support, summary];
                let with_queries = variant.query_kernel() == QueryKernel::InstaQuery;
                if with_queries {
                    parts.push(query);
                }
                let batch = g.concat0(&parts)?;
                let all = generator::generate(g, &vars.generator, &mut model.generator, batch)?.fused;
                let inst = g.slice0(all, 0, nk)?;
                let task = g.slice0(all, nk, 1)?;
                let q_inst = if with_queries { Some(g.slice0(all, nk + 1, nq)?) } else { None };
                (Some(inst), Some(task), q_inst)
            }
            None => {
                let inst = generator::generate(g, &vars.generator, &mut model.generator, support)?.fused;
                (Some(inst), None, None)
            }
        },
    };
    if opts.force_instance_ones {
        if let Some(inst) = &mut instance {
            *inst = g.constant(Tensor::ones(&with_batch(nk)));
        }
    }

    let task_for = |g: &mut Graph, b: usize| -> Result<Var> {
        g.broadcast_to(task.expect("task kernel"), &with_batch(b))
    };

    let support_kernel = match variant.support_kernel() {
        SupportKernel::None => None,
        SupportKernel::Task => Some(task_for(g, nk)?),
        SupportKernel::Instance => instance,
        SupportKernel::Insta => {
            let t = task_for(g, nk)?;
            Some(g.hadamard(instance.expect("instance kernel"), t)?)
        }
    };
    let query_kernel = match variant.query_kernel() {
        QueryKernel::None => None,
        QueryKernel::Task => Some(task_for(g, nq)?),
        QueryKernel::InstaQuery => {
            let t = task_for(g, nq)?;
            Some(g.hadamard(query_instance.expect("query instance kernel"), t)?)
        }
    };
    let adapted_support = match support_kernel {
        Some(kern) => insta::adapt_graph(g, support, kern)?,
        None => support,
    };
    let adapted_query = match query_kernel {
        Some(kern) => insta::adapt_graph(g, query, kern)?,
        None => query,
    };
    Ok((adapted_support, adapted_query))
}

/// Value-level adaptation of backbone features.
pub fn adapt_episode(
    support_features: &Tensor,
    query_features: &Tensor,
    model: &mut ModelParams,
    variant: AblationVariant,
    opts: AdaptOptions,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::inference();
    let vars = model.bind(&mut g);
    let s = g.constant(support_features.clone());
    let q = g.constant(query_features.clone());
    let (a, b) = adapt_graph_episode(&mut g, model, &vars, s, q, variant, opts)?;
    Ok((g.value(a).clone(), g.value(b).clone()))
}

fn averaging_matrix(labels: &[usize], way: usize, shot: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; way];
    for &l in labels {
        if l >= way {
            return Err(Error::invalid(format!("label {l} out of range for {way} classes")));
        }
        counts[l] += 1;
    }
    if let Some((class, &n)) = counts.iter().enumerate().find(|(_, &n)| n != shot) {
        return Err(Error::invalid(format!("class {class} has {n} supports, expected {shot}")));
    }
    let mut a = Tensor::zeros(&[way, labels.len()]);
    for (j, &l) in labels.iter().enumerate() {
        a.set(&[l, j], 1.0 / shot as f64);
    }
    Ok(a)
}

fn flatten_rows(t: &Tensor) -> Result<Tensor> {
    let n = t.shape()[0];
    t.reshape(&[n, t.len() / n])
}

/// Class means of the flattened adapted supports, `N×d`.
pub fn prototypes(adapted_supports: &Tensor, labels: &[usize], way: usize, shot: usize) -> Result<Tensor> {
    if labels.len() != adapted_supports.shape()[0] {
        return Err(Error::shape(format!(
            "{} labels for {} supports",
            labels.len(),
            adapted_supports.shape()[0]
        )));
    }
    ops::matmul(&averaging_matrix(labels, way, shot)?, &flatten_rows(adapted_supports)?)
}

/// `logit[q, i] = −‖query_q − prototype_i‖² / temperature`.
pub fn classify(adapted_queries: &Tensor, prototypes: &Tensor, temperature: f64) -> Result<Tensor> {
    Ok(ops::squared_distances(&flatten_rows(adapted_queries)?, prototypes)?.scale(-1.0 / temperature))
}

/// Mean cross-entropy over queries.
pub fn episode_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    ops::cross_entropy(logits, labels)
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeOutput {
    pub logits: Var,
    pub loss: Var,
    pub support_features: Var,
    pub query_features: Var,
}

/// Images → features → adaptation → prototypes → logits → loss, all on `g`.
pub fn episode_forward(
    g: &mut Graph,
    model: &mut ModelParams,
    vars: &ModelVars,
    episode: &Episode,
    variant: AblationVariant,
    opts: AdaptOptions,
) -> Result<EpisodeOutput> {
    let nk = episode.support_images.shape()[0];
    let nq = episode.query_images.shape()[0];
    let images = Tensor::concat0(&[episode.support_images.clone(), episode.query_images.clone()])?;
    let x = g.constant(images);
    let features = model.backbone.forward_graph(g, &vars.backbone, x)?;
    let support = g.slice0(features, 0, nk)?;
    let query = g.slice0(features, nk, nq)?;
    let (s, q) = adapt_graph_episode(g, model, vars, support, query, variant, opts)?;
    let (logits, loss) = protonet_head(
        g,
        s,
        q,
        &episode.support_labels,
        &episode.query_labels,
        episode.way,
        episode.shot,
        model.temperature,
    )?;
    Ok(EpisodeOutput { logits, loss, support_features: support, query_features: query })
}

/// Prototype logits and mean query cross-entropy for adapted features.
#[allow(clippy::too_many_arguments)]
pub fn protonet_head(
    g: &mut Graph,
    support: Var,
    query: Var,
    support_labels: &[usize],
    query_labels: &[usize],
    way: usize,
    shot: usize,
    temperature: f64,
) -> Result<(Var, Var)> {
    let nk = g.value(support).shape()[0];
    let nq = g.value(query).shape()[0];
    let d = g.value(support).len() / nk;
    let s_flat = g.reshape(support, &[nk, d])?;
    let q_flat = g.reshape(query, &[nq, d])?;
    let avg = g.constant(averaging_matrix(support_labels, way, shot)?);
    let protos = g.matmul(avg, s_flat)?;
    let dist = g.squared_distances(q_flat, protos)?;
    let logits = g.scale(dist, -1.0 / temperature);
    let loss = g.cross_entropy(logits, query_labels)?;
    Ok((logits, loss))
}
