//! Reverse-mode differentiation over a recorded op sequence.
//!
//! A [`Graph`] owns every intermediate value. Ops append a node holding the
//! forward value and, when any input requires a gradient, a closure mapping
//! the output gradient to input gradients. [`Graph::backward`] replays the
//! nodes in reverse and accumulates.

use std::rc::Rc;

use crate::batchnorm::{self, BNState};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    grad: Option<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph on which every leaf is a constant; no backward closures are kept.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), no_grad: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(t),
            grad: None,
            requires_grad: requires_grad && !self.no_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Accumulates `d root / d node` into every node that requires a gradient.
    /// `root` must hold a single element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::ones(&shape));
        for i in (0..=root.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                let parent_grads = bw(&grad);
                let parents = self.nodes[i].parents.clone();
                for (p, g) in parents.into_iter().zip(parent_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut self.nodes[p].grad {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, &[a, b], |g| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.rc(a), self.rc(b));
        let out = ops::hadamard(&av, &bv)?;
        Ok(self.push(out, &[a, b], move |g| {
            vec![
                Some(g.zip_map(&bv, |x, y| x * y).unwrap()),
                Some(g.zip_map(&av, |x, y| x * y).unwrap()),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], move |g| vec![Some(g.scale(s))])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = ops::relu(&av);
        self.push(out, &[a], move |g| {
            vec![Some(g.zip_map(&av, |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap())]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.value(a).shape().to_vec();
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, &[a], move |g| vec![Some(g.reshape(&from).unwrap())]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(a), perm)?;
        let inv = ops::inverse_permutation(perm);
        Ok(self.push(out, &[a], move |g| vec![Some(ops::permute(g, &inv).unwrap())]))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.value(a).shape().to_vec();
        let out = ops::broadcast_to(self.value(a), shape)?;
        Ok(self.push(out, &[a], move |g| vec![Some(ops::unbroadcast(g, &from))]))
    }

    pub fn mean_over_tail(&mut self, a: Var, tail_rank: usize) -> Result<Var> {
        let from = self.value(a).shape().to_vec();
        let out = ops::mean_over_tail(self.value(a), tail_rank)?;
        let inner: usize = from[from.len() - tail_rank..].iter().product();
        Ok(self.push(out, &[a], move |g| {
            let data = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v / inner as f64, inner))
                .collect();
            vec![Some(Tensor::new(from.clone(), data).unwrap())]
        }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let from = self.value(a).shape().to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], move |g| vec![Some(Tensor::full(&from, g.data()[0]))])
    }

    /// Sums axis 0 away, keeping it as an extent-1 axis. Each output is
    /// accumulated in ascending value order, so permuting the rows of `a`
    /// gives a bit-identical result.
    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let from = self.value(a).shape().to_vec();
        let inner: usize = from[1..].iter().product();
        let data = self.value(a).data();
        let mut column = Vec::with_capacity(from[0]);
        let acc: Vec<f64> = (0..inner)
            .map(|i| {
                column.clear();
                column.extend(data[i..].iter().step_by(inner));
                column.sort_by(f64::total_cmp);
                column.iter().sum()
            })
            .collect();
        let mut shape = from.clone();
        shape[0] = 1;
        let out = Tensor::new(shape, acc).unwrap();
        self.push(out, &[a], move |g| {
            vec![Some(ops::broadcast_to(g, &from).unwrap())]
        })
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let from = self.value(a).shape().to_vec();
        if len == 0 || start + len > from[0] {
            return Err(Error::shape(format!("slice {start}..{} of {:?}", start + len, from)));
        }
        let inner: usize = from[1..].iter().product();
        let mut shape = from.clone();
        shape[0] = len;
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, &[a], move |g| {
            let mut full = vec![0.0; from.iter().product()];
            full[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(Tensor::new(from.clone(), full).unwrap())]
        }))
    }

    /// Concatenates along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?);
        let tail = first.shape()[1..].to_vec();
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape(format!("concat0: {:?} vs {:?}", t.shape(), tail)));
            }
            rows.push(t.shape()[0]);
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows.iter().sum()];
        shape.extend_from_slice(&tail);
        let inner: usize = tail.iter().product();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, parts, move |g| {
            let mut offset = 0;
            rows.iter()
                .map(|&r| {
                    let mut s = vec![r];
                    s.extend_from_slice(&tail);
                    let part = g.data()[offset * inner..(offset + r) * inner].to_vec();
                    offset += r;
                    Some(Tensor::new(s, part).unwrap())
                })
                .collect()
        }))
    }

    pub fn unfold(&mut self, a: Var, k: usize) -> Result<Var> {
        let out = ops::unfold_planes(self.value(a), k)?;
        Ok(self.push(out, &[a], move |g| vec![Some(ops::fold_planes(g, k))]))
    }

    /// 1×1 convolution on `c×h×w` or `batch×c×h×w`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let out = ops::conv1x1(&xv, &wv, self.value(b))?;
        Ok(self.push(out, &[x, w, b], move |g| {
            let r = xv.rank();
            let batch = if r == 4 { xv.shape()[0] } else { 1 };
            let c_in = xv.shape()[r - 3];
            let hw = xv.shape()[r - 2] * xv.shape()[r - 1];
            let c_out = wv.shape()[0];
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            let mut db = vec![0.0; c_out];
            for n in 0..batch {
                let gs = &g.data()[n * c_out * hw..(n + 1) * c_out * hw];
                let xs = &xv.data()[n * c_in * hw..(n + 1) * c_in * hw];
                ops::gemm_at(wv.data(), gs, &mut dx[n * c_in * hw..(n + 1) * c_in * hw], c_in, c_out, hw);
                ops::gemm_bt(gs, xs, &mut dw, c_out, hw, c_in);
                for o in 0..c_out {
                    db[o] += gs[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            }
            vec![
                Some(Tensor::new(xv.shape().to_vec(), dx).unwrap()),
                Some(Tensor::new(wv.shape().to_vec(), dw).unwrap()),
                Some(Tensor::from_vec(db)),
            ]
        }))
    }

    /// `x·wᵀ + b` for `x: batch×in`, `w: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let out = ops::linear(&xv, &wv, self.value(b))?;
        Ok(self.push(out, &[x, w, b], move |g| {
            let (batch, d_in) = (xv.shape()[0], xv.shape()[1]);
            let d_out = wv.shape()[0];
            let mut dx = vec![0.0; xv.len()];
            ops::gemm(g.data(), wv.data(), &mut dx, batch, d_out, d_in);
            let mut dw = vec![0.0; wv.len()];
            ops::gemm_at(g.data(), xv.data(), &mut dw, d_out, batch, d_in);
            let mut db = vec![0.0; d_out];
            for row in g.data().chunks(d_out) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![
                Some(Tensor::new(xv.shape().to_vec(), dx).unwrap()),
                Some(Tensor::new(wv.shape().to_vec(), dw).unwrap()),
                Some(Tensor::from_vec(db)),
            ]
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.rc(a), self.rc(b));
        let out = ops::matmul(&av, &bv)?;
        Ok(self.push(out, &[a, b], move |g| {
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let mut da = vec![0.0; m * k];
            ops::gemm_bt(g.data(), bv.data(), &mut da, m, n, k);
            let mut db = vec![0.0; k * n];
            ops::gemm_at(av.data(), g.data(), &mut db, k, m, n);
            vec![
                Some(Tensor::new(vec![m, k], da).unwrap()),
                Some(Tensor::new(vec![k, n], db).unwrap()),
            ]
        }))
    }

    /// Same-padded convolution, see [`ops::conv2d`].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let out = ops::conv2d(&xv, &wv, self.value(b))?;
        let x_needs = self.requires_grad(x);
        Ok(self.push(out, &[x, w, b], move |g| {
            let [batch, c_in, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
            let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
            let hw = h * wd;
            let ckk = c_in * k * k;
            let mut dx = vec![0.0; if x_needs { xv.len() } else { 0 }];
            let mut dw = vec![0.0; wv.len()];
            let mut db = vec![0.0; c_out];
            let mut dcols = vec![0.0; ckk * hw];
            for n in 0..batch {
                let gs = &g.data()[n * c_out * hw..(n + 1) * c_out * hw];
                let img = &xv.data()[n * c_in * hw..(n + 1) * c_in * hw];
                let cols = ops::im2col(img, c_in, h, wd, k);
                ops::gemm_bt(gs, &cols, &mut dw, c_out, hw, ckk);
                for o in 0..c_out {
                    db[o] += gs[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
                if x_needs {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    ops::gemm_at(wv.data(), gs, &mut dcols, ckk, c_out, hw);
                    ops::col2im(&dcols, c_in, h, wd, k, &mut dx[n * c_in * hw..(n + 1) * c_in * hw]);
                }
            }
            vec![
                x_needs.then(|| Tensor::new(xv.shape().to_vec(), dx).unwrap()),
                Some(Tensor::new(wv.shape().to_vec(), dw).unwrap()),
                Some(Tensor::from_vec(db)),
            ]
        }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let from = self.value(x).shape().to_vec();
        let (out, arg) = ops::max_pool2(self.value(x))?;
        Ok(self.push(out, &[x], move |g| {
            let mut dx = vec![0.0; from.iter().product()];
            for (&i, &v) in arg.iter().zip(g.data()) {
                dx[i] += v;
            }
            vec![Some(Tensor::new(from.clone(), dx).unwrap())]
        }))
    }

    /// Batch norm over axis 1 with learnable `gamma`/`beta`. In train mode the
    /// running statistics of `state` are updated in place.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BNState) -> Result<Var> {
        let gv = self.rc(gamma);
        let (out, cache, stats) = batchnorm::forward(self.value(x), &gv, self.value(beta), state)?;
        if let Some((mean, var, count)) = stats {
            state.absorb(&mean, &var, count);
        }
        Ok(self.push(out, &[x, gamma, beta], move |g| {
            let (dx, dg, db) = batchnorm::backward(g, &gv, &cache);
            vec![Some(dx), Some(dg), Some(db)]
        }))
    }

    /// See [`ops::channel_weighted_sum`]; `weights` is a constant.
    pub fn channel_weighted_sum(&mut self, x: Var, weights: Rc<Tensor>) -> Result<Var> {
        let from = self.value(x).shape().to_vec();
        let out = ops::channel_weighted_sum(self.value(x), &weights)?;
        Ok(self.push(out, &[x], move |g| {
            let c = weights.shape()[0];
            let hw = weights.len() / c;
            let mut dx = vec![0.0; from.iter().product()];
            for (row, gv) in g.data().iter().enumerate() {
                let ch = row % c;
                let ws = &weights.data()[ch * hw..(ch + 1) * hw];
                for (d, w) in dx[row * hw..(row + 1) * hw].iter_mut().zip(ws) {
                    *d = gv * w;
                }
            }
            vec![Some(Tensor::new(from.clone(), dx).unwrap())]
        }))
    }

    /// Pairwise squared Euclidean distances between rows of `a` and `b`.
    pub fn squared_distances(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.rc(a), self.rc(b));
        let out = ops::squared_distances(&av, &bv)?;
        Ok(self.push(out, &[a, b], move |g| {
            let (m, d) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[0];
            let mut da = vec![0.0; m * d];
            let mut db = vec![0.0; n * d];
            for i in 0..m {
                for j in 0..n {
                    let gij = 2.0 * g.data()[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for t in 0..d {
                        let diff = av.data()[i * d + t] - bv.data()[j * d + t];
                        da[i * d + t] += gij * diff;
                        db[j * d + t] -= gij * diff;
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![m, d], da).unwrap()),
                Some(Tensor::new(vec![n, d], db).unwrap()),
            ]
        }))
    }

    /// Mean softmax cross-entropy over rows; returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.rc(logits);
        let loss = ops::cross_entropy(&lv, labels)?;
        let labels = labels.to_vec();
        Ok(self.push(Tensor::scalar(loss), &[logits], move |g| {
            let m = lv.shape()[0];
            let n = lv.shape()[1];
            let mut p = ops::softmax_rows(&lv).unwrap();
            let scale = g.data()[0] / m as f64;
            for (i, &y) in labels.iter().enumerate() {
                p.data_mut()[i * n + y] -= 1.0;
            }
            vec![Some(p.scale(scale))]
        }))
    }
}
