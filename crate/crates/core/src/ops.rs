//! Value-level tensor operations.
//!
//! Every function here is a pure forward computation. The tape in
//! [`crate::autograd`] wraps them and supplies the matching backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `out[..., a, b, p, q] = x[..., a + p - r, b + q - r]` with zeros outside,
/// where `r = (k - 1) / 2`. Leading axes are treated as independent planes.
pub(crate) fn unfold_planes(x: &Tensor, k: usize) -> Result<Tensor> {
    check_odd(k)?;
    if x.rank() < 2 {
        return Err(Error::shape(format!("unfold needs a spatial input, got {:?}", x.shape())));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = x.len() / (h * w);
    let half = (k - 1) / 2;
    let kk = k * k;
    let mut out = vec![0.0; x.len() * kk];
    let src = x.data();
    for pl in 0..planes {
        let base = pl * h * w;
        for a in 0..h {
            for b in 0..w {
                let o = ((base + a * w + b) * kk) as isize;
                for p in 0..k {
                    let ia = a as isize + p as isize - half as isize;
                    if ia < 0 || ia >= h as isize {
                        continue;
                    }
                    for q in 0..k {
                        let ib = b as isize + q as isize - half as isize;
                        if ib < 0 || ib >= w as isize {
                            continue;
                        }
                        out[(o + (p * k + q) as isize) as usize] =
                            src[base + ia as usize * w + ib as usize];
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.extend([k, k]);
    Tensor::new(shape, out)
}

/// Adjoint of [`unfold_planes`]: scatters patch gradients back onto the map.
pub(crate) fn fold_planes(grad: &Tensor, k: usize) -> Tensor {
    let r = grad.rank();
    let (h, w) = (grad.shape()[r - 4], grad.shape()[r - 3]);
    let shape = &grad.shape()[..r - 2];
    let n: usize = shape.iter().product();
    let planes = n / (h * w);
    let half = (k - 1) / 2;
    let kk = k * k;
    let g = grad.data();
    let mut out = vec![0.0; n];
    for pl in 0..planes {
        let base = pl * h * w;
        for a in 0..h {
            for b in 0..w {
                let o = (base + a * w + b) * kk;
                for p in 0..k {
                    let ia = a as isize + p as isize - half as isize;
                    if ia < 0 || ia >= h as isize {
                        continue;
                    }
                    for q in 0..k {
                        let ib = b as isize + q as isize - half as isize;
                        if ib < 0 || ib >= w as isize {
                            continue;
                        }
                        out[base + ia as usize * w + ib as usize] += g[o + p * k + q];
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("fold shape")
}

/// Unfolds a `c×h×w` map into `c×h×w×k×k` zero-padded patches.
pub fn unfold(s: &Tensor, k: usize) -> Result<Tensor> {
    s.expect_rank(3, "unfold")?;
    unfold_planes(s, k)
}

fn check_odd(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("kernel extent must be odd and positive, got {k}")));
    }
    Ok(())
}

/// Splits `x` into `(batch, channels, spatial)` for rank-3 (implicit batch 1)
/// or rank-4 inputs.
fn batch_view(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((1, *c, h * w)),
        [b, c, h, w] => Ok((*b, *c, h * w)),
        s => Err(Error::shape(format!("{what}: expected rank 3 or 4, got {s:?}"))),
    }
}

/// Pointwise channel mixing: `out[o,a,b] = Σ_i w[o,i]·s[i,a,b] + bias[o]`.
/// Accepts `c×h×w` or `batch×c×h×w`.
pub fn conv1x1(s: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, c_in, hw) = batch_view(s, "conv1x1")?;
    w.expect_rank(2, "conv1x1 weight")?;
    let c_out = w.shape()[0];
    if w.shape()[1] != c_in || bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv1x1: input {:?}, weight {:?}, bias {:?}",
            s.shape(),
            w.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![0.0; batch * c_out * hw];
    for n in 0..batch {
        let x = &s.data()[n * c_in * hw..(n + 1) * c_in * hw];
        let y = &mut out[n * c_out * hw..(n + 1) * c_out * hw];
        gemm(w.data(), x, y, c_out, c_in, hw);
        for o in 0..c_out {
            let b = bias.data()[o];
            y[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += b);
        }
    }
    let mut shape = s.shape().to_vec();
    shape[s.rank() - 3] = c_out;
    Tensor::new(shape, out)
}

/// `x (batch×in) · wᵀ + b` with `w: out×in`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.expect_rank(2, "linear input")?;
    w.expect_rank(2, "linear weight")?;
    let (batch, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = w.shape()[0];
    if w.shape()[1] != d_in || b.shape() != [d_out] {
        return Err(Error::shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; batch * d_out];
    gemm_bt(x.data(), w.data(), &mut out, batch, d_in, d_out);
    for row in out.chunks_mut(d_out) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Tensor::new(vec![batch, d_out], out)
}

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    if b.shape()[0] != k {
        return Err(Error::shape(format!("matmul: {:?} · {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `c += a·b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let coeffs = &a[i * k..(i + 1) * k];
        axpy_rows(coeffs, b, &mut c[i * n..(i + 1) * n], n, 1);
    }
}

/// `row += Σ_p coeffs[p] · b[p]` where `b[p]` is the `p`-th length-`n` row of
/// `b` and `coeffs[p]` is read with stride `stride`. Four rows per pass keep
/// the accumulator row in registers/L1.
#[inline]
fn axpy_rows(coeffs: &[f64], b: &[f64], row: &mut [f64], n: usize, stride: usize) {
    let k = b.len() / n;
    let coef = |p: usize| coeffs[p * stride];
    let mut p = 0;
    while p + 4 <= k {
        let (c0, c1, c2, c3) = (coef(p), coef(p + 1), coef(p + 2), coef(p + 3));
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        let b2 = &b[(p + 2) * n..(p + 3) * n];
        let b3 = &b[(p + 3) * n..(p + 4) * n];
        for j in 0..n {
            row[j] += c0 * b0[j] + c1 * b1[j] + c2 * b2[j] + c3 * b3[j];
        }
        p += 4;
    }
    while p < k {
        let cp = coef(p);
        if cp != 0.0 {
            for (r, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *r += cp * bv;
            }
        }
        p += 1;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (xs, ys) in xc.zip(yc) {
        for t in 0..4 {
            acc[t] += xs[t] * ys[t];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c += a·bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += aᵀ·b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        axpy_rows(&a[i..], &b[..k * n], &mut c[i * n..(i + 1) * n], n, m);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    x.reshape(shape)
}

/// Averages the trailing `tail_rank` axes away.
pub fn mean_over_tail(x: &Tensor, tail_rank: usize) -> Result<Tensor> {
    if tail_rank == 0 || tail_rank >= x.rank() {
        return Err(Error::invalid(format!(
            "tail_rank {tail_rank} invalid for shape {:?}",
            x.shape()
        )));
    }
    let keep = &x.shape()[..x.rank() - tail_rank];
    let inner: usize = x.shape()[x.rank() - tail_rank..].iter().product();
    let data = x.data().chunks(inner).map(|c| c.iter().sum::<f64>() / inner as f64).collect();
    Tensor::new(keep.to_vec(), data)
}

/// Numpy-style broadcast of `x` to `shape`; ranks must match and every
/// source extent must be 1 or equal to the target extent.
pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    check_broadcast(x.shape(), shape)?;
    let n: usize = shape.iter().product();
    let src_strides: Vec<usize> = {
        let s = x.strides();
        s.iter().zip(x.shape()).map(|(&st, &d)| if d == 1 { 0 } else { st }).collect()
    };
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x.data()[off]);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn check_broadcast(from: &[usize], to: &[usize]) -> Result<()> {
    if from.len() != to.len() || from.iter().zip(to).any(|(&f, &t)| f != 1 && f != t) {
        return Err(Error::shape(format!("cannot broadcast {from:?} to {to:?}")));
    }
    Ok(())
}

/// Sums `grad` (target shape) back down to the broadcast source shape.
pub(crate) fn unbroadcast(grad: &Tensor, from: &[usize]) -> Tensor {
    let to = grad.shape();
    let src_strides: Vec<usize> = {
        let s = crate::tensor::strides_of(from);
        s.iter().zip(from).map(|(&st, &d)| if d == 1 { 0 } else { st }).collect()
    };
    let mut out = vec![0.0; from.iter().product()];
    let mut idx = vec![0usize; to.len()];
    let mut off = 0usize;
    for &g in grad.data() {
        out[off] += g;
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < to[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(from.to_vec(), out).expect("unbroadcast shape")
}

/// Reorders axes: `out.shape[i] = x.shape[perm[i]]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("bad permutation {perm:?} for rank {r}")));
    }
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let xs = x.strides();
    let strides: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(x.data()[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Same-padded stride-1 convolution: `x: batch×c_in×h×w`, `w: c_out×c_in×k×k`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.expect_rank(4, "conv2d input")?;
    w.expect_rank(4, "conv2d weight")?;
    let [batch, c_in, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [c_out, wc, k, k2] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    check_odd(k)?;
    if wc != c_in || k != k2 || b.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv2d: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let hw = h * wd;
    let mut out = vec![0.0; batch * c_out * hw];
    for n in 0..batch {
        let img = &x.data()[n * c_in * hw..(n + 1) * c_in * hw];
        let cols = im2col(img, c_in, h, wd, k);
        let y = &mut out[n * c_out * hw..(n + 1) * c_out * hw];
        gemm(w.data(), &cols, y, c_out, c_in * k * k, hw);
        for o in 0..c_out {
            let bv = b.data()[o];
            y[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![batch, c_out, h, wd], out)
}

/// Column matrix `(c·k·k) × (h·w)` for one image.
pub(crate) fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let half = (k - 1) as isize / 2;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        for p in 0..k {
            for q in 0..k {
                let row = ((ch * k + p) * k + q) * hw;
                let dy = p as isize - half;
                let dx = q as isize - half;
                for a in 0..h {
                    let ia = a as isize + dy;
                    if ia < 0 || ia >= h as isize {
                        continue;
                    }
                    let src = ch * hw + ia as usize * w;
                    let dst = row + a * w;
                    for bb in 0..w {
                        let ib = bb as isize + dx;
                        if ib >= 0 && ib < w as isize {
                            cols[dst + bb] = img[src + ib as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, img: &mut [f64]) {
    let half = (k - 1) as isize / 2;
    let hw = h * w;
    for ch in 0..c {
        for p in 0..k {
            for q in 0..k {
                let row = ((ch * k + p) * k + q) * hw;
                let dy = p as isize - half;
                let dx = q as isize - half;
                for a in 0..h {
                    let ia = a as isize + dy;
                    if ia < 0 || ia >= h as isize {
                        continue;
                    }
                    let dst = ch * hw + ia as usize * w;
                    for bb in 0..w {
                        let ib = bb as isize + dx;
                        if ib >= 0 && ib < w as isize {
                            img[dst + ib as usize] += cols[row + a * w + bb];
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 max pooling with stride 2 over the trailing two axes (floor on odd extents).
/// Returns the pooled tensor and the flat source index of each maximum.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() < 2 {
        return Err(Error::shape("max_pool2 needs spatial axes"));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!("max_pool2: spatial extent too small {:?}", x.shape())));
    }
    let planes = x.len() / (h * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for a in 0..oh {
            for b in 0..ow {
                let mut best = base + 2 * a * w + 2 * b;
                for (da, db) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * a + da) * w + 2 * b + db;
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok((Tensor::new(shape, out)?, arg))
}

/// Per-channel weighted spatial sum: `out[n, ch] = Σ_{a,b} x[n,ch,a,b]·weights[ch,a,b]`.
pub fn channel_weighted_sum(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (batch, c, hw) = batch_view(x, "channel_weighted_sum")?;
    if weights.len() != c * hw || weights.shape()[0] != c {
        return Err(Error::shape(format!(
            "weights {:?} do not match input {:?}",
            weights.shape(),
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(batch * c);
    for n in 0..batch {
        for ch in 0..c {
            let xs = &x.data()[(n * c + ch) * hw..(n * c + ch + 1) * hw];
            let ws = &weights.data()[ch * hw..(ch + 1) * hw];
            out.push(xs.iter().zip(ws).map(|(a, b)| a * b).sum());
        }
    }
    Tensor::new(vec![batch, c], out)
}

/// `out[i,j] = ‖a_i − b_j‖²` for `a: m×d`, `b: n×d`.
pub fn squared_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "squared_distances lhs")?;
    b.expect_rank(2, "squared_distances rhs")?;
    let (m, d) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    if b.shape()[1] != d {
        return Err(Error::shape(format!("distance dims {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &a.data()[i * d..(i + 1) * d];
        for j in 0..n {
            let br = &b.data()[j * d..(j + 1) * d];
            out.push(ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax of an `m×n` matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank(2, "softmax")?;
    let n = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy of row-wise softmax against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    logits.expect_rank(2, "cross_entropy")?;
    let (m, n) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != m {
        return Err(Error::shape(format!("{} labels for {m} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::invalid(format!("label {bad} out of range for {n} classes")));
    }
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(n).zip(labels) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / m as f64)
}
