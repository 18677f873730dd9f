//! Finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` builds the function on a fresh graph from the leaf variables it is
/// given and returns the scalar output. The result is the largest
/// `|analytic − numeric| / max(1, |analytic|)` over every coordinate of
/// every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let analytic = analytic_grads(&f, inputs)?;
    let mut worst = 0.0f64;
    let mut flat = 0usize;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].len() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = evaluate(&f, &work, flat)?;
            work[which].data_mut()[i] = orig - eps;
            let minus = evaluate(&f, &work, flat)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            if !numeric.is_finite() {
                return Err(Error::Numeric { index: flat, message: "non-finite difference".into() });
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            flat += 1;
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Tape gradients of `f` at `inputs`, zero-filled where the output does not depend on an input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    check_scalar(&g, out, 0)?;
    g.backward(out)?;
    vars.iter()
        .zip(inputs)
        .enumerate()
        .map(|(i, (&v, t))| {
            let grad = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            if !grad.is_finite() {
                let offset: usize = inputs[..i].iter().map(Tensor::len).sum();
                let bad = grad.data().iter().position(|x| !x.is_finite()).unwrap_or(0);
                return Err(Error::Numeric {
                    index: offset + bad,
                    message: "non-finite analytic gradient".into(),
                });
            }
            Ok(grad)
        })
        .collect()
}

fn evaluate<F>(f: &F, inputs: &[Tensor], index: usize) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    check_scalar(&g, out, index)?;
    Ok(g.value(out).data()[0])
}

fn check_scalar(g: &Graph, out: Var, index: usize) -> Result<()> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape(format!("grad_check needs a scalar output, got {:?}", v.shape())));
    }
    if !v.data()[0].is_finite() {
        return Err(Error::Numeric { index, message: "non-finite function value".into() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.hadamard(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_closed_form() {
        let logits = Tensor::zeros(&[2, 4]);
        let labels = [1usize, 3];
        let f = |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &labels);
        let grads = analytic_grads(&f, std::slice::from_ref(&logits)).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..4 {
                let onehot = if j == y { 1.0 } else { 0.0 };
                let want = (0.25 - onehot) / 2.0;
                assert!((grads[0].at(&[i, j]) - want).abs() < 1e-15);
            }
        }
        assert!(grad_check_many(f, &[logits], 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn non_finite_value_reports_numeric_error() {
        let x = Tensor::from_vec(vec![f64::NAN]);
        let res = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5);
        assert!(matches!(res, Err(Error::Numeric { .. })));
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(matches!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2), Err(Error::InvalidArgument(_))));
    }
}
