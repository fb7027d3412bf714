//! Central finite-difference gradient checking.
//!
//! The numeric side rebuilds the forward pass from scratch for every
//! perturbed element, so it stays independent of the taped backward it is
//! used to verify.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Relative error with an absolute floor: differences below `floor` count as
/// equal regardless of magnitude.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    let denom = a.abs().max(b.abs());
    if denom < floor {
        if diff < floor {
            0.0
        } else {
            diff / floor
        }
    } else {
        diff / denom
    }
}

/// Gradients of a scalar-valued builder w.r.t. each input, by central
/// differences with step `h`.
pub fn finite_diff_grads<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).first())
    };

    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            grad.data_mut()[j] = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Gradients via the taped backward pass. `None` for inputs the loss does
/// not reach.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Option<Tensor>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars.iter().map(|&v| g.grad(v)).collect())
}

/// Compare taped and finite-difference gradients; returns the worst
/// elementwise relative error (absolute floor 1e-8).
pub fn max_grad_error<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(f, inputs)?;
    let numeric = finite_diff_grads(f, inputs, h)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        let zero = Tensor::zeros(n.shape().to_vec());
        let a = a.as_ref().unwrap_or(&zero);
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_error(av, nv, 1e-8));
        }
    }
    Ok(worst)
}
