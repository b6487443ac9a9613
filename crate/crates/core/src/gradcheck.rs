//! Central finite-difference checks of reverse-mode gradients.

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Worst-case comparison between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest `||analytic - numeric|| / max(||analytic||, ||numeric||)` over inputs.
    pub max_rel_error: f64,
    /// Per-input relative errors, same order as the inputs.
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the gradient of the scalar `f(inputs)` w.r.t. each input against
/// central differences with step `h`. Inputs are re-wrapped as tracked leaves.
pub fn check<F>(inputs: &[Tensor], h: f32, f: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    drop(loss);

    let mut per_input = Vec::with_capacity(leaves.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut numeric = vec![0.0f64; leaf.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f32| -> Result<f64> {
                let mut data = leaf.to_vec();
                data[j] += delta;
                let mut args: Vec<Tensor> = leaves.iter().map(|t| t.detach()).collect();
                args[i] = Tensor::new(leaf.shape(), data)?;
                Ok(no_grad(|| f(&args))?.item() as f64)
            };
            *slot = (eval(h)? - eval(-h)?) / (2.0 * h as f64);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let denom = na.max(nn);
        per_input.push(if denom < 1e-8 { diff } else { diff / denom });
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck { max_rel_error, per_input })
}

/// `sum(y * r)` for a fixed pseudo-random `r` in `[-1, 1]`, turning any
/// tensor-valued map into a scalar that exercises its full Jacobian.
pub fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let r = crate::tensor::init::uniform(y.shape(), -1.0, 1.0, &mut crate::tensor::init::rng(seed));
    Ok(crate::tensor::sum(&crate::tensor::mul(y, &r)?))
}
