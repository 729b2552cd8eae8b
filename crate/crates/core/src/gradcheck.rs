//! Central finite-difference gradient checking.
//!
//! The numerical side never touches `backward`: it re-runs the forward
//! closure on perturbed copies of the inputs, so it stays an independent
//! oracle for the reverse-mode path.

use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds a scalar output from leaf inputs; called many times with
/// perturbed copies.
pub type ScalarFn<'a> = dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'a;

/// Central-difference gradient of `f` w.r.t. every element of every input.
pub fn numerical_grad(
    inputs: &[Tensor<f64>],
    f: &ScalarFn,
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut grad = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let eval = |offset: f64| -> Result<f64> {
                let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
                let mut data = input.data().to_vec();
                data[j] += offset;
                probe[i] = Tensor::from_vec(data, input.shape())?;
                Ok(f(&probe)?.item())
            };
            grad[j] = (eval(step)? - eval(-step)?) / (2.0 * step);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Runs forward + backward and compares analytic gradients against the
/// central-difference oracle. An element passes when
/// `|a - n| <= tol * max(|a|, |n|)` or both are below an absolute floor.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    f: &ScalarFn,
    step: f64,
    tol: f64,
) -> Result<()> {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.trainable()).collect();
    let out = f(&leaves)?;
    out.backward()?;
    let numeric = numerical_grad(inputs, f, step)?;
    for (i, (leaf, num)) in leaves.iter().zip(&numeric).enumerate() {
        let analytic = leaf.grad_or_zeros();
        for (j, (&a, &n)) in analytic.iter().zip(num).enumerate() {
            let scale = a.abs().max(n.abs());
            let diff = (a - n).abs();
            if diff > tol * scale && diff > 1e-7 {
                return Err(TensorError::Contract(format!(
                    "gradient mismatch at input {i} element {j}: analytic {a}, numerical {n}, \
                     relative error {}",
                    diff / scale.max(f64::MIN_POSITIVE)
                )));
            }
        }
    }
    Ok(())
}
