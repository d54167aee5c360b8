//! Central-difference gradient verification.

use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use ndarray::ArrayD;

/// Default perturbation for central differences.
pub const GRAD_CHECK_EPS: f64 = 1e-4;

/// Relative error between analytic and numeric derivatives:
/// `|a - n| / max(1, |a|, |n|)`.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Verifies the analytic gradient of a scalar-valued graph against central
/// finite differences, elementwise over every input.
///
/// `f` must build the same graph for any tape and input set. Returns the
/// maximum relative error observed across all input elements.
pub fn grad_check<F>(f: F, inputs: &[ArrayD<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>>,
{
    // Analytic gradients.
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&tape, &leaves)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<ArrayD<f64>> = leaves
        .iter()
        .map(|&l| {
            grads
                .take(l)
                .unwrap_or_else(|| ArrayD::zeros(l.value().raw_dim()))
        })
        .collect();

    // Numeric: evaluate the scalar at x +- eps for every element.
    let eval = |xs: &[ArrayD<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&tape, &leaves)?;
        Ok(out.value().first().copied().expect("scalar output"))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].len() {
            let orig = work[ti].as_slice().unwrap()[ei];
            work[ti].as_slice_mut().unwrap()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[ti].as_slice_mut().unwrap()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[ti].as_slice_mut().unwrap()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice().unwrap()[ei];
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

/// Convenience wrapper for a single-input scalar function.
pub fn grad_check_scalar_fn<F>(f: F, input: ArrayD<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Tensor<'t>) -> Result<Tensor<'t>>,
{
    grad_check(|tape, xs| f(tape, xs[0]), &[input], eps)
}
