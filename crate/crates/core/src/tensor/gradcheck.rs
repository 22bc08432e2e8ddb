//! Central finite-difference verification of analytic gradients (f64 only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{no_grad, ops, Tensor};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-input relative errors from [`grad_check_report`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub errors: Vec<f64>,
    /// The same measure over all inputs' gradients concatenated.
    pub global_error: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights so
/// that every output element contributes to the checked directional gradient.
fn contract(out: &Tensor<f64>) -> Result<Tensor<f64>> {
    if out.numel() == 1 {
        return Ok(out.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let w: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::new(out.shape(), w)?;
    Ok(ops::sum(&ops::mul(out, &w)?))
}

/// Largest relative error over `inputs` between the analytic gradient and the
/// central difference estimate.
///
/// For each input tensor the error is `|a - n| / max(|a|, |n|, 1e-12)` with
/// `|·|` the Euclidean norm over the tensor's elements.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    Ok(grad_check_report(f, inputs, DEFAULT_EPS)?.max_error())
}

pub fn grad_check_report<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let flags: Vec<bool> = inputs.iter().map(|t| t.requires_grad()).collect();
    for t in inputs {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    let result = (|| {
        contract(&f(inputs)?)?.backward()?;
        let analytic: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();

        let _guard = no_grad();
        let eval = || -> Result<f64> { Ok(contract(&f(inputs)?)?.item()) };
        let mut errors = Vec::with_capacity(inputs.len());
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        for (t, a) in inputs.iter().zip(&analytic) {
            let mut numeric = vec![0.0; t.numel()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = t.data()[i];
                t.data_mut()[i] = orig + eps;
                let plus = eval()?;
                t.data_mut()[i] = orig - eps;
                let minus = eval()?;
                t.data_mut()[i] = orig;
                *slot = (plus - minus) / (2.0 * eps);
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
            let denom = norm(a).max(norm(&numeric)).max(1e-12);
            errors.push(norm(&diff) / denom);
            diff_sq += norm(&diff).powi(2);
            a_sq += norm(a).powi(2);
            n_sq += norm(&numeric).powi(2);
        }
        let global_error = diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(1e-12);
        Ok(GradCheckReport { errors, global_error })
    })();
    for (t, flag) in inputs.iter().zip(flags) {
        t.zero_grad();
        t.set_requires_grad(flag);
    }
    result
}
