//! Central finite-difference checking of reverse-mode gradients.

use super::{Result, Tensor};

/// Largest disagreement found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

/// Relative error with a floor so that near-zero gradients are compared on
/// an absolute scale of `floor`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the gradient of the scalar `f(inputs)` obtained by
/// [`Tensor::backward`] with central differences of step `eps`, over every
/// element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = inputs.iter().map(Tensor::detach_param).collect();
    f(&params)?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad_data().clone().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                let mut data = input.to_vec();
                data[idx] += delta;
                shifted[which] = Tensor::new(input.shape().to_vec(), data)?;
                f(&shifted)?.item()
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[which][idx];
            let err = rel_error(a, numeric, 1e-3);
            if err > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: err,
                    worst_input: which,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
