//! Central finite-difference gradient checking at f64.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// Max over inputs of `max_i |analytic_i - numeric_i| / max_i |numeric_i|`.
    pub max_rel_err: f64,
    pub elements_checked: usize,
}

/// Compare backprop gradients of the scalar `f(inputs)` against central
/// differences with step `h`. At most `max_elems` entries per input are
/// perturbed, spread evenly over the tensor.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    max_elems: usize,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let stride = input.len().div_ceil(max_elems.max(1)).max(1);
        let mut num_max: f64 = 0.0;
        let mut diff_max: f64 = 0.0;
        for i in (0..input.len()).step_by(stride) {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut dp = plus[k].data().to_vec();
            let mut dm = minus[k].data().to_vec();
            dp[i] += h;
            dm[i] -= h;
            plus[k] = Tensor::new(input.shape(), dp)?;
            minus[k] = Tensor::new(input.shape(), dm)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            num_max = num_max.max(numeric.abs());
            diff_max = diff_max.max((numeric - analytic[i]).abs());
            checked += 1;
        }
        let rel = if num_max > 1e-12 {
            diff_max / num_max
        } else {
            diff_max
        };
        worst = worst.max(rel);
    }
    Ok(GradReport {
        max_rel_err: worst,
        elements_checked: checked,
    })
}
