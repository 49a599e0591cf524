//! Central finite-difference gradient checking.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// `|a - n| / (|a| + |n| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let errs = grad_check_many(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Per-tensor max relative error for a scalar function of several tensors.
///
/// `f` receives the inputs in order; during the analytic pass they are
/// watched leaves, during the numeric passes plain constants.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    Ok(grad_check_floored(f, inputs, eps, 0.0)?
        .into_iter()
        .map(|c| c.max_relative_error)
        .collect())
}

/// Comparison of one input's analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    /// Over elements where either gradient reaches the floor.
    pub max_relative_error: f64,
    /// `|analytic - numeric|` over the elements below the floor.
    pub max_floored_abs_error: f64,
    /// Elements where both gradients are below the floor.
    pub floored: usize,
}

/// [`grad_check_many`], except that elements whose analytic and numeric
/// gradients are both smaller than `floor` in magnitude are compared by
/// absolute difference instead. Gradients that vanish identically (a bias
/// that shifts every attention score of a row equally, say) otherwise
/// yield a relative error of order one from round-off alone.
pub fn grad_check_floored<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    floor: f64,
) -> Result<Vec<GradComparison>>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let tape = Tape::new();
    let watched: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let loss = f(&tape, &watched)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(
            "grad_check needs a scalar function".to_string(),
        ));
    }
    let grads = tape.backward(&loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        Ok(f(&t, xs)?.item())
    };

    let mut errors = Vec::with_capacity(inputs.len());
    let mut current: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&watched[ti]);
        let mut cmp = GradComparison {
            max_relative_error: 0.0,
            max_floored_abs_error: 0.0,
            floored: 0,
        };
        for e in 0..input.numel() {
            let mut plus = input.data().to_vec();
            plus[e] += eps;
            let mut minus = input.data().to_vec();
            minus[e] -= eps;
            current[ti] = Tensor::new(input.shape(), plus)?;
            let fp = eval(&current)?;
            current[ti] = Tensor::new(input.shape(), minus)?;
            let fm = eval(&current)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[e]);
            if a.abs() < floor && numeric.abs() < floor {
                cmp.floored += 1;
                cmp.max_floored_abs_error = cmp.max_floored_abs_error.max((a - numeric).abs());
            } else {
                cmp.max_relative_error = cmp.max_relative_error.max(relative_error(a, numeric));
            }
        }
        current[ti] = input.detach();
        errors.push(cmp);
    }
    Ok(errors)
}
