//! Central finite-difference oracle for autodiff gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Absolute floor used in the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the autodiff gradient of a scalar function of one tensor with
/// central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` and returns the
/// worst relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input variant: every input is differentiated and checked.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_grad()))
        .collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        if g.data(out).len() != 1 {
            return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
        }
        Ok(g.item(out))
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
