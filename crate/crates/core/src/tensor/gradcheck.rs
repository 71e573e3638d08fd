use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const GRAD_CHECK_EPS: f64 = 1e-6;
/// Default pass threshold on the relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-4;
/// Denominator floor: below this magnitude errors are measured absolutely,
/// which keeps round-off in near-zero gradients from registering as failures.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", format!("function must return a scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of the scalar function `f` with central
/// finite differences at every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
    };
    let mut probe = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let orig = probe[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[ei] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
