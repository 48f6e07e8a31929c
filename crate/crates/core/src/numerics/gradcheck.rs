use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_FD_EPS: f64 = 1e-5;
pub const DEFAULT_FD_TOL: f64 = 1e-4;

/// Agreement of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// `max_i |g_ad − g_fd| / (|g_fd| + 1e-8)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err > self.tol).collect()
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives a fresh double-precision tape and one variable per entry of
/// `params`, and returns the scalar loss.
pub fn finite_diff_check<Fun>(f: Fun, params: &[(String, Tensor<f64>)], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .zip(values)
            .map(|((name, _), v)| tape.param(name.clone(), v.clone()))
            .collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(n, t)| tape.param(n.clone(), t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        tol,
        params: Vec::with_capacity(params.len()),
    };
    for (p, (name, original)) in params.iter().enumerate() {
        let analytic = grads.of(vars[p]).expect("every marked parameter has a gradient").clone();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..original.len() {
            let x0 = original.data()[i];
            values[p].data_mut()[i] = x0 + eps;
            let up = eval(&values)?;
            values[p].data_mut()[i] = x0 - eps;
            let down = eval(&values)?;
            values[p].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let ad = analytic.data()[i];
            let rel = (ad - numeric).abs() / (numeric.abs() + 1e-8);
            if rel > check.max_rel_err || i == 0 {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = ad;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
