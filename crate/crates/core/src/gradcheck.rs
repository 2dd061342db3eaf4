//! Central finite-difference oracle for reverse-mode gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the worst relative error.
    pub tol: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, perturbing every element of every named parameter.
///
/// `f` receives a fresh tape and the parameter variables (in the order given)
/// and must return the scalar loss. It is evaluated twice up front; differing
/// results mean the oracle cannot be trusted.
pub fn grad_check<F>(
    mut f: F,
    params: &[(String, Tensor)],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = scalar(&tape, loss)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(v, t)| {
            tape.grad(*v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let again = evaluate(&mut f, &values)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "two evaluations differ: {base:e} vs {again:e}"
        )));
    }

    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        max_rel_err: 0.0,
        tol: opts.tol,
    };
    for p in 0..values.len() {
        let mut check = ParamCheck {
            name: params[p].0.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in analytic[p].iter().enumerate() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + opts.step;
            let up = evaluate(&mut f, &values)?;
            values[p].data_mut()[i] = orig - opts.step;
            let down = evaluate(&mut f, &values)?;
            values[p].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * opts.step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    Ok(report)
}

fn evaluate<F>(f: &mut F, values: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    scalar(&tape, loss)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", t.shape(), &[1]));
    }
    Ok(t.data()[0])
}
