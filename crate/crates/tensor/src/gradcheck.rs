//! Finite-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

fn scalar_of(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Max over coordinates of `|autodiff − central difference| / (|central| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::invalid("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(xv).expect("param has gradient").clone();

    let eval = |xp: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(xp);
        let y = f(&mut tape, v)?;
        scalar_of(&tape, y)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over every scalar of every tensor in `params`.
pub fn grad_check_params<F>(f: F, params: &ParamSet<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let y = f(&mut tape, &bound)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = bound.gradients(&grads);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let y = f(&mut tape, &b)?;
        scalar_of(&tape, y)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        coords: 0,
    };
    let mut work = params.clone();
    for (name, t) in params.iter() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[name].data()[i];
            let e = rel_error(a, numeric);
            report.coords += 1;
            if e > report.max_rel_error || report.worst.is_empty() {
                report = GradCheckReport {
                    max_rel_error: e.max(report.max_rel_error),
                    worst: format!("{name}[{i}]"),
                    analytic: a,
                    numeric,
                    coords: report.coords,
                };
            }
        }
    }
    Ok(report)
}
