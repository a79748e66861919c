use serde::Serialize;

use super::params::{Grads, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients smaller than `RELATIVE_FLOOR · max(1, |L|)` are compared
/// absolutely rather than relatively; finite-difference roundoff grows with
/// the magnitude of the objective.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Evaluates the objective recorded by `build` and its parameter gradients.
pub fn value_and_grads<T, F>(build: &F, params: &ParamStore<T>) -> Result<(T, Grads<T>)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let value = tape.value(loss).item();
    let adj = tape.backward(loss)?;
    Ok((value, tape.param_grads(params, &adj)))
}

fn value_only<T, F>(build: &F, params: &ParamStore<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients against central finite differences
/// `(L(p + h) - L(p - h)) / 2h` for every entry of every parameter.
pub fn grad_check<T, F>(build: F, params: &ParamStore<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let (loss, analytic) = value_and_grads(&build, params)?;
    let again = value_only(&build, params)?;
    if loss != again {
        return Err(Error::Oracle(format!(
            "objective is not deterministic: {loss:e} vs {again:e}"
        )));
    }

    let floor = RELATIVE_FLOOR * loss.as_f64().abs().max(1.0);
    let step = T::lit(h);
    let two_h = T::lit(2.0 * h);
    let mut probe = params.clone();
    let mut checks = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.value(&name)?.len();
        let grad = &analytic[&name];
        let mut worst = ParamCheck {
            name: name.clone(),
            entries: n,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in 0..n {
            let orig = probe.value(&name)?.data()[i];
            probe.value_mut(&name)?.data_mut()[i] = orig + step;
            let up = value_only(&build, &probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig - step;
            let down = value_only(&build, &probe)?;
            probe.value_mut(&name)?.data_mut()[i] = orig;

            let numeric = ((up - down) / two_h).as_f64();
            let a = grad.data()[i].as_f64();
            let rel = relative_error(a, numeric, floor);
            if !(rel <= worst.max_rel_error) {
                worst.max_rel_error = rel;
                worst.worst_index = i;
                worst.worst_analytic = a;
                worst.worst_numeric = numeric;
            }
            worst.max_abs_error = worst.max_abs_error.max((a - numeric).abs());
        }
        checks.push(worst);
    }

    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        h,
        tol,
        loss: loss.as_f64(),
        passed: max_rel_error < tol,
        max_rel_error,
        params: checks,
    })
}
