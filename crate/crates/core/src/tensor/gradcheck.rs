//! Central finite-difference gradient checking.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::parallel::Parallelism;

/// Default finite-difference step for f64 checks.
pub const GRAD_STEP: f64 = 1e-5;

/// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`
/// for the scalar function `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var> + Sync,
{
    grad_check_sampled(None, f, x, h, None)
}

/// Like [`grad_check`], but resolves parameters against `params` and checks
/// only the listed flat coordinates when `coords` is given.
pub fn grad_check_sampled<F>(
    params: Option<&ParamStore>,
    f: F,
    x: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var> + Sync,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let new_tape = || match params {
        Some(p) => Tape::with_params(p),
        None => Tape::new(),
    };
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = new_tape();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        let val = tape.value(out).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(val)
    };

    let mut tape = new_tape();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    if !tape.value(out).item()?.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let errors = Parallelism::default().map(coords, |&i| -> Result<f64> {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        Ok((a - numeric).abs() / a.abs().max(1.0))
    });
    let mut worst = 0.0f64;
    for e in errors {
        worst = worst.max(e?);
    }
    Ok(worst)
}
