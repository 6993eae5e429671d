use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape's analytic gradient of `f` at `x` against central
/// differences with step `h`.
///
/// `f` builds a scalar on a fresh tape from its input variable. Returns
/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_check", format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let mut grads = tape.backward(out)?;
    let analytic = grads.take(xv).expect("input is a param");

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let out = f(&mut t, v)?;
        let value = t.try_value(out)?;
        if !value.is_scalar() {
            return Err(Error::NonScalarOutput { shape: value.shape().to_vec() });
        }
        let value = value.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { context: "finite_diff_check", value });
        }
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        // divide by the step actually taken after rounding x +- h
        let step = plus.data()[i] - minus.data()[i];
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
