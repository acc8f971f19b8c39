use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, returning
/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
///
/// `f` receives a fresh tape and the leaf holding the evaluation point.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone());
        let out = f(&mut tape, x)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let out = f(&mut tape, x)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    tape.backward(out)?;
    let analytic = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()]);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Pushes every entry with `|v| < min_abs` out to `±min_abs`, keeping its sign
/// (zero goes positive).
pub fn perturb_away_from_zero(t: &Tensor, min_abs: f64) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        if v.abs() < min_abs {
            *v = if *v < 0.0 { -min_abs } else { min_abs };
        }
    }
    out
}
