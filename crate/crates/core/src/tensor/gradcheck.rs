use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest `|analytic - central_difference| / max(1, |analytic|)` over every
/// coordinate of `x`.
///
/// `f` records a scalar function of its input leaf on the supplied tape.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, h, &coords)
}

/// As [`finite_difference_check`], probing only the listed coordinates.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf_ref(x, true);
    let out = f(&mut tape, leaf)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("finite_difference_check", "function must be scalar-valued"));
    }
    tape.backward(out)?;
    let analytic = tape.grad(leaf).expect("leaf requires grad").to_vec();

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf_ref(probe, false);
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
