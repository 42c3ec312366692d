use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of a scalar function against central
/// differences with the given step.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::contract(format!("step must be positive, got {step}")));
    }
    let eval = |point: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::contract(format!(
                "checked function must be scalar-valued, got shape {:?}",
                value.shape()
            )));
        }
        Ok(value[0].to_f64().unwrap_or(f64::NAN))
    };

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::contract(format!(
            "checked function must be scalar-valued, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> = tape
        .grad(v)
        .expect("leaf gradient after backward")
        .data()
        .iter()
        .map(|g| g.to_f64().unwrap_or(f64::NAN))
        .collect();

    let h = T::of(step);
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let (worst_index, max_relative_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, e)| if e > best.1 || e.is_nan() { (i, e) } else { best },
        );
    Ok(GradCheckReport {
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}
