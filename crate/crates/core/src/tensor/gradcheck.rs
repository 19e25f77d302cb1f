use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// A coordinate is treated as sitting on a kink, and skipped, when its
    /// forward and backward one-sided slopes differ by more than this
    /// (relative to `max(1, |slope|)`).
    pub kink_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-6, kink_tol: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − central| / max(1, |central|) over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub excluded: usize,
}

/// Compares the tape gradient of a scalar program `f` at `point` against
/// central differences, all in 64-bit.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = f(&mut tape, v)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let f0 = scalar_of(&tape, y)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()]);

    let h = opts.h;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None, checked: 0, excluded: 0 };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let central = (fp - fm) / (2.0 * h);
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        let denom = central.abs().max(1.0);
        if (forward - backward).abs() / denom > opts.kink_tol {
            report.excluded += 1;
            continue;
        }
        report.checked += 1;
        let err = (analytic[i] - central).abs() / denom;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

fn scalar_of(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::contract(format!("grad_check needs a scalar program, got shape {:?}", v.shape())));
    }
    Ok(v.data()[0])
}
