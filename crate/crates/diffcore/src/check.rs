//! Central finite-difference verification of tape gradients.

use crate::{DiffError, Tape, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the tape gradient of `f` at `x` with central differences over
/// every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, eps, &coords)
}

/// Same as [`finite_diff_check`] restricted to the listed coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheck, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    let eval = |t: &Tensor, coordinate: usize| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: y.shape().to_vec(),
            });
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(DiffError::NonFinite {
                op: "finite-diff",
                detail: format!("non-finite evaluation at coordinate {coordinate}"),
            });
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = f(&mut tape, xv)?;
    let grads = tape.backward(root)?;
    let zeros = Tensor::zeros(x.shape());
    let full = grads.get(xv).unwrap_or(&zeros);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    let mut probe = x.clone();
    for &c in coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + eps;
        let up = eval(&probe, c)?;
        probe.data_mut()[c] = orig - eps;
        let down = eval(&probe, c)?;
        probe.data_mut()[c] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = full.data()[c];
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = c;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
