use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Index of the worst element.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// False when `f` produced a non-finite value anywhere along the way.
    pub finite: bool,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of the scalar `f` at `x` with central
/// differences of step `h`.
///
/// The per-element error is `|a - n| / max(|a|, |n|, 1e-3 * max|a|)`, i.e.
/// relative, with a floor tied to the overall gradient scale so that entries
/// that are zero up to rounding do not dominate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        Ok(f(&tape, v)?.value().sum())
    };

    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    let f0 = y.value().sum();
    let grads = tape.backward(y);
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()))
        .into_data();

    let mut finite = f0.is_finite();
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        finite &= fp.is_finite() && fm.is_finite();
        numeric.push((fp - fm) / (2.0 * h));
    }
    finite &= analytic.iter().all(|v| v.is_finite());

    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let (mut max_rel_error, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > max_rel_error || err.is_nan() {
            max_rel_error = err;
            worst_index = i;
        }
    }
    if !finite {
        max_rel_error = f64::INFINITY;
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        finite,
        passed: finite && max_rel_error <= tol,
    })
}
