use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖a − n‖₂ / (‖a‖₂ + ‖n‖₂)` over the whole gradient.
    pub norm_rel_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(grad_check_detailed(f, x, eps)?.max_rel_err)
}

/// Like [`grad_check`], reporting the worst coordinate.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`. Numeric
/// differences divide by the step actually realised in f32.
pub fn grad_check_detailed<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(t);
        let l = f(&mut tape, v)?;
        Ok(tape.scalar(l))
    };

    let mut report = GradCheckReport {
        norm_rel_err: 0.0,
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let (mut diff_sq, mut a_sq, mut n_sq) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += eps;
        minus.data_mut()[i] -= eps;
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let a = analytic.data()[i] as f64;
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!("finite difference at {i} is not finite")));
        }
        diff_sq += (a - numeric).powi(2);
        a_sq += a * a;
        n_sq += numeric * numeric;
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        if rel > report.max_rel_err {
            report = GradCheckReport {
                norm_rel_err: 0.0,
                max_rel_err: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    report.norm_rel_err = diff_sq.sqrt() / (a_sq.sqrt() + n_sq.sqrt() + 1e-12);
    Ok(report)
}
