//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// Flat index where the largest error occurred.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare the tape gradient of scalar `f` at `x` with central differences.
///
/// `f` builds its graph on a fresh tape from a leaf holding `x` and returns
/// the scalar output.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(invalid(format!("grad_check step must be > 0, got {step}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return Err(Error::NotScalar(y.shape().to_vec()));
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("f(x) = {y}")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let y = tape.value(out);
    if y.len() != 1 {
        return Err(Error::NotScalar(y.shape().to_vec()));
    }
    if !y.item().is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {}", y.item())));
    }
    let analytic = tape.backward(out)?.get_or_zeros(xv, x.shape());

    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (fp - fm) / (2.0 * step);
    }

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
    }
    Ok(GradReport { max_rel_err, worst_index, analytic, numeric, tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let r = grad_check(|t, x| Ok(t.sum(x)), &x, STEP, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
        assert!(r.analytic.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::from_vec(vec![1.0]);
        let r = grad_check(
            |t, x| {
                let y = t.scale(x, f64::INFINITY);
                Ok(t.sum(y))
            },
            &x,
            STEP,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.0, 1e-5).is_err());
    }
}
