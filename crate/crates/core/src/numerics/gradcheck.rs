//! Central-difference gradient verification.

use super::tensor::Tensor;
use super::NumericsError;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compare analytic gradients against central finite differences.
///
/// Returns the maximum over all parameter elements of
/// `|analytic - central| / (|central| + 1e-12)`. The closure re-evaluates the
/// scalar objective from a full parameter vector; a deliberately corrupted
/// gradient (for example scaled by 2) reads back as a relative error near 1.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    mut f: F,
    h: f64,
) -> Result<f64, NumericsError>
where
    F: FnMut(&[Tensor]) -> Result<f64, NumericsError>,
{
    if params.len() != analytic.len() {
        return Err(NumericsError::Invalid(format!(
            "finite_diff_check: {} parameter tensors but {} gradient tensors",
            params.len(),
            analytic.len()
        )));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for t in 0..params.len() {
        if params[t].shape() != analytic[t].shape() {
            return Err(NumericsError::Invalid(format!(
                "finite_diff_check: parameter {} shape {:?} but gradient shape {:?}",
                t,
                params[t].shape(),
                analytic[t].shape()
            )));
        }
        for e in 0..params[t].len() {
            let base = params[t].data()[e];
            work[t].data_mut()[e] = base + h;
            let up = f(&work)?;
            work[t].data_mut()[e] = base - h;
            let down = f(&work)?;
            work[t].data_mut()[e] = base;
            if !up.is_finite() || !down.is_finite() {
                return Err(NumericsError::NonFinite {
                    what: "objective value during finite differencing",
                });
            }
            let central = (up - down) / (2.0 * h);
            let rel = (analytic[t].data()[e] - central).abs() / (central.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    // f = 0.5 * ||W x||^2 with analytic gradient dW = (W x) x^T.
    fn quad_loss(p: &[Tensor]) -> Result<f64, NumericsError> {
        let wx = p[0].matmul(&p[1])?;
        Ok(0.5 * wx.sum_sq())
    }

    fn quad_grad(w: &Tensor, x: &Tensor) -> (Tensor, Tensor) {
        let wx = w.matmul(x).unwrap();
        let dw = wx.matmul(&x.transpose().unwrap()).unwrap();
        let dx = w.transpose().unwrap().matmul(&wx).unwrap();
        (dw, dx)
    }

    #[test]
    fn closed_form_gradient_passes() {
        let mut rng = SeededRng::new(2);
        let w = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let x = Tensor::randn(vec![3, 1], 1.0, &mut rng);
        let (dw, dx) = quad_grad(&w, &x);
        let err =
            finite_diff_check(&[w, x], &[dw, dx], quad_loss, DEFAULT_FD_STEP).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn zero_function_has_zero_error() {
        let params = [Tensor::zeros(vec![2, 2])];
        let grads = [Tensor::zeros(vec![2, 2])];
        let err = finite_diff_check(&params, &grads, |_| Ok(0.0), DEFAULT_FD_STEP).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut rng = SeededRng::new(4);
        let w = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let x = Tensor::randn(vec![3, 1], 1.0, &mut rng);
        let (dw, dx) = quad_grad(&w, &x);
        let err = finite_diff_check(
            &[w, x],
            &[dw.scale(2.0), dx.scale(2.0)],
            quad_loss,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!((err - 1.0).abs() < 1e-3, "expected rel err near 1, got {err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let params = [Tensor::zeros(vec![1, 1])];
        let grads = [Tensor::zeros(vec![1, 1])];
        let r = finite_diff_check(&params, &grads, |_| Ok(f64::NAN), DEFAULT_FD_STEP);
        assert!(matches!(r, Err(NumericsError::NonFinite { .. })));
    }
}
