//! Central finite differences, used as an independent oracle for the tape.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`, one coordinate at a time:
/// `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective while probing parameter {p}, coordinate {i}"
                )));
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `max|a - b| / max(max|a|, max|b|)` over all entries of all tensors.
///
/// Normalizing by the largest magnitude keeps near-zero coordinates from
/// dominating; returns 0 when both sides are identically zero.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (&u, &v) in x.data().iter().zip(y.data()) {
            diff = diff.max((u - v).abs());
            scale = scale.max(u.abs()).max(v.abs());
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|p| Ok(p[0].item().powi(2)), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let p = [Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])];
        let g = finite_diff_grad(|_| Ok(7.5), &p, 1e-6).unwrap();
        assert!(g[0].max_abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        assert!(finite_diff_grad(|_| Ok(0.0), &[Tensor::scalar(1.0)], 0.0).is_err());
        let err = finite_diff_grad(|_| Ok(f64::NAN), &[Tensor::scalar(1.0)], 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
