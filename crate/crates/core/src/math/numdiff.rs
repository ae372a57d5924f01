use super::mat::Mat;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function of a matrix.
///
/// Entry `(i, j)` is `(f(X + h e_ij) - f(X - h e_ij)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &Mat, h: f64) -> Result<Mat>
where
    F: Fn(&Mat) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Mat::zeros(x.rows(), x.cols());
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Numerical {
                stage: "finite_diff_grad",
            });
        }
        grad.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest entrywise relative error `|a - b| / max(|a|, |b|)`, skipping entries where
/// `|a| < floor`.
pub fn max_relative_error(analytic: &Mat, numeric: &Mat, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter(|(a, _)| a.abs() >= floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Mat::from_rows(&[[1.0, 2.0]]);
        let g = finite_diff_grad(|m| m.sum_sq(), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 2.0).abs() < 1e-8);
        assert!((g.get(0, 1) - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_is_zero() {
        let x = Mat::from_rows(&[[1.0, -3.0], [0.5, 9.0]]);
        assert_eq!(
            finite_diff_grad(|_| 4.2, &x, 1e-5).unwrap(),
            Mat::zeros(2, 2)
        );
    }

    #[test]
    fn non_finite_is_error() {
        let x = Mat::from_rows(&[[1.0]]);
        let err = finite_diff_grad(|m| if m.get(0, 0) > 1.0 { f64::NAN } else { 0.0 }, &x, 1e-5)
            .unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }));
        assert!(finite_diff_grad(|m| m.sum_sq(), &x, 0.0).is_err());
    }
}
