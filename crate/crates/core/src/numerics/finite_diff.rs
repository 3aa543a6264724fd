//! Central-difference gradient oracle used to check `Graph::backward`.

use super::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Estimates `df/dx` entrywise as `(f(x + h e) - f(x - h e)) / 2h`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Matrix) -> Result<f64>,
    x: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[idx] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "f evaluated to {plus} / {minus} around entry {idx}"
            )));
        }
        grad.data_mut()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference when both are
/// below `floor`.
pub fn relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Matrix::from_rows(&[[0.3, -1.2, 4.0], [2.0, 0.0, -7.5]]);
        let g = finite_diff_grad(|m| Ok(m.sum()), &x, DEFAULT_STEP).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Matrix::from_rows(&[[3.0]]);
        let g = finite_diff_grad(|m| Ok(m.get(0, 0).powi(2)), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-8, "{}", g.get(0, 0));
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let x = Matrix::zeros(1, 1);
        assert!(matches!(
            finite_diff_grad(|m| Ok(m.sum()), &x, 0.0),
            Err(Error::Contract(_))
        ));
        assert!(finite_diff_grad(|m| Ok(m.sum()), &x, -1e-5).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let x = Matrix::zeros(1, 1);
        let err = finite_diff_grad(|m| Ok(1.0 / m.get(0, 0).abs().min(0.0)), &x, 1e-5);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }
}
