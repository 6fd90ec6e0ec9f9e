//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `(f(θ+εe) − f(θ−εe)) / 2ε` for every entry of `theta`.
///
/// `f` is evaluated twice at `theta` first; differing results mean the
/// function is not deterministic and no derivative is reported.
pub fn finite_diff_grad<F>(mut f: F, theta: &Matrix<f64>, eps: f64) -> Result<Matrix<f64>>
where
    F: FnMut(&Matrix<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("step must be positive, got {eps}")));
    }
    let first = f(theta)?;
    let second = f(theta)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} then {second}"
        )));
    }
    let mut probe = theta.clone();
    let mut grad = Matrix::zeros(theta.rows(), theta.cols());
    for i in 0..theta.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.as_mut_slice()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both norms
/// are below `floor`.
pub fn relative_error(a: &Matrix<f64>, b: &Matrix<f64>, floor: f64) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).expect("same shape").frobenius();
    let scale = a.frobenius().max(b.frobenius());
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}
