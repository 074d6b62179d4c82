//! Central finite-difference gradient oracle.

use crate::matrix::Matrix;

/// Magnitude below which errors are measured absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every entry `i`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Matrix, eps: f64) -> Matrix
where
    F: FnMut(&Matrix) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - eps;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = libm::fabs(a).max(libm::fabs(b)).max(REL_ERROR_FLOOR);
    libm::fabs(a - b) / scale
}

/// Worst entry-wise [`rel_error`] between two same-shape matrices.
pub fn max_rel_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error shape mismatch");
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| rel_error(x, y))
        .fold(0.0, f64::max)
}
