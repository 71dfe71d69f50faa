//! Small dense helpers shared by the static solver and the state rebuild.

use nalgebra::{Cholesky, DMatrix};

/// Default cap on the estimated 1-norm condition number of a support block.
pub const DEFAULT_COND_CAP: f64 = 1e12;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse of a symmetric positive-definite block together with the
/// 1-norm condition estimate `‖B‖₁‖B⁻¹‖₁`. `None` when Cholesky fails.
pub fn spd_inverse(block: DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let n1 = norm1(&block);
    let chol = Cholesky::new(block)?;
    let inv = chol.inverse();
    let cond = n1 * norm1(&inv);
    if !cond.is_finite() {
        return None;
    }
    Some((inv, cond))
}

/// Largest absolute asymmetry `|a_ij - a_ji|`.
pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_diagonal() {
        let (inv, cond) = spd_inverse(DMatrix::from_diagonal_element(2, 2, 4.0)).unwrap();
        assert!((inv[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((cond - 1.0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_block_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_inverse(m).is_none());
    }
}
