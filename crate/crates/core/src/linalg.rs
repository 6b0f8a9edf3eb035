//! Dense solves used by the exact solvers.
//!
//! Tabular problems stay below a few thousand unknowns, so everything here is
//! dense: LU with partial pivoting for square systems and Householder QR for
//! the stacked (overdetermined but consistent) average-reward systems.

use nalgebra::{DMatrix, DVector};

use crate::error::{model_err, Result};

/// Systems whose estimated 1-norm condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Solves `a * x = b` for a square `a`.
pub fn solve_square(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "solve_square needs a square matrix");
    assert_eq!(n, b.nrows(), "right-hand side has wrong row count");
    let lu = a.clone().lu();
    if !lu.is_invertible() {
        return Err(model_err!("singular {n}x{n} system (is the induced chain ergodic?)"));
    }
    let lu_t = a.transpose().lu();
    let cond = one_norm(a) * inverse_one_norm_estimate(n, |x| lu.solve(x), |x| lu_t.solve(x));
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(model_err!("ill-conditioned {n}x{n} system: condition estimate {cond:.3e}"));
    }
    lu.solve(b)
        .ok_or_else(|| model_err!("LU solve failed on {n}x{n} system"))
}

/// Least-squares solution of a tall, full-column-rank system.
///
/// Rank is judged from the diagonal of R; a ratio beyond [`MAX_CONDITION`]
/// is reported as a model error, which is how a non-ergodic chain shows up
/// in the average-reward solves.
pub fn solve_least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = a.shape();
    assert!(m >= n, "least squares needs at least as many rows as columns");
    assert_eq!(m, b.nrows(), "right-hand side has wrong row count");
    let qr = a.clone().qr();
    let r = qr.r();
    let diag: DVector<f64> = r.diagonal().map(f64::abs);
    let (lo, hi) = (diag.min(), diag.max());
    if hi == 0.0 || !(hi / lo <= MAX_CONDITION) {
        return Err(model_err!("rank-deficient {m}x{n} stacked system (R diagonal ratio {:.3e})", hi / lo));
    }
    let mut rhs = b.clone();
    qr.q_tr_mul(&mut rhs);
    let top = rhs.rows(0, n).into_owned();
    r.solve_upper_triangular(&top)
        .ok_or_else(|| model_err!("triangular solve failed on {m}x{n} system"))
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Hager/Higham estimator of ||A^{-1}||_1 from solves with A and A^T.
fn inverse_one_norm_estimate<F, G>(n: usize, solve: F, solve_t: G) -> f64
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
    G: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut estimate = 0.0;
    let mut last_j = usize::MAX;
    for _ in 0..5 {
        let Some(y) = solve(&x) else { return f64::INFINITY };
        estimate = y.iter().map(|v| v.abs()).sum::<f64>();
        let sign = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let Some(z) = solve_t(&sign) else { return f64::INFINITY };
        let (j, zmax) = z.iter().enumerate().fold((0, 0.0), |(bj, bv), (i, v)| {
            if v.abs() > bv { (i, v.abs()) } else { (bj, bv) }
        });
        if zmax <= z.dot(&x) || j == last_j {
            break;
        }
        x.fill(0.0);
        x[j] = 1.0;
        last_j = j;
    }
    estimate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::LdgError;
    use alloc::vec;

    #[test]
    fn square_solve_matches_hand_result() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[3.0, 5.0]);
        let x = solve_square(&a, &b).unwrap();
        assert!((x[(0, 0)] - 0.8).abs() < 1e-14);
        assert!((x[(1, 0)] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn singular_square_system_is_a_model_error() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(solve_square(&a, &b), Err(LdgError::Model(_))));
    }

    #[test]
    fn near_singular_square_system_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-14]);
        let b = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(solve_square(&a, &b), Err(LdgError::Model(_))));
    }

    #[test]
    fn condition_estimate_is_exact_on_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-3, 4.0]));
        let lu = a.clone().lu();
        let est = inverse_one_norm_estimate(3, |x| lu.solve(x), |x| lu.solve(x));
        assert!((est - 1e3).abs() < 1e-9);
    }

    #[test]
    fn least_squares_recovers_consistent_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let x = solve_least_squares(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-13);
        assert!((x[(1, 0)] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn rank_deficient_least_squares_is_a_model_error() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let b = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(solve_least_squares(&a, &b), Err(LdgError::Model(_))));
    }
}
