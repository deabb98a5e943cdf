//! Dense symmetric-system helpers shared by the simulator's closed-form fit.

use ndarray::{Array1, Array2};
use ndarray_linalg::{FactorizeC, FactorizeH, SolveC, SolveH, UPLO};

use crate::{Error, Result};

/// Accumulate C += AᵀA into the upper triangle of `c` (row-major `dsyrk`).
pub fn syrk_upper_accumulate(a: &Array2<f64>, c: &mut Array2<f64>) {
    let (k, n) = (a.nrows(), a.ncols());
    assert_eq!(c.nrows(), n, "output must be n x n");
    assert_eq!(c.ncols(), n, "output must be n x n");
    assert!(a.is_standard_layout() && c.is_standard_layout());
    if k == 0 {
        return;
    }
    unsafe {
        cblas_sys::cblas_dsyrk(
            cblas_sys::CBLAS_LAYOUT::CblasRowMajor,
            cblas_sys::CBLAS_UPLO::CblasUpper,
            cblas_sys::CBLAS_TRANSPOSE::CblasTrans,
            n as i32,
            k as i32,
            1.0,
            a.as_ptr(),
            n as i32,
            1.0,
            c.as_mut_ptr(),
            n as i32,
        );
    }
}

/// Mirror the upper triangle into the lower one.
pub fn symmetrize_upper(c: &mut Array2<f64>) {
    let n = c.nrows();
    for i in 1..n {
        for j in 0..i {
            c[[i, j]] = c[[j, i]];
        }
    }
}

/// Solve the symmetric system G·x = rhs: Cholesky first, Bunch–Kaufman as a
/// fallback for indefiniteness, `IllConditioned` when neither produces a
/// finite solution. `lambda` is carried into the error for diagnostics only.
pub fn solve_symmetric(g: &Array2<f64>, rhs: &Array1<f64>, lambda: f64) -> Result<Array1<f64>> {
    if let Ok(f) = g.factorizec(UPLO::Upper) {
        if let Ok(x) = f.solvec(rhs) {
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
    }
    if let Ok(f) = g.factorizeh() {
        if let Ok(x) = f.solveh(rhs) {
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..g.nrows() {
        let v = g[[i, i]];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let cond_estimate = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    Err(Error::IllConditioned { cond_estimate, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn syrk_matches_explicit_gram() {
        let a = array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0], [2.0, -2.0, 1.0], [0.0, 1.0, 1.0]];
        let mut c = Array2::zeros((3, 3));
        syrk_upper_accumulate(&a, &mut c);
        syrk_upper_accumulate(&a, &mut c);
        symmetrize_upper(&mut c);
        let expect = a.t().dot(&a) * 2.0;
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(c[[i, j]], expect[[i, j]], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn solve_symmetric_recovers_known_solution() {
        let m = array![[2.0, 1.0], [1.0, 3.0]];
        let x_true = array![0.5, -2.0];
        let rhs = m.dot(&x_true);
        let x = solve_symmetric(&m, &rhs, 1.0).unwrap();
        assert_abs_diff_eq!(x[0], x_true[0], epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], x_true[1], epsilon = 1e-12);
    }

    #[test]
    fn indefinite_system_falls_back_to_bunch_kaufman() {
        // Not positive definite, but symmetric and invertible.
        let m = array![[0.0, 1.0], [1.0, 0.0]];
        let rhs = array![2.0, 3.0];
        let x = solve_symmetric(&m, &rhs, 1.0).unwrap();
        assert_abs_diff_eq!(x[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_system_reports_ill_conditioned() {
        let m = array![[1.0, 0.0], [0.0, 0.0]];
        let rhs = array![1.0, 1.0];
        match solve_symmetric(&m, &rhs, 1e-5) {
            Err(Error::IllConditioned { lambda, .. }) => assert_eq!(lambda, 1e-5),
            other => panic!("expected IllConditioned, got {other:?}"),
        }
    }
}
