//! Covariance-alignment metrics: the misalignment error, its Ruhe trace
//! bounds, and the comparison diagnostics (trace against the resolvent,
//! trace against the inverse train covariance, CKA, Spearman rank
//! correlation).

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::covariance::CovarianceSpec;
use crate::theory::{solve_self_consistent, theory_errors_from, ModelParams};
use crate::{Error, Result};

/// Relative eigenvalue floor below which a train direction is treated as
/// null space by the pseudo-inverse trace.
const PINV_RTOL: f64 = 1e-12;

/// All alignment metrics for one (params, C_train, C_test) triple.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AlignmentReport {
    /// Full ICL generalization error e_scalar + e_misalign.
    pub e_icl: f64,
    /// Misalignment error (1/d)tr[C_test K].
    pub e_misalign: f64,
    /// (1/d)tr[C_test F_κ(σ)] against the converged resolvent.
    pub trace_test_f: f64,
    /// (1/d)tr[C_test C_train⁻¹], via pseudo-inverse when C_train is singular.
    pub trace_test_inv_train: f64,
    /// False when C_train was singular and the previous field is a
    /// pseudo-inverse surrogate rather than a true inverse trace.
    pub inv_train_defined: bool,
    /// Linear CKA between the two covariance matrices, in [0, 1].
    pub cka: f64,
    /// Ruhe lower bound on e_misalign (opposite-order spectral pairing).
    pub ruhe_lower: f64,
    /// Ruhe upper bound on e_misalign (same-order spectral pairing).
    pub ruhe_upper: f64,
}

/// Compute every alignment metric against the converged solver state.
pub fn alignment_report(
    params: &ModelParams,
    train: &CovarianceSpec,
    test: &CovarianceSpec,
) -> Result<AlignmentReport> {
    if train.dim() != test.dim() {
        return Err(Error::InvalidArgument(format!(
            "train dim {} != test dim {}",
            train.dim(),
            test.dim()
        )));
    }
    let solution = solve_self_consistent(params, train)?;
    let errors = theory_errors_from(&solution, params, train, test)?;
    let d = train.dim() as f64;

    let diag_test = test.diag_in_basis(train)?;
    let trace_test_f = diag_test.dot(&solution.f_spectrum) / d;

    let floor = PINV_RTOL * train.spectrum()[0];
    let mut inv_trace = 0.0;
    let mut inv_train_defined = true;
    for (t, lam) in diag_test.iter().zip(train.spectrum()) {
        if *lam > floor && *lam > 0.0 {
            inv_trace += t / lam;
        } else {
            inv_train_defined = false;
        }
    }
    inv_trace /= d;

    let cka = cka(&test.dense(), &train.dense())?;

    let mut k_sorted = errors.k_spectrum.to_vec();
    k_sorted.sort_by(|a, b| b.total_cmp(a));
    let test_sorted = test.spectrum().to_vec();
    let (ruhe_lower, ruhe_upper) = ruhe_bounds(&test_sorted, &k_sorted)?;

    Ok(AlignmentReport {
        e_icl: errors.e_icl,
        e_misalign: errors.e_misalign,
        trace_test_f,
        trace_test_inv_train: inv_trace,
        inv_train_defined,
        cka,
        ruhe_lower,
        ruhe_upper,
    })
}

fn frobenius_parts(a: &Array2<f64>, b: &Array2<f64>) -> Result<(f64, f64, f64)> {
    if a.dim() != b.dim() || a.nrows() != a.ncols() {
        return Err(Error::InvalidArgument(
            "cka requires square matrices of equal dimension".into(),
        ));
    }
    let inner = (a * b).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cka of a zero matrix is undefined".into()));
    }
    Ok((inner, na, nb))
}

/// Linear CKA of two covariance matrices: ⟨A,B⟩_F / (‖A‖_F‖B‖_F), without
/// re-centering. In [0, 1] for PSD inputs.
pub fn cka(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (inner, na, nb) = frobenius_parts(a, b)?;
    Ok(inner / (na * nb))
}

/// CKA after double-centering both matrices with H = I − (1/d)𝟙𝟙ᵀ.
pub fn cka_centered(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.nrows() != a.ncols() {
        return Err(Error::InvalidArgument(
            "cka requires square matrices of equal dimension".into(),
        ));
    }
    let d = a.nrows();
    let mut h = Array2::from_elem((d, d), -1.0 / d as f64);
    for i in 0..d {
        h[[i, i]] += 1.0;
    }
    let ac = h.dot(a).dot(&h);
    let bc = h.dot(b).dot(&h);
    cka(&ac, &bc)
}

fn average_ranks(xs: &[f64]) -> Array1<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = Array1::zeros(n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // Tied values share the average of their 1-based positions.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument("sequences must have equal length".into()));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two observations".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("observations must be finite".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.sum() / n;
    let my = ry.sum() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument(
            "rank correlation of a constant sequence is undefined".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Ruhe trace bounds on (1/d)·tr\[AB\] from the two spectra, both sorted
/// non-increasing: lower pairs opposite orders, upper pairs same orders.
pub fn ruhe_bounds(a_spectrum: &[f64], b_spectrum: &[f64]) -> Result<(f64, f64)> {
    let d = a_spectrum.len();
    if d == 0 || d != b_spectrum.len() {
        return Err(Error::InvalidArgument(
            "spectra must be non-empty and of equal length".into(),
        ));
    }
    for s in [a_spectrum, b_spectrum] {
        if s.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("spectra must be sorted non-increasing".into()));
        }
    }
    let mut lower = 0.0;
    let mut upper = 0.0;
    for (j, a) in a_spectrum.iter().enumerate() {
        lower += a * b_spectrum[d - 1 - j];
        upper += a * b_spectrum[j];
    }
    Ok((lower / d as f64, upper / d as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn spearman_monotone_sequences() {
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn spearman_single_swap_value() {
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            0.8,
            epsilon = 1e-14
        );
    }

    #[test]
    fn spearman_average_rank_ties() {
        // Ranks of xs are (1.5, 1.5, 3); Pearson against (1, 2, 3) is √3/2.
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(r, 3f64.sqrt() / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn spearman_rejects_bad_input() {
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ruhe_hand_example() {
        let (lo, hi) = ruhe_bounds(&[2.0, 1.0], &[3.0, 1.0]).unwrap();
        assert_abs_diff_eq!(lo, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(hi, 3.5, epsilon = 1e-15);
    }

    #[test]
    fn ruhe_constant_spectra_collapse() {
        let (lo, hi) = ruhe_bounds(&[2.0, 2.0, 2.0], &[0.5, 0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(lo, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn ruhe_rejects_unsorted_or_mismatched() {
        assert!(ruhe_bounds(&[1.0, 2.0], &[2.0, 1.0]).is_err());
        assert!(ruhe_bounds(&[2.0, 1.0], &[1.0]).is_err());
        assert!(ruhe_bounds(&[], &[]).is_err());
    }

    #[test]
    fn ruhe_sandwiches_rotated_traces() {
        let mut rng = crate::rng::RngStream::new(40).rng();
        let d = 6;
        let a = CovarianceSpec::make_powerlaw(d, 1.1, 1.0).unwrap();
        let b = CovarianceSpec::make_powerlaw(d, 0.4, 2.0).unwrap().rotated(&mut rng).unwrap();
        let (lo, hi) = ruhe_bounds(
            a.spectrum().as_slice().unwrap(),
            b.spectrum().as_slice().unwrap(),
        )
        .unwrap();
        let trace = (&a.dense() * &b.dense()).sum() / d as f64;
        assert!(lo <= trace + 1e-12 && trace <= hi + 1e-12, "{lo} {trace} {hi}");
    }

    #[test]
    fn cka_self_is_one_and_orthogonal_supports_are_zero() {
        let a = array![[2.0, 0.3], [0.3, 1.0]];
        assert_abs_diff_eq!(cka(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let p = array![[1.0, 0.0], [0.0, 0.0]];
        let q = array![[0.0, 0.0], [0.0, 1.0]];
        assert_abs_diff_eq!(cka(&p, &q).unwrap(), 0.0, epsilon = 1e-15);
        assert!(cka(&Array2::zeros((2, 2)), &a).is_err());
    }

    #[test]
    fn cka_matches_closed_form_for_identity_vs_spiked_diagonal() {
        let d = 4;
        let eye = CovarianceSpec::identity(d).unwrap().dense();
        let mut spiked = eye.clone();
        spiked[[0, 0]] = 2.0;
        // ⟨I, D⟩ = d+1, ‖I‖ = √d, ‖D‖ = √(d+3).
        let expect = (d as f64 + 1.0) / ((d as f64).sqrt() * (d as f64 + 3.0).sqrt());
        assert_abs_diff_eq!(cka(&eye, &spiked).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn centered_cka_is_one_on_itself_and_differs_from_plain() {
        let a = array![[2.0, 0.0], [0.0, 1.0]];
        let b = array![[3.0, 0.5], [0.5, 1.0]];
        assert_abs_diff_eq!(cka_centered(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let plain = cka(&a, &b).unwrap();
        let centered = cka_centered(&a, &b).unwrap();
        assert!((plain - centered).abs() > 1e-6);
    }

    fn base_params() -> ModelParams {
        ModelParams {
            alpha_train: 2.0,
            alpha_test: 2.0,
            tau: 4.0,
            kappa: 1.0,
            rho: 0.01,
            lambda: 0.0,
        }
    }

    #[test]
    fn isotropic_report_is_fully_aligned() {
        let eye = CovarianceSpec::identity(8).unwrap();
        let report = alignment_report(&base_params(), &eye, &eye).unwrap();
        assert_abs_diff_eq!(report.trace_test_inv_train, 1.0, epsilon = 1e-14);
        assert!(report.inv_train_defined);
        assert_abs_diff_eq!(report.cka, 1.0, epsilon = 1e-12);
        // Isotropic spectra leave no room between the Ruhe bounds.
        assert_abs_diff_eq!(report.ruhe_lower, report.e_misalign, epsilon = 1e-12);
        assert_abs_diff_eq!(report.ruhe_upper, report.e_misalign, epsilon = 1e-12);
    }

    #[test]
    fn report_respects_ruhe_sandwich_for_misaligned_pair() {
        let train = CovarianceSpec::make_powerlaw(24, 0.9, 1.0).unwrap();
        let test = CovarianceSpec::make_spike(24, 24).unwrap();
        let report = alignment_report(&base_params(), &train, &test).unwrap();
        assert!(
            report.ruhe_lower <= report.e_misalign + 1e-10
                && report.e_misalign <= report.ruhe_upper + 1e-10,
            "{report:?}"
        );
        assert!(report.e_icl > 0.0 && report.trace_test_f > 0.0);
    }

    #[test]
    fn report_matches_direct_theory_errors() {
        let train = CovarianceSpec::make_uniform_linear(10).unwrap();
        let test = CovarianceSpec::make_powerlaw(10, 0.5, 1.0).unwrap();
        let params = base_params();
        let report = alignment_report(&params, &train, &test).unwrap();
        let errors = crate::theory::theory_errors(&params, &train, &test).unwrap();
        assert_abs_diff_eq!(report.e_icl, errors.e_icl, epsilon = 1e-14);
        assert_abs_diff_eq!(report.e_misalign, errors.e_misalign, epsilon = 1e-14);
    }

    #[test]
    fn singular_train_sets_pseudo_inverse_sentinel() {
        let train = CovarianceSpec::make_lowrank(4, 2).unwrap();
        let test = CovarianceSpec::identity(4).unwrap();
        let report = alignment_report(&base_params(), &train, &test).unwrap();
        assert!(!report.inv_train_defined);
        // Spectrum is (2, 2, 0, 0): surviving directions contribute 1/2 each.
        assert_abs_diff_eq!(report.trace_test_inv_train, 0.25, epsilon = 1e-14);
    }
}
