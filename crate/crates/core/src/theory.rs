//! Deterministic-equivalent theory for in-context regression by linear
//! attention.
//!
//! Solves the nested self-consistent equations for the Stieltjes transform of
//! the sample task covariance, the effective ridge/noise pair (λ̃, σ), and
//! evaluates every closed-form error expression: the ICL and IDG errors, their
//! scalar/misalignment split, the deterministic equivalent of the fitted
//! estimator, the infinite-data phase-transition limit, and context-length
//! curves.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::{Error, Result};

/// Asymptotic problem ratios. Finite-size counterparts (ℓ, n, k) are always
/// derived from these plus d, never stored independently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Pretraining context length ratio ℓ/d.
    pub alpha_train: f64,
    /// Test context length ratio ℓ_test/d.
    pub alpha_test: f64,
    /// Samples per parameter, n/d².
    pub tau: f64,
    /// Task diversity k/d; `f64::INFINITY` selects the infinite-diversity
    /// resolvent exactly.
    #[serde(with = "kappa_serde")]
    pub kappa: f64,
    /// Label noise variance.
    pub rho: f64,
    /// Explicit ridge; 0 selects the ridgeless limit.
    pub lambda: f64,
}

/// Serialize κ as a number, or as the string "inf" when infinite (JSON has no
/// literal infinity).
mod kappa_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    struct KappaVisitor;

    impl Visitor<'_> for KappaVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a positive number or the string \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
            Ok(v)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
            match v {
                "inf" | "Inf" | "infinity" | "Infinity" => Ok(f64::INFINITY),
                other => other.parse().map_err(|_| E::custom("unparseable kappa")),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        d.deserialize_any(KappaVisitor)
    }
}

impl ModelParams {
    /// Check every parameter constraint; ridgeless τ = 1 is unsupported.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.alpha_train, "alpha_train"),
            (self.alpha_test, "alpha_test"),
            (self.tau, "tau"),
        ];
        for (v, name) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and > 0")));
            }
        }
        if self.kappa.is_nan() || self.kappa <= 0.0 {
            return Err(Error::InvalidArgument("kappa must be > 0 (may be infinite)".into()));
        }
        for (v, name) in [(self.rho, "rho"), (self.lambda, "lambda")] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        if self.lambda == 0.0 && self.tau == 1.0 {
            return Err(Error::Unsupported(
                "ridgeless tau = 1 sits on the interpolation threshold; pass a small lambda > 0"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Converged self-consistent quantities for one (params, C_train) pair.
#[derive(Clone, Debug, Serialize)]
pub struct SolverSolution {
    /// Effective noise σ = (ρ + tr̄\[C_train\])/α_train + λ̃.
    pub sigma: f64,
    /// Effective ridge λ̃ (zero on the ridgeless τ > 1 branch).
    pub lambda_tilde: f64,
    /// Stieltjes transform M_κ(σ).
    pub m: f64,
    /// Derivative M′_κ(σ).
    pub m_prime: f64,
    /// A_κ = 1 − 1/κ + (σ/κ)·M.
    pub a_coeff: f64,
    /// B_κ = (1/κ)·M + (σ/κ)·M′.
    pub b_coeff: f64,
    /// Eigenvalues of F_κ(σ): f_i = 1/(A·λ_i + σ).
    pub f_spectrum: Array1<f64>,
    /// Eigenvalues of F′_κ(σ): f′_i = −(B·λ_i + 1)·f_i².
    pub f_prime_spectrum: Array1<f64>,
    /// Pretraining-error ratio q = e_IDG/τ.
    pub q: f64,
    /// |M − (1/d)Σ 1/(Aλ_i + σ)| at return.
    pub m_residual: f64,
    /// Residual of the effective-ridge equation at return.
    pub ridge_residual: f64,
    /// Total inner iterations across all nested solves.
    pub iterations: usize,
}

/// Closed-form error values for one (params, C_train, C_test) triple.
#[derive(Clone, Debug, Serialize)]
pub struct TheoryErrors {
    /// Full in-context learning error e_ICL = e_scalar + e_misalign.
    pub e_icl: f64,
    /// In-distribution generalization error e_IDG = τ·q.
    pub e_idg: f64,
    /// Test-structure-independent part of e_ICL.
    pub e_scalar: f64,
    /// Alignment part (1/d)·tr[C_test·K].
    pub e_misalign: f64,
    /// Eigenvalues of K = q·F + (qλ̃ − σ²)·F′ in C_train's eigenbasis.
    pub k_spectrum: Array1<f64>,
}

/// Outcome of a converged scalar root solve.
struct RootSolve {
    x: f64,
    fx: f64,
    iterations: usize,
}

/// Brent's method on a bracketing interval [a, b] with f(a)·f(b) ≤ 0.
fn brent_root<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
    ftol: f64,
    max_iter: usize,
) -> Result<RootSolve> {
    if fa == 0.0 {
        return Ok(RootSolve { x: a, fx: 0.0, iterations: 0 });
    }
    if fb == 0.0 {
        return Ok(RootSolve { x: b, fx: 0.0, iterations: 0 });
    }
    if fa.signum() == fb.signum() {
        return Err(Error::ConvergenceFailure { residual: fb.abs(), iterations: 0 });
    }
    let (mut c, mut fc) = (a, fa);
    let mut d_step = b - a;
    let mut e_step = b - a;
    for it in 1..=max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d_step = b - a;
            e_step = d_step;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 1e-300;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb.abs() <= ftol {
            return Ok(RootSolve { x: b, fx: fb, iterations: it });
        }
        if e_step.abs() >= tol1 && fa.abs() > fb.abs() {
            // Inverse quadratic interpolation (secant when only two points).
            let s = fb / fa;
            let (mut p, mut qq) = if a == c {
                (2.0 * xm * s, 1.0 - s)
            } else {
                let q2 = fa / fc;
                let r = fb / fc;
                (
                    s * (2.0 * xm * q2 * (q2 - r) - (b - a) * (r - 1.0)),
                    (q2 - 1.0) * (r - 1.0) * (s - 1.0),
                )
            };
            if p > 0.0 {
                qq = -qq;
            }
            p = p.abs();
            let min1 = 3.0 * xm * qq - (tol1 * qq).abs();
            let min2 = (e_step * qq).abs();
            if 2.0 * p < min1.min(min2) {
                e_step = d_step;
                d_step = p / qq;
            } else {
                d_step = xm;
                e_step = d_step;
            }
        } else {
            d_step = xm;
            e_step = d_step;
        }
        a = b;
        fa = fb;
        b += if d_step.abs() > tol1 { d_step } else { tol1.copysign(xm) };
        fb = f(b)?;
    }
    Err(Error::ConvergenceFailure { residual: fb.abs(), iterations: max_iter })
}

/// Converged inner solve for (M, A) at one argument z.
struct MSolve {
    m: f64,
    a: f64,
    residual: f64,
    iterations: usize,
}

fn check_spectrum(spectrum: &Array1<f64>) -> Result<()> {
    if spectrum.is_empty() {
        return Err(Error::InvalidArgument("spectrum must be non-empty".into()));
    }
    if spectrum.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "spectrum entries must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// Solve M = (1/d)Σ 1/(Aλ_i + z), A = 1 − 1/κ + (z/κ)M by bisecting the
/// strictly increasing residual h(A) = M(A) − (1/d)Σ 1/(Aλ_i + z), where
/// M(A) = (κ(A−1) + 1)/z inverts the A-definition. h is negative at the
/// left endpoint max(0, 1 − 1/κ) and grows like κA/z, so a root always
/// brackets; this is robust where naive damped iteration on M diverges
/// (κ < 1 at small z).
fn solve_m(spectrum: &Array1<f64>, kappa: f64, z: f64) -> Result<MSolve> {
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::InvalidArgument("stieltjes argument z must be finite and > 0".into()));
    }
    if kappa.is_nan() || kappa <= 0.0 {
        return Err(Error::InvalidArgument("kappa must be > 0".into()));
    }
    check_spectrum(spectrum)?;
    let d = spectrum.len() as f64;
    let mean_resolvent = |a: f64| spectrum.iter().map(|&l| 1.0 / (a * l + z)).sum::<f64>() / d;
    if kappa.is_infinite() {
        return Ok(MSolve { m: mean_resolvent(1.0), a: 1.0, residual: 0.0, iterations: 0 });
    }
    let m_of_a = |a: f64| (kappa * (a - 1.0) + 1.0) / z;
    let h = |a: f64| m_of_a(a) - mean_resolvent(a);

    let lo0 = (1.0 - 1.0 / kappa).max(0.0);
    let mut hi = lo0 + 1.0;
    let mut expansions = 0usize;
    while h(hi) <= 0.0 {
        hi = lo0 + (hi - lo0) * 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::ConvergenceFailure { residual: h(hi).abs(), iterations: expansions });
        }
    }
    let mut lo = lo0;
    let mut iterations = expansions;
    // Bisection to machine precision; ~60 iterations regardless of scale.
    while hi - lo > f64::EPSILON * hi.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
        if iterations > 400 {
            break;
        }
    }
    let mut a = 0.5 * (lo + hi);
    // Newton polish: h'(A) = κ/z + (1/d)Σ λ_i/(Aλ_i+z)² > 0.
    for _ in 0..3 {
        let mut mean = 0.0;
        let mut slope = 0.0;
        for &l in spectrum {
            let g = 1.0 / (a * l + z);
            mean += g;
            slope += l * g * g;
        }
        mean /= d;
        slope /= d;
        let h_val = m_of_a(a) - mean;
        let step = h_val / (kappa / z + slope);
        let next = a - step;
        if !next.is_finite() || next < lo0 {
            break;
        }
        a = next;
        iterations += 1;
        if step.abs() <= f64::EPSILON * a.abs().max(1.0) {
            break;
        }
    }
    let m = mean_resolvent(a);
    let residual = (m_of_a(a) - m).abs();
    Ok(MSolve { m, a, residual, iterations })
}

/// Stieltjes transform M_κ(z) of the k-sample task covariance and the
/// coefficient A_κ, solved to a fixed-point residual below 1e-12.
pub fn stieltjes_m(spectrum: &Array1<f64>, kappa: f64, z: f64) -> Result<(f64, f64)> {
    let sol = solve_m(spectrum, kappa, z)?;
    Ok((sol.m, sol.a))
}

/// Derivative M′_κ(z) and coefficient B_κ, from the exact linear equation
/// obtained by differentiating the fixed point:
/// M′·(1 + (z/κ)T) = −((M/κ)T + S) with T = (1/d)Σ λ_i/(Aλ_i+z)² and
/// S = (1/d)Σ 1/(Aλ_i+z)².
pub fn stieltjes_m_prime(
    spectrum: &Array1<f64>,
    kappa: f64,
    z: f64,
    m: f64,
    a_coeff: f64,
) -> Result<(f64, f64)> {
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::InvalidArgument("stieltjes argument z must be finite and > 0".into()));
    }
    check_spectrum(spectrum)?;
    let d = spectrum.len() as f64;
    if kappa.is_infinite() {
        let m_prime = -spectrum.iter().map(|&l| (l + z).powi(-2)).sum::<f64>() / d;
        return Ok((m_prime, 0.0));
    }
    let mut t = 0.0;
    let mut s = 0.0;
    for &l in spectrum {
        let g = 1.0 / (a_coeff * l + z);
        t += l * g * g;
        s += g * g;
    }
    t /= d;
    s /= d;
    let denom = 1.0 + (z / kappa) * t;
    if denom.abs() < 1e-300 || !denom.is_finite() {
        return Err(Error::InvalidArgument("degenerate input: vanishing M' denominator".into()));
    }
    let m_prime = -((m / kappa) * t + s) / denom;
    let b_coeff = m / kappa + (z / kappa) * m_prime;
    Ok((m_prime, b_coeff))
}

/// Closed-form isotropic M_κ(z) for spectrum ≡ c (used as an independent
/// cross-check of the fixed-point solver).
pub fn isotropic_m(c: f64, kappa: f64, z: f64) -> f64 {
    if kappa.is_infinite() {
        return 1.0 / (c + z);
    }
    let b = z + c - c / kappa;
    2.0 / (b + (b * b + 4.0 * z * c / kappa).sqrt())
}

/// Solve the full nested system for one (params, C_train) pair.
pub fn solve_self_consistent(
    params: &ModelParams,
    train: &CovarianceSpec,
) -> Result<SolverSolution> {
    params.validate()?;
    let spectrum = train.spectrum();
    let c_train = train.normalized_trace();
    let base = (params.rho + c_train) / params.alpha_train;
    if base <= 0.0 {
        return Err(Error::InvalidArgument(
            "rho + tr[C_train] must be positive (no signal and no noise)".into(),
        ));
    }
    let kappa = params.kappa;
    let tau = params.tau;
    let mut iterations = 0usize;

    // Effective ridge λ̃.
    let (lambda_tilde, ridge_residual) = if params.lambda == 0.0 {
        if tau > 1.0 {
            (0.0, 0.0)
        } else {
            // τ < 1: λ̃·M_κ(base + λ̃) = 1 − τ; the left side runs from 0 to 1.
            let target = 1.0 - tau;
            let mut g = |lt: f64| -> Result<f64> {
                let sol = solve_m(spectrum, kappa, base + lt)?;
                iterations += sol.iterations;
                Ok(lt * sol.m - target)
            };
            let lo = 0.0;
            let flo = -target;
            let mut hi = base.max(1.0);
            let mut fhi = g(hi)?;
            let mut expansions = 0;
            while fhi <= 0.0 {
                hi *= 2.0;
                fhi = g(hi)?;
                expansions += 1;
                if expansions > 200 {
                    return Err(Error::ConvergenceFailure {
                        residual: fhi.abs(),
                        iterations: expansions,
                    });
                }
            }
            let root = brent_root(&mut g, lo, hi, flo, fhi, 1e-13, 200)?;
            iterations += root.iterations;
            (root.x, root.fx.abs())
        }
    } else {
        // General ridge: λ̃·M_κ(base + λ̃) − λτ/λ̃ = 1 − τ; the left side runs
        // from −∞ at λ̃ → 0⁺ to 1 as λ̃ → ∞, so a root always brackets.
        let target = 1.0 - tau;
        let mut g = |lt: f64| -> Result<f64> {
            let sol = solve_m(spectrum, kappa, base + lt)?;
            iterations += sol.iterations;
            Ok(lt * sol.m - params.lambda * tau / lt - target)
        };
        let mut lo = base.min(1.0);
        let mut flo = g(lo)?;
        let mut shrinks = 0;
        while flo >= 0.0 {
            lo *= 0.25;
            flo = g(lo)?;
            shrinks += 1;
            if shrinks > 600 {
                return Err(Error::ConvergenceFailure { residual: flo.abs(), iterations: shrinks });
            }
        }
        let mut hi = base.max(1.0);
        let mut fhi = g(hi)?;
        let mut expansions = 0;
        while fhi <= 0.0 {
            hi *= 2.0;
            fhi = g(hi)?;
            expansions += 1;
            if expansions > 200 {
                return Err(Error::ConvergenceFailure {
                    residual: fhi.abs(),
                    iterations: expansions,
                });
            }
        }
        let root = brent_root(&mut g, lo, hi, flo, fhi, 1e-13, 200)?;
        iterations += root.iterations;
        (root.x, root.fx.abs())
    };

    let sigma = base + lambda_tilde;
    let msol = solve_m(spectrum, kappa, sigma)?;
    iterations += msol.iterations;
    let (m_prime, b_coeff) = stieltjes_m_prime(spectrum, kappa, sigma, msol.m, msol.a)?;

    let f_spectrum = spectrum.mapv(|l| 1.0 / (msol.a * l + sigma));
    let f_prime_spectrum =
        ndarray::Zip::from(spectrum).and(&f_spectrum).map_collect(|&l, &f| {
            -(b_coeff * l + 1.0) * f * f
        });

    let m = msol.m;
    let lt = lambda_tilde;
    let q_num = params.rho + sigma - sigma * sigma * m
        - lt * (1.0 - 2.0 * sigma * m - sigma * sigma * m_prime);
    let q_den = tau - (1.0 - 2.0 * lt * m - lt * lt * m_prime);
    if q_den.abs() < 1e-300 || !q_den.is_finite() {
        return Err(Error::ConvergenceFailure { residual: q_den.abs(), iterations });
    }
    let q = q_num / q_den;

    let solution = SolverSolution {
        sigma,
        lambda_tilde,
        m,
        m_prime,
        a_coeff: msol.a,
        b_coeff,
        f_spectrum,
        f_prime_spectrum,
        q,
        m_residual: msol.residual,
        ridge_residual,
        iterations,
    };
    for v in [solution.sigma, solution.m, solution.m_prime, solution.q] {
        if !v.is_finite() {
            return Err(Error::ConvergenceFailure { residual: f64::NAN, iterations });
        }
    }
    Ok(solution)
}

/// Error formulas evaluated from an already-converged solution, letting one
/// solve serve many test covariances.
pub fn theory_errors_from(
    solution: &SolverSolution,
    params: &ModelParams,
    train: &CovarianceSpec,
    test: &CovarianceSpec,
) -> Result<TheoryErrors> {
    if train.dim() != test.dim() {
        return Err(Error::InvalidArgument(format!(
            "train dim {} != test dim {}",
            train.dim(),
            test.dim()
        )));
    }
    let d = train.dim() as f64;
    let (sigma, m, m_prime, q, lt) =
        (solution.sigma, solution.m, solution.m_prime, solution.q, solution.lambda_tilde);
    let c_test = test.normalized_trace();
    let e_scalar = params.rho
        + ((params.rho + c_test) / params.alpha_test)
            * (1.0 + (q - 2.0 * sigma) * m + (q * lt - sigma * sigma) * m_prime);
    let k_spectrum = ndarray::Zip::from(&solution.f_spectrum)
        .and(&solution.f_prime_spectrum)
        .map_collect(|&f, &fp| q * f + (q * lt - sigma * sigma) * fp);
    let diag_test = test.diag_in_basis(train)?;
    let e_misalign = diag_test
        .iter()
        .zip(k_spectrum.iter())
        .map(|(t, k)| t * k)
        .sum::<f64>()
        / d;
    let e_icl = e_scalar + e_misalign;
    let e_idg = params.tau * q;
    Ok(TheoryErrors { e_icl, e_idg, e_scalar, e_misalign, k_spectrum })
}

/// High-dimensional ICL/IDG errors for one (params, C_train, C_test) triple.
pub fn theory_errors(
    params: &ModelParams,
    train: &CovarianceSpec,
    test: &CovarianceSpec,
) -> Result<TheoryErrors> {
    let solution = solve_self_consistent(params, train)?;
    theory_errors_from(&solution, params, train, test)
}

/// Diagonal of the deterministic equivalent of the fitted estimator's first
/// block, 1 − σ·f_i per train eigendirection (the trailing column is zero).
pub fn gamma_equivalent_diag(solution: &SolverSolution) -> Array1<f64> {
    solution.f_spectrum.mapv(|f| 1.0 - solution.sigma * f)
}

/// Limiting ICL error for α, τ → ∞ at fixed ratio γ = α/τ, exhibiting the
/// phase transition at κ = rank(C_train)/d.
///
/// For κ < r the level x₁ solves (1/d)Σ 1/(x₁λ_i + 1) = 1 − κ; for κ > r the
/// level diverges and the trace term collapses exactly onto the mass C_test
/// places on C_train's null space. At κ = r the two one-sided values (equal
/// by continuity) are returned inside [`Error::RankBoundary`].
pub fn icl_error_limit(
    gamma_ratio: f64,
    kappa: f64,
    train: &CovarianceSpec,
    test: &CovarianceSpec,
    rho: f64,
) -> Result<f64> {
    if !gamma_ratio.is_finite() || gamma_ratio <= 0.0 {
        return Err(Error::InvalidArgument("gamma_ratio must be finite and > 0".into()));
    }
    if kappa.is_nan() || kappa <= 0.0 {
        return Err(Error::InvalidArgument("kappa must be > 0".into()));
    }
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::InvalidArgument("rho must be finite and >= 0".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::InvalidArgument("train/test dims differ".into()));
    }
    let d = train.dim() as f64;
    let spectrum = train.spectrum();
    let c_train = train.normalized_trace();
    if rho + c_train <= 0.0 {
        return Err(Error::InvalidArgument("rho + tr[C_train] must be positive".into()));
    }
    let prefactor = 1.0 + rho * gamma_ratio / (rho + c_train);
    let r = train.rank() as f64 / d;
    let diag_test = test.diag_in_basis(train)?;

    let null_mass = || {
        let floor = 1e-12 * spectrum[0].max(1e-300);
        spectrum
            .iter()
            .zip(diag_test.iter())
            .filter(|(l, _)| **l <= floor)
            .map(|(_, t)| t)
            .sum::<f64>()
            / d
    };

    if kappa < r {
        let target = 1.0 - kappa;
        let mut phi = |x: f64| -> Result<f64> {
            Ok(spectrum.iter().map(|&l| 1.0 / (x * l + 1.0)).sum::<f64>() / d - target)
        };
        let lo = 0.0;
        let flo = kappa; // phi(0) = 1 − (1 − κ)
        let mut hi = 1.0;
        let mut fhi = phi(hi)?;
        let mut expansions = 0;
        while fhi >= 0.0 {
            hi *= 2.0;
            fhi = phi(hi)?;
            expansions += 1;
            if expansions > 400 {
                return Err(Error::ConvergenceFailure {
                    residual: fhi.abs(),
                    iterations: expansions,
                });
            }
        }
        let root = brent_root(&mut phi, lo, hi, flo, fhi, 1e-14, 200)?;
        let x1 = root.x;
        let trace_term = spectrum
            .iter()
            .zip(diag_test.iter())
            .map(|(&l, &t)| t / (x1 * l + 1.0))
            .sum::<f64>()
            / d;
        Ok(rho + prefactor * trace_term)
    } else if kappa > r {
        Ok(rho + prefactor * null_mass())
    } else {
        let v = rho + prefactor * null_mass();
        Err(Error::RankBoundary { below: v, above: v })
    }
}

/// e_ICL as a function of test context length, all else fixed.
pub fn context_length_curve(
    params: &ModelParams,
    train: &CovarianceSpec,
    test: &CovarianceSpec,
    alpha_test_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if alpha_test_grid.is_empty() {
        return Err(Error::InvalidArgument("alpha_test grid must be non-empty".into()));
    }
    if alpha_test_grid.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidArgument("alpha_test values must be finite and > 0".into()));
    }
    if alpha_test_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("alpha_test grid must be sorted ascending".into()));
    }
    let solution = solve_self_consistent(params, train)?;
    let mut out = Vec::with_capacity(alpha_test_grid.len());
    for &at in alpha_test_grid {
        let p = ModelParams { alpha_test: at, ..*params };
        let te = theory_errors_from(&solution, &p, train, test)?;
        out.push((at, te.e_icl));
    }
    Ok(out)
}
