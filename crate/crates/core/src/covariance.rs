//! Task covariances stored spectrally (eigenvalues plus optional eigenbasis).
//!
//! Houses the pretrain and test task covariances used throughout the library.
//! Every downstream formula consumes either the spectrum alone or the diagonal
//! of a test covariance in the train eigenbasis, so a spec stores eigenvalues
//! sorted non-increasing together with an optional orthogonal basis (absent
//! meaning the standard basis); dense matrices are materialized on demand.

use ndarray::{Array1, Array2};
use ndarray_linalg::QR;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Elementwise tolerance for the basis orthogonality check UᵀU = I.
const ORTHO_TOL: f64 = 1e-10;

/// A task covariance C = U·diag(λ)·Uᵀ with λ sorted non-increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCovariance", into = "RawCovariance")]
pub struct CovarianceSpec {
    dim: usize,
    spectrum: Array1<f64>,
    basis: Option<Array2<f64>>,
    kind: String,
    trace: f64,
}

/// Serialization mirror: basis flattened row-major, trace recomputed on load.
#[derive(Serialize, Deserialize)]
struct RawCovariance {
    dim: usize,
    spectrum: Vec<f64>,
    basis: Option<Vec<f64>>,
    kind: String,
}

impl TryFrom<RawCovariance> for CovarianceSpec {
    type Error = Error;

    fn try_from(raw: RawCovariance) -> Result<Self> {
        let basis = match raw.basis {
            Some(flat) => {
                let u = Array2::from_shape_vec((raw.dim, raw.dim), flat).map_err(|_| {
                    Error::InvalidArgument("basis length must equal dim^2".into())
                })?;
                Some(u)
            }
            None => None,
        };
        Self::from_parts(Array1::from_vec(raw.spectrum), basis, raw.kind)
    }
}

impl From<CovarianceSpec> for RawCovariance {
    fn from(spec: CovarianceSpec) -> Self {
        RawCovariance {
            dim: spec.dim,
            spectrum: spec.spectrum.to_vec(),
            basis: spec.basis.map(|u| u.iter().copied().collect()),
            kind: spec.kind,
        }
    }
}

impl CovarianceSpec {
    /// Build a spec from raw parts, validating every structural invariant.
    pub fn from_parts(
        spectrum: Array1<f64>,
        basis: Option<Array2<f64>>,
        kind: String,
    ) -> Result<Self> {
        let dim = spectrum.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("covariance dim must be >= 1".into()));
        }
        if spectrum.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "spectrum entries must be finite and non-negative".into(),
            ));
        }
        if spectrum.windows(2).into_iter().any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "spectrum must be sorted non-increasing".into(),
            ));
        }
        if let Some(u) = &basis {
            if u.shape() != [dim, dim] {
                return Err(Error::InvalidArgument(format!(
                    "basis must be {dim}x{dim}, got {:?}",
                    u.shape()
                )));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("basis entries must be finite".into()));
            }
            let gram = u.t().dot(u);
            for i in 0..dim {
                for j in 0..dim {
                    let target = if i == j { 1.0 } else { 0.0 };
                    if (gram[[i, j]] - target).abs() > ORTHO_TOL {
                        return Err(Error::InvalidArgument(
                            "basis is not orthogonal to within 1e-10".into(),
                        ));
                    }
                }
            }
        }
        let trace = spectrum.sum() / dim as f64;
        Ok(Self { dim, spectrum, basis, kind, trace })
    }

    /// Identity covariance I_d (isotropic tasks, normalized trace 1).
    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_parts(Array1::ones(dim), None, "identity".into())
    }

    /// Power-law spectrum ∝ i^{-p}, rescaled to the given normalized trace.
    pub fn make_powerlaw(dim: usize, p: f64, target_trace: f64) -> Result<Self> {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidArgument("powerlaw exponent must be finite and >= 0".into()));
        }
        if !target_trace.is_finite() || target_trace <= 0.0 {
            return Err(Error::InvalidArgument("target trace must be finite and > 0".into()));
        }
        let raw: Array1<f64> = (1..=dim).map(|i| (i as f64).powf(-p)).collect();
        let spec = Self::from_parts(raw, None, format!("powerlaw(p={p})"))?;
        spec.scale_trace(target_trace)
    }

    /// Linearly decaying spectrum ∝ [d, d−1, …, 1] with normalized trace 1.
    pub fn make_uniform_linear(dim: usize) -> Result<Self> {
        let raw: Array1<f64> = (1..=dim).rev().map(|i| i as f64).collect();
        Self::from_parts(raw, None, "uniform-linear".into())?.scale_trace(1.0)
    }

    /// Rank-1 spike d·e_i e_iᵀ at the 1-based coordinate `index`.
    pub fn make_spike(dim: usize, index: usize) -> Result<Self> {
        if index == 0 || index > dim {
            return Err(Error::InvalidArgument(format!(
                "spike index must lie in 1..={dim}, got {index}"
            )));
        }
        let mut spectrum = Array1::zeros(dim);
        spectrum[0] = dim as f64;
        // Permutation basis swapping e_1 and e_index so the spike eigenvalue
        // (stored first to keep the spectrum sorted) sits on coordinate index.
        let basis = if index == 1 {
            None
        } else {
            let mut u = Array2::eye(dim);
            u[[0, 0]] = 0.0;
            u[[index - 1, index - 1]] = 0.0;
            u[[index - 1, 0]] = 1.0;
            u[[0, index - 1]] = 1.0;
            Some(u)
        };
        Self::from_parts(spectrum, basis, format!("spike(i={index})"))
    }

    /// Low-rank covariance diag[(d/r)·1_r, 0_{d−r}] with normalized trace 1.
    pub fn make_lowrank(dim: usize, r: usize) -> Result<Self> {
        if r == 0 || r > dim {
            return Err(Error::InvalidArgument(format!(
                "lowrank rank must lie in 1..={dim}, got {r}"
            )));
        }
        let value = dim as f64 / r as f64;
        let spectrum: Array1<f64> =
            (0..dim).map(|i| if i < r { value } else { 0.0 }).collect();
        Self::from_parts(spectrum, None, format!("lowrank(r={r})"))
    }

    /// Diagonal covariance with the given entries on the standard axes.
    ///
    /// The spectrum is stored sorted with a permutation basis restoring the
    /// original coordinate placement.
    pub fn from_diag_entries(entries: &[f64]) -> Result<Self> {
        let dim = entries.len();
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "diagonal entries must be finite and non-negative".into(),
            ));
        }
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| entries[b].total_cmp(&entries[a]));
        let spectrum: Array1<f64> = order.iter().map(|&i| entries[i]).collect();
        let already_sorted = order.iter().enumerate().all(|(k, &i)| k == i);
        let basis = if already_sorted {
            None
        } else {
            let mut u = Array2::zeros((dim, dim));
            for (k, &i) in order.iter().enumerate() {
                u[[i, k]] = 1.0;
            }
            Some(u)
        };
        Self::from_parts(spectrum, basis, "diag".into())
    }

    /// Dimension d.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Eigenvalues, sorted non-increasing.
    pub fn spectrum(&self) -> &Array1<f64> {
        &self.spectrum
    }

    /// Eigenbasis (columns are eigenvectors); `None` means the standard basis.
    pub fn basis(&self) -> Option<&Array2<f64>> {
        self.basis.as_ref()
    }

    /// Constructor tag recorded for labeling outputs.
    pub fn kind(&self) -> &str {
        self.kind.as_str()
    }

    /// Normalized trace (1/d)·Σλ_i.
    pub fn normalized_trace(&self) -> f64 {
        self.trace
    }

    /// Normalized trace of the square, (1/d)·Σλ_i².
    pub fn normalized_trace_sq(&self) -> f64 {
        self.spectrum.iter().map(|v| v * v).sum::<f64>() / self.dim as f64
    }

    /// Number of eigenvalues above a relative floor of 1e-12·λ_max.
    pub fn rank(&self) -> usize {
        let floor = 1e-12 * self.spectrum[0].max(1e-300);
        self.spectrum.iter().filter(|v| **v > floor).count()
    }

    /// Materialize the dense matrix U·diag(λ)·Uᵀ.
    pub fn dense(&self) -> Array2<f64> {
        match &self.basis {
            None => Array2::from_diag(&self.spectrum),
            Some(u) => {
                let scaled = u * &self.spectrum; // column j scaled by λ_j
                scaled.dot(&u.t())
            }
        }
    }

    /// Rescale the spectrum so the normalized trace equals `target`.
    pub fn scale_trace(&self, target: f64) -> Result<Self> {
        if !target.is_finite() || target <= 0.0 {
            return Err(Error::InvalidArgument("target trace must be finite and > 0".into()));
        }
        if self.trace <= 0.0 {
            return Err(Error::InvalidArgument("cannot rescale a zero covariance".into()));
        }
        let factor = target / self.trace;
        Self::from_parts(&self.spectrum * factor, self.basis.clone(), self.kind.clone())
    }

    /// Pair the spectrum with the eigenvectors in reverse order (the weakest
    /// eigenvalue moves onto the previously strongest direction).
    pub fn reversed(&self) -> Self {
        let d = self.dim;
        let mut u = match &self.basis {
            None => Array2::zeros((d, d)),
            Some(b) => {
                let mut rev = b.clone();
                rev.invert_axis(ndarray::Axis(1));
                return Self {
                    basis: Some(rev),
                    kind: format!("{}+reversed", self.kind),
                    ..self.clone()
                };
            }
        };
        for j in 0..d {
            u[[d - 1 - j, j]] = 1.0;
        }
        Self { basis: Some(u), kind: format!("{}+reversed", self.kind), ..self.clone() }
    }

    /// Re-seat the spectrum on a Haar-random orthogonal eigenbasis.
    pub fn rotated<R: Rng>(&self, rng: &mut R) -> Result<Self> {
        let q = haar_orthogonal(self.dim, rng)?;
        Ok(Self { basis: Some(q), kind: format!("{}+rotated", self.kind), ..self.clone() })
    }

    /// Diagonal of this covariance expressed in `reference`'s eigenbasis,
    /// i.e. diag(Vᵀ·C·V) with V the reference basis.
    pub fn diag_in_basis(&self, reference: &CovarianceSpec) -> Result<Array1<f64>> {
        if self.dim != reference.dim {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: {} vs {}",
                self.dim, reference.dim
            )));
        }
        let w = match (&reference.basis, &self.basis) {
            (None, None) => return Ok(self.spectrum.clone()),
            (None, Some(u)) => u.clone(),
            (Some(v), None) => v.t().to_owned(),
            (Some(v), Some(u)) => v.t().dot(u),
        };
        // diag_j = Σ_k W_jk² λ_k
        let w2 = &w * &w;
        Ok(w2.dot(&self.spectrum))
    }
}

/// Conjugate a covariance into the given orthogonal basis: Uᵀ·C·U.
pub fn project_onto_basis(test: &CovarianceSpec, train_basis: &Array2<f64>) -> Result<Array2<f64>> {
    if train_basis.shape() != [test.dim, test.dim] {
        return Err(Error::InvalidArgument(format!(
            "basis shape {:?} does not match covariance dim {}",
            train_basis.shape(),
            test.dim
        )));
    }
    let dense = test.dense();
    let projected = train_basis.t().dot(&dense).dot(train_basis);
    // Symmetrize away the last-bit asymmetry from the two matrix products.
    let sym = 0.5 * (&projected + &projected.t());
    Ok(sym)
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// sign-fixed diagonal).
pub fn haar_orthogonal<R: Rng>(dim: usize, rng: &mut R) -> Result<Array2<f64>> {
    let gauss: Array2<f64> =
        Array2::from_shape_simple_fn((dim, dim), || rng.sample(StandardNormal));
    let (mut q, r) = gauss.qr()?;
    for j in 0..dim {
        if r[[j, j]] < 0.0 {
            q.column_mut(j).mapv_inplace(|v| -v);
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn powerlaw_isotropic_at_zero_exponent() {
        let spec = CovarianceSpec::make_powerlaw(4, 0.0, 1.0).unwrap();
        assert_eq!(spec.spectrum().to_vec(), vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn powerlaw_two_dim_hand_values() {
        let spec = CovarianceSpec::make_powerlaw(2, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(spec.spectrum()[0], 4.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spec.spectrum()[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn powerlaw_trace_normalized_at_scale() {
        let spec = CovarianceSpec::make_powerlaw(120, 0.9, 1.0).unwrap();
        assert_abs_diff_eq!(spec.normalized_trace(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spec.spectrum().sum() / 120.0, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_linear_hand_values() {
        assert_eq!(
            CovarianceSpec::make_uniform_linear(1).unwrap().spectrum().to_vec(),
            vec![1.0]
        );
        let spec = CovarianceSpec::make_uniform_linear(3).unwrap();
        assert_eq!(spec.spectrum().to_vec(), vec![1.5, 1.0, 0.5]);
        let big = CovarianceSpec::make_uniform_linear(120).unwrap();
        assert_abs_diff_eq!(big.normalized_trace(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spike_places_mass_on_requested_coordinate() {
        let first = CovarianceSpec::make_spike(2, 1).unwrap().dense();
        assert_eq!(first[[0, 0]], 2.0);
        assert_eq!(first[[1, 1]], 0.0);

        let third = CovarianceSpec::make_spike(4, 3).unwrap();
        let dense = third.dense();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if (i, j) == (2, 2) { 4.0 } else { 0.0 };
                assert_abs_diff_eq!(dense[[i, j]], expect, epsilon = 1e-14);
            }
        }
        assert_abs_diff_eq!(third.normalized_trace(), 1.0, epsilon = 1e-15);
        assert!(CovarianceSpec::make_spike(4, 0).is_err());
        assert!(CovarianceSpec::make_spike(4, 5).is_err());
    }

    #[test]
    fn lowrank_hand_values() {
        let full = CovarianceSpec::make_lowrank(4, 4).unwrap();
        assert_eq!(full.spectrum().to_vec(), vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(
            full.spectrum(),
            CovarianceSpec::make_powerlaw(4, 0.0, 1.0).unwrap().spectrum()
        );
        let half = CovarianceSpec::make_lowrank(4, 2).unwrap();
        assert_eq!(half.spectrum().to_vec(), vec![2.0, 2.0, 0.0, 0.0]);
        assert_eq!(half.rank(), 2);
        assert!(CovarianceSpec::make_lowrank(4, 0).is_err());
        assert!(CovarianceSpec::make_lowrank(4, 5).is_err());
    }

    #[test]
    fn projection_identity_basis_is_noop() {
        let test = CovarianceSpec::from_diag_entries(&[3.0, 1.0]).unwrap();
        let projected = project_onto_basis(&test, &Array2::eye(2)).unwrap();
        assert_eq!(projected, test.dense());
    }

    #[test]
    fn projection_by_swap_permutation() {
        let test = CovarianceSpec::from_diag_entries(&[3.0, 1.0]).unwrap();
        let mut swap = Array2::zeros((2, 2));
        swap[[0, 1]] = 1.0;
        swap[[1, 0]] = 1.0;
        let projected = project_onto_basis(&test, &swap).unwrap();
        assert_abs_diff_eq!(projected[[0, 0]], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(projected[[1, 1]], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn projection_preserves_trace_and_frobenius() {
        let mut rng = RngStream::new(42).rng();
        let test = CovarianceSpec::make_powerlaw(12, 0.7, 1.0).unwrap();
        let u = haar_orthogonal(12, &mut rng).unwrap();
        let projected = project_onto_basis(&test, &u).unwrap();
        let trace: f64 = (0..12).map(|i| projected[[i, i]]).sum();
        assert_abs_diff_eq!(trace / 12.0, test.normalized_trace(), epsilon = 1e-10);
        let frob: f64 = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
        let frob_orig: f64 = test.dense().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(frob, frob_orig, epsilon = 1e-10);
    }

    #[test]
    fn diag_entries_round_trip_through_dense() {
        let entries = [0.5, 4.0, 0.0, 2.5];
        let spec = CovarianceSpec::from_diag_entries(&entries).unwrap();
        assert_eq!(spec.spectrum().to_vec(), vec![4.0, 2.5, 0.5, 0.0]);
        let dense = spec.dense();
        for (i, &e) in entries.iter().enumerate() {
            assert_abs_diff_eq!(dense[[i, i]], e, epsilon = 1e-14);
        }
    }

    #[test]
    fn reversed_pairs_weakest_value_with_strongest_direction() {
        let spec = CovarianceSpec::make_uniform_linear(3).unwrap().reversed();
        let dense = spec.dense();
        assert_abs_diff_eq!(dense[[0, 0]], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(dense[[1, 1]], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(dense[[2, 2]], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn diag_in_basis_matches_dense_projection() {
        let mut rng = RngStream::new(7).rng();
        let train = CovarianceSpec::make_powerlaw(10, 0.9, 1.0)
            .unwrap()
            .rotated(&mut rng)
            .unwrap();
        let test = CovarianceSpec::make_lowrank(10, 3).unwrap().rotated(&mut rng).unwrap();
        let fast = test.diag_in_basis(&train).unwrap();
        let slow = project_onto_basis(&test, train.basis().unwrap()).unwrap();
        for i in 0..10 {
            assert_abs_diff_eq!(fast[i], slow[[i, i]], epsilon = 1e-12);
        }
    }

    #[test]
    fn serde_round_trip() {
        let mut rng = RngStream::new(3).rng();
        let spec = CovarianceSpec::make_powerlaw(6, 0.5, 2.0).unwrap().rotated(&mut rng).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: CovarianceSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn serde_rejects_unsorted_spectrum() {
        let json = r#"{"dim":2,"spectrum":[1.0,2.0],"basis":null,"kind":"diag"}"#;
        assert!(serde_json::from_str::<CovarianceSpec>(json).is_err());
    }
}
