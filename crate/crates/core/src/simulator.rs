//! Finite-size Monte Carlo of the exact in-context regression model.
//!
//! Samples pretraining batches (tasks, contexts, labels), builds the rank-1
//! reduced-model features H = u·vᵀ, fits the estimator Γ* in closed form via
//! primal or dual normal equations, and measures ICL/IDG test error both
//! empirically and through exact population moments of the feature
//! distribution, which removes all test-set sampling noise.

use std::fmt;
use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::linalg;
use crate::rng::RngStream;
use crate::theory::ModelParams;
use crate::{Error, Result};

/// Substream ids under one replicate stream.
const STREAM_BATCH: u64 = 0;
const STREAM_ICL: u64 = 1;
const STREAM_IDG: u64 = 2;
/// Substream ids under one batch stream.
const BATCH_TASKS: u64 = 0;
const BATCH_ASSIGN: u64 = 1;
const BATCH_CONTEXTS: u64 = 2;

/// Which test distribution the error is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMode {
    /// Fresh tasks drawn from C_test (in-context learning).
    Icl,
    /// Tasks re-drawn uniformly from the realized pretraining set
    /// (in-distribution generalization).
    Idg,
}

impl fmt::Display for TestMode {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            TestMode::Icl => "ICL",
            TestMode::Idg => "IDG",
        })
    }
}

/// Full description of one finite-size simulation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    /// Token dimension d.
    pub d: usize,
    /// Asymptotic ratios; finite sizes are derived by rounding.
    pub params: ModelParams,
    /// Pretraining task covariance.
    pub train: CovarianceSpec,
    /// Test task covariance (ICL mode).
    pub test: CovarianceSpec,
    /// Fresh contexts per error estimate.
    pub n_test_contexts: usize,
    /// Independent pretraining batches.
    pub replicates: usize,
    /// Root seed; every random quantity derives from it.
    pub seed: u64,
}

/// Finite-size counterparts of the asymptotic ratios.
#[derive(Clone, Copy, Debug)]
pub struct DerivedSizes {
    /// Pretraining context length ℓ = round(α_train·d).
    pub ell_train: usize,
    /// Test context length ℓ_test = round(α_test·d).
    pub ell_test: usize,
    /// Pretraining contexts n = round(τ·d²).
    pub n: usize,
    /// Task count k = max(1, round(κ·d)).
    pub k: usize,
    /// Feature dimension p = d(d+1).
    pub p: usize,
}

impl SimConfig {
    /// Validate the configuration and derive all finite sizes.
    pub fn derived(&self) -> Result<DerivedSizes> {
        self.params.validate()?;
        if self.d == 0 {
            return Err(Error::InvalidArgument("d must be >= 1".into()));
        }
        if self.train.dim() != self.d || self.test.dim() != self.d {
            return Err(Error::InvalidArgument(format!(
                "covariance dims ({}, {}) must equal d = {}",
                self.train.dim(),
                self.test.dim(),
                self.d
            )));
        }
        if self.n_test_contexts == 0 || self.replicates == 0 {
            return Err(Error::InvalidArgument(
                "n_test_contexts and replicates must be >= 1".into(),
            ));
        }
        if self.params.kappa.is_infinite() {
            return Err(Error::InvalidArgument(
                "simulation requires finite kappa (theory accepts infinity)".into(),
            ));
        }
        let d = self.d as f64;
        let ell_train = (self.params.alpha_train * d).round();
        let ell_test = (self.params.alpha_test * d).round();
        let n = (self.params.tau * d * d).round();
        for (v, name) in [(ell_train, "alpha_train*d"), (ell_test, "alpha_test*d"), (n, "tau*d^2")]
        {
            if v < 1.0 {
                return Err(Error::InvalidArgument(format!("{name} rounds below 1")));
            }
        }
        let k = (self.params.kappa * d).round().max(1.0);
        Ok(DerivedSizes {
            ell_train: ell_train as usize,
            ell_test: ell_test as usize,
            n: n as usize,
            k: k as usize,
            p: self.d * (self.d + 1),
        })
    }
}

/// One sampled pretraining batch in factored feature form.
///
/// The full feature of context μ is the rank-1 matrix H_μ = u_μ·v_μᵀ, so only
/// the factors are stored; [`feature_rows`](Self::feature_rows) materializes
/// flattened features on demand.
#[derive(Clone, Debug)]
pub struct SimBatch {
    /// k×d matrix of tasks; row j is w_j ~ N(0, C_train).
    pub tasks: Array2<f64>,
    /// Task index assigned to each context.
    pub assignments: Vec<usize>,
    /// n×d query tokens u_μ = x_{ℓ+1}.
    pub feat_u: Array2<f64>,
    /// n×(d+1) context summaries v_μ = [(d/ℓ)Σ y_i x_iᵀ, (1/ℓ)Σ y_i²].
    pub feat_v: Array2<f64>,
    /// Noisy query labels y_{ℓ+1}.
    pub targets: Array1<f64>,
    /// Mean of the sampled tasks.
    pub b_k: Array1<f64>,
    /// Sample second moment R_k = (1/k)Σ w_j w_jᵀ.
    pub r_k: Array2<f64>,
}

impl SimBatch {
    /// Flattened features vec(H_μ) for a contiguous range of contexts, one
    /// row per context (row-major flattening of the d×(d+1) matrix).
    pub fn feature_rows(&self, range: Range<usize>) -> Array2<f64> {
        let d = self.feat_u.ncols();
        let width = d + 1;
        let mut out = Array2::zeros((range.len(), d * width));
        for (r, mu) in range.enumerate() {
            let u = self.feat_u.row(mu);
            let v = self.feat_v.row(mu);
            let row = out.row_mut(r).into_slice().expect("standard layout");
            for i in 0..d {
                let ui = u[i];
                for j in 0..width {
                    row[i * width + j] = ui * v[j];
                }
            }
        }
        out
    }

    /// The full d×(d+1) feature matrix of one context.
    pub fn feature(&self, mu: usize) -> Array2<f64> {
        let u = self.feat_u.row(mu);
        let v = self.feat_v.row(mu);
        let d = u.len();
        Array2::from_shape_fn((d, d + 1), |(i, j)| u[i] * v[j])
    }
}

/// The fitted estimator Γ* together with the ridge it was fitted at.
#[derive(Clone, Debug, Serialize)]
pub struct GammaEstimator {
    /// d×(d+1) estimator matrix.
    pub matrix: Array2<f64>,
    /// Ridge λ used in the closed-form solve.
    pub lambda_used: f64,
}

impl GammaEstimator {
    /// Model output ŷ = tr(Γ Hᵀ) = uᵀΓv for the rank-1 feature H = u·vᵀ.
    pub fn predict(&self, u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
        u.dot(&self.matrix.dot(&v))
    }
}

/// Mean squared error of one estimator over sampled test contexts.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ErrorEstimate {
    /// Sample mean of the squared error.
    pub mean: f64,
    /// Standard error of the mean.
    pub stderr: f64,
    /// Number of test contexts behind the estimate.
    pub n_contexts: usize,
}

/// Exact second-moment response matrices of the feature distribution, used to
/// evaluate population test risk of a fitted estimator without sampling.
#[derive(Clone, Debug)]
pub struct PopulationMoments {
    /// E[y·H] under fresh test tasks: [C_test, 0] (d×(d+1)).
    pub a_icl: Array2<f64>,
    /// E[v·vᵀ] under fresh test tasks ((d+1)×(d+1)).
    pub b_icl: Array2<f64>,
    /// E[y·H] conditioned on the realized pretraining task set.
    pub a_idg: Option<Array2<f64>>,
    /// E[v·vᵀ] conditioned on the realized pretraining task set.
    pub b_idg: Option<Array2<f64>>,
}

impl PopulationMoments {
    /// Exact ICL response matrices at test context length ℓ_test.
    ///
    /// All 1/ℓ corrections are kept exactly, so the population risk is the
    /// true finite-size expectation, not its high-dimensional limit.
    pub fn icl(test: &CovarianceSpec, ell_test: usize, rho: f64) -> Result<Self> {
        if ell_test == 0 {
            return Err(Error::InvalidArgument("ell_test must be >= 1".into()));
        }
        if !rho.is_finite() || rho < 0.0 {
            return Err(Error::InvalidArgument("rho must be finite and >= 0".into()));
        }
        let d = test.dim();
        let ell = ell_test as f64;
        let c = test.normalized_trace();
        let dense = test.dense();

        let mut a = Array2::zeros((d, d + 1));
        a.slice_mut(s![.., ..d]).assign(&dense);

        let mut b = Array2::zeros((d + 1, d + 1));
        {
            let mut top_left = b.slice_mut(s![..d, ..d]);
            top_left.assign(&dense);
            top_left *= 1.0 + 1.0 / ell;
        }
        let iso = (d as f64 / ell) * (c + rho);
        for i in 0..d {
            b[[i, i]] += iso;
        }
        b[[d, d]] = (1.0 + 2.0 / ell)
            * ((c + rho).powi(2) + 2.0 * test.normalized_trace_sq() / d as f64);
        Ok(Self { a_icl: a, b_icl: b, a_idg: None, b_idg: None })
    }

    /// Add exact IDG response matrices for a realized task set, evaluated at
    /// the pretraining context length ℓ_train (IDG re-serves training-style
    /// contexts).
    pub fn with_idg(mut self, tasks: &Array2<f64>, ell_train: usize, rho: f64) -> Result<Self> {
        if ell_train == 0 {
            return Err(Error::InvalidArgument("ell_train must be >= 1".into()));
        }
        let (k, d) = tasks.dim();
        if k == 0 || d + 1 != self.a_icl.ncols() {
            return Err(Error::InvalidArgument("task set shape mismatch".into()));
        }
        let ell = ell_train as f64;
        let kf = k as f64;
        let df = d as f64;
        let r_k = tasks.t().dot(tasks) / kf;
        // Per-task label second moment r_j = |w_j|²/d + ρ.
        let r_j: Vec<f64> =
            tasks.rows().into_iter().map(|w| w.dot(&w) / df + rho).collect();
        let mut g = Array1::<f64>::zeros(d);
        for (w, r) in tasks.rows().into_iter().zip(&r_j) {
            g.scaled_add(*r, &w);
        }
        g /= kf;
        let r_bar = r_j.iter().sum::<f64>() / kf;
        let r_sq_bar = r_j.iter().map(|r| r * r).sum::<f64>() / kf;

        let mut a = Array2::zeros((d, d + 1));
        a.slice_mut(s![.., ..d]).assign(&r_k);
        a.column_mut(d).assign(&g);

        let mut b = Array2::zeros((d + 1, d + 1));
        {
            let mut top_left = b.slice_mut(s![..d, ..d]);
            top_left.assign(&r_k);
            top_left *= 1.0 + 1.0 / ell;
        }
        let iso = (df / ell) * r_bar;
        for i in 0..d {
            b[[i, i]] += iso;
        }
        let cross = 1.0 + 2.0 / ell;
        for i in 0..d {
            b[[i, d]] = cross * g[i];
            b[[d, i]] = cross * g[i];
        }
        b[[d, d]] = cross * r_sq_bar;

        self.a_idg = Some(a);
        self.b_idg = Some(b);
        Ok(self)
    }
}

/// Aggregated simulation outcome across replicates.
#[derive(Clone, Debug, Serialize)]
pub struct SimResult {
    /// Mean empirical MSE across replicates.
    pub mse_mean: f64,
    /// Standard error of the mean (between replicates when there are several,
    /// within the single replicate otherwise).
    pub mse_stderr: f64,
    /// Mean exact population MSE of the fitted estimators.
    pub population_mse: f64,
    /// Empirical MSE of each replicate.
    pub per_replicate: Vec<f64>,
}

/// Draw k tasks w_j ~ N(0, C) as the rows of a k×d matrix.
pub fn sample_tasks(cov: &CovarianceSpec, k: usize, stream: RngStream) -> Array2<f64> {
    let d = cov.dim();
    let mut rng = stream.rng();
    let mut z: Array2<f64> =
        Array2::from_shape_simple_fn((k, d), || rng.sample(StandardNormal));
    let sqrt_spec = cov.spectrum().mapv(f64::sqrt);
    z *= &sqrt_spec;
    match cov.basis() {
        None => z,
        Some(u) => z.dot(&u.t()),
    }
}

/// Compute the factored summary (u, v) of one context: u is the query token,
/// v = [(d/ℓ)Σ y_i x_iᵀ, (1/ℓ)Σ y_i²].
fn feature_factors(
    tokens: &Array2<f64>,
    targets: &Array1<f64>,
    d: usize,
    ell: usize,
) -> (Array1<f64>, Array1<f64>) {
    let context = tokens.slice(s![..ell, ..]);
    let weighted = targets.dot(&context);
    let mut v = Array1::zeros(d + 1);
    v.slice_mut(s![..d]).assign(&(&weighted * (d as f64 / ell as f64)));
    v[d] = targets.iter().map(|y| y * y).sum::<f64>() / ell as f64;
    (tokens.row(ell).to_owned(), v)
}

/// The d×(d+1) reduced-model feature H = x_{ℓ+1}·[(d/ℓ)Σ y_i x_iᵀ, (1/ℓ)Σ y_i²].
pub fn build_feature(
    context_tokens: &Array2<f64>,
    context_targets: &Array1<f64>,
    d: usize,
    ell: usize,
) -> Result<Array2<f64>> {
    if ell == 0 {
        return Err(Error::InvalidArgument("ell must be >= 1".into()));
    }
    if context_tokens.shape() != [ell + 1, d] {
        return Err(Error::InvalidArgument(format!(
            "tokens must be (ell+1)x d = {}x{}, got {:?}",
            ell + 1,
            d,
            context_tokens.shape()
        )));
    }
    if context_targets.len() != ell {
        return Err(Error::InvalidArgument("need exactly ell context targets".into()));
    }
    let (u, v) = feature_factors(context_tokens, context_targets, d, ell);
    Ok(Array2::from_shape_fn((d, d + 1), |(i, j)| u[i] * v[j]))
}

/// Simulate one context under task w: tokens ~ N(0, I/d), labels
/// y_i = ⟨x_i, w⟩ + ε_i with ε ~ N(0, ρ), query label included. Returns
/// (u, v, y_query).
fn simulate_context(
    rng: &mut ChaCha8Rng,
    w: ArrayView1<f64>,
    d: usize,
    ell: usize,
    rho: f64,
) -> (Array1<f64>, Array1<f64>, f64) {
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let tokens: Array2<f64> = Array2::from_shape_simple_fn((ell + 1, d), || {
        let z: f64 = rng.sample(StandardNormal);
        z * inv_sqrt_d
    });
    let noise_scale = rho.sqrt();
    let noise: Vec<f64> = (0..=ell)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * noise_scale
        })
        .collect();
    let mut ys = tokens.slice(s![..ell, ..]).dot(&w);
    for (y, eps) in ys.iter_mut().zip(&noise) {
        *y += *eps;
    }
    let (u, v) = feature_factors(&tokens, &ys, d, ell);
    let y_query = tokens.row(ell).dot(&w) + noise[ell];
    (u, v, y_query)
}

/// Sample one full pretraining batch.
pub fn sample_batch(config: &SimConfig, stream: RngStream) -> Result<SimBatch> {
    let sizes = config.derived()?;
    let d = config.d;
    let (ell, n, k) = (sizes.ell_train, sizes.n, sizes.k);
    let tasks = sample_tasks(&config.train, k, stream.child(BATCH_TASKS));
    let mut assign_rng = stream.child(BATCH_ASSIGN).rng();
    let assignments: Vec<usize> = (0..n).map(|_| assign_rng.random_range(0..k)).collect();

    let ctx_root = stream.child(BATCH_CONTEXTS);
    let rho = config.params.rho;
    let rows: Vec<(Array1<f64>, Array1<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|mu| {
            let mut rng = ctx_root.child(mu as u64).rng();
            simulate_context(&mut rng, tasks.row(assignments[mu]), d, ell, rho)
        })
        .collect();

    let mut feat_u = Array2::zeros((n, d));
    let mut feat_v = Array2::zeros((n, d + 1));
    let mut targets = Array1::zeros(n);
    for (mu, (u, v, y)) in rows.into_iter().enumerate() {
        feat_u.row_mut(mu).assign(&u);
        feat_v.row_mut(mu).assign(&v);
        targets[mu] = y;
    }
    let b_k = tasks.mean_axis(Axis(0)).expect("k >= 1");
    let r_k = tasks.t().dot(&tasks) / k as f64;
    Ok(SimBatch { tasks, assignments, feat_u, feat_v, targets, b_k, r_k })
}

/// Closed-form ridge fit of Γ*: vec(Γ*) = ((n/d)λI + Σ vec(H)vec(H)ᵀ)⁻¹ Σ y·vec(H).
///
/// Solved in feature space (p×p) when n ≥ p and in sample space via the
/// rank-1-structured Gram matrix (n×n) otherwise; both give the identical
/// ridge minimizer.
pub fn fit_gamma(batch: &SimBatch, d: usize, n: usize, lambda: f64) -> Result<GammaEstimator> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::InvalidArgument(
            "fit requires lambda > 0 (the ridgeless protocol passes a tiny ridge)".into(),
        ));
    }
    if batch.feat_u.nrows() != n || batch.feat_u.ncols() != d {
        return Err(Error::InvalidArgument("batch does not match (n, d)".into()));
    }
    let p = d * (d + 1);
    let ridge = (n as f64 / d as f64) * lambda;
    let matrix =
        if n >= p { fit_primal(batch, d, n, ridge, lambda)? } else { fit_dual(batch, ridge, lambda)? };
    Ok(GammaEstimator { matrix, lambda_used: lambda })
}

fn fit_primal(
    batch: &SimBatch,
    d: usize,
    n: usize,
    ridge: f64,
    lambda: f64,
) -> Result<Array2<f64>> {
    let p = d * (d + 1);
    let mut gram = Array2::zeros((p, p));
    let mut rhs = Array1::zeros(p);
    // Chunk the n×p feature matrix to ~64 MB so it is never fully resident.
    let chunk = (8_000_000 / p).max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let phi = batch.feature_rows(start..end);
        linalg::syrk_upper_accumulate(&phi, &mut gram);
        rhs += &phi.t().dot(&batch.targets.slice(s![start..end]));
        start = end;
    }
    for i in 0..p {
        gram[[i, i]] += ridge;
    }
    linalg::symmetrize_upper(&mut gram);
    let x = linalg::solve_symmetric(&gram, &rhs, lambda)?;
    Ok(Array2::from_shape_vec((d, d + 1), x.to_vec()).expect("p = d(d+1)"))
}

fn fit_dual(batch: &SimBatch, ridge: f64, lambda: f64) -> Result<Array2<f64>> {
    let n = batch.feat_u.nrows();
    let gu = batch.feat_u.dot(&batch.feat_u.t());
    let gv = batch.feat_v.dot(&batch.feat_v.t());
    let mut gram = gu * gv;
    for i in 0..n {
        gram[[i, i]] += ridge;
    }
    let coeffs = linalg::solve_symmetric(&gram, &batch.targets, lambda)?;
    // Γ = Σ_μ a_μ·u_μ·v_μᵀ.
    let scaled_v = &batch.feat_v * &coeffs.view().insert_axis(Axis(1));
    Ok(batch.feat_u.t().dot(&scaled_v))
}

/// Empirical mean squared error of a fitted estimator over fresh test
/// contexts. ICL draws fresh tasks from C_test at length ℓ_test; IDG re-draws
/// tasks uniformly from `batch_tasks` at length ℓ_train.
pub fn empirical_test_error(
    gamma: &GammaEstimator,
    config: &SimConfig,
    mode: TestMode,
    batch_tasks: Option<&Array2<f64>>,
    stream: RngStream,
) -> Result<ErrorEstimate> {
    let sizes = config.derived()?;
    let d = config.d;
    if gamma.matrix.shape() != [d, d + 1] {
        return Err(Error::InvalidArgument("estimator shape does not match d".into()));
    }
    let ell = match mode {
        TestMode::Icl => sizes.ell_test,
        TestMode::Idg => sizes.ell_train,
    };
    let rho = config.params.rho;
    let tasks = match mode {
        TestMode::Icl => None,
        TestMode::Idg => {
            let t = batch_tasks.ok_or_else(|| {
                Error::InvalidArgument("IDG mode requires the pretraining task set".into())
            })?;
            if t.ncols() != d || t.nrows() == 0 {
                return Err(Error::InvalidArgument("task set shape mismatch".into()));
            }
            Some(t)
        }
    };
    let sqrt_spec = config.test.spectrum().mapv(f64::sqrt);
    let basis = config.test.basis();

    let sq_errs: Vec<f64> = (0..config.n_test_contexts)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.child(i as u64).rng();
            let w: Array1<f64> = match tasks {
                Some(t) => t.row(rng.random_range(0..t.nrows())).to_owned(),
                None => {
                    let z: Array1<f64> = Array1::from_shape_simple_fn(d, || {
                        rng.sample::<f64, _>(StandardNormal)
                    });
                    let scaled = z * &sqrt_spec;
                    match basis {
                        None => scaled,
                        Some(u) => u.dot(&scaled),
                    }
                }
            };
            let (u, v, y) = simulate_context(&mut rng, w.view(), d, ell, rho);
            let diff = y - gamma.predict(u.view(), v.view());
            diff * diff
        })
        .collect();

    let n_contexts = sq_errs.len();
    let mean = sq_errs.iter().sum::<f64>() / n_contexts as f64;
    let stderr = if n_contexts > 1 {
        let var = sq_errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
            / (n_contexts - 1) as f64;
        (var / n_contexts as f64).sqrt()
    } else {
        0.0
    };
    Ok(ErrorEstimate { mean, stderr, n_contexts })
}

/// Exact population risk ρ + c − 2·tr̄\[ΓAᵀ\] + tr̄\[ΓBΓᵀ\] of a fitted estimator,
/// with (A, B) the response matrices for the requested mode and `c_trace` the
/// normalized trace of the effective task covariance (tr̄\[C_test\] for ICL,
/// tr̄\[R_k\] for IDG).
pub fn population_test_error(
    gamma: &GammaEstimator,
    moments: &PopulationMoments,
    mode: TestMode,
    c_trace: f64,
    rho: f64,
) -> Result<f64> {
    let (a, b) = match mode {
        TestMode::Icl => (&moments.a_icl, &moments.b_icl),
        TestMode::Idg => {
            let a = moments.a_idg.as_ref();
            let b = moments.b_idg.as_ref();
            match (a, b) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::InvalidArgument(
                        "moments were not built for IDG mode".into(),
                    ))
                }
            }
        }
    };
    if gamma.matrix.shape() != a.shape() {
        return Err(Error::InvalidArgument("estimator/moments dimension mismatch".into()));
    }
    let d = gamma.matrix.nrows() as f64;
    let cross = (&gamma.matrix * a).sum() / d;
    let quad = (&gamma.matrix.dot(b) * &gamma.matrix).sum() / d;
    Ok(rho + c_trace - 2.0 * cross + quad)
}

/// Run the full pipeline: per replicate, sample a batch, fit Γ*, measure the
/// empirical error in the requested mode, and evaluate the exact population
/// risk of the same fit. Deterministic for a fixed config.
pub fn run_simulation(config: &SimConfig, mode: TestMode) -> Result<SimResult> {
    let sizes = config.derived()?;
    let rho = config.params.rho;
    let root = RngStream::new(config.seed);
    let mut per_replicate = Vec::with_capacity(config.replicates);
    let mut population_sum = 0.0;
    let mut single_rep_stderr = 0.0;
    for rep in 0..config.replicates {
        let rep_stream = root.child(rep as u64);
        let batch = sample_batch(config, rep_stream.child(STREAM_BATCH))?;
        let gamma = fit_gamma(&batch, config.d, sizes.n, config.params.lambda)?;
        let eval_stream = rep_stream.child(match mode {
            TestMode::Icl => STREAM_ICL,
            TestMode::Idg => STREAM_IDG,
        });
        let estimate =
            empirical_test_error(&gamma, config, mode, Some(&batch.tasks), eval_stream)?;
        per_replicate.push(estimate.mean);
        single_rep_stderr = estimate.stderr;

        let (moments, c_trace) = match mode {
            TestMode::Icl => (
                PopulationMoments::icl(&config.test, sizes.ell_test, rho)?,
                config.test.normalized_trace(),
            ),
            TestMode::Idg => {
                let m = PopulationMoments::icl(&config.test, sizes.ell_test, rho)?
                    .with_idg(&batch.tasks, sizes.ell_train, rho)?;
                let c = (0..config.d).map(|i| batch.r_k[[i, i]]).sum::<f64>()
                    / config.d as f64;
                (m, c)
            }
        };
        population_sum += population_test_error(&gamma, &moments, mode, c_trace, rho)?;
    }
    let reps = per_replicate.len();
    let mse_mean = per_replicate.iter().sum::<f64>() / reps as f64;
    let mse_stderr = if reps > 1 {
        let var = per_replicate.iter().map(|m| (m - mse_mean) * (m - mse_mean)).sum::<f64>()
            / (reps - 1) as f64;
        (var / reps as f64).sqrt()
    } else {
        single_rep_stderr
    };
    Ok(SimResult {
        mse_mean,
        mse_stderr,
        population_mse: population_sum / reps as f64,
        per_replicate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tiny_config(d: usize, tau: f64, kappa: f64) -> SimConfig {
        SimConfig {
            d,
            params: ModelParams {
                alpha_train: 1.0,
                alpha_test: 1.0,
                tau,
                kappa,
                rho: 0.1,
                lambda: 1e-4,
            },
            train: CovarianceSpec::identity(d).unwrap(),
            test: CovarianceSpec::identity(d).unwrap(),
            n_test_contexts: 64,
            replicates: 2,
            seed: 11,
        }
    }

    #[test]
    fn build_feature_hand_example() {
        let tokens = array![[1.0], [3.0]];
        let targets = array![2.0];
        let h = build_feature(&tokens, &targets, 1, 1).unwrap();
        assert_eq!(h, array![[6.0, 12.0]]);
    }

    #[test]
    fn build_feature_zero_targets_gives_zero_matrix() {
        let tokens = array![[0.3, -1.0], [0.7, 0.2], [1.0, 1.0]];
        let targets = array![0.0, 0.0];
        let h = build_feature(&tokens, &targets, 2, 2).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn build_feature_matches_naive_double_loop() {
        let mut rng = RngStream::new(5).rng();
        let d = 2;
        let ell = 3;
        let tokens: Array2<f64> =
            Array2::from_shape_simple_fn((ell + 1, d), || rng.sample(StandardNormal));
        let targets: Array1<f64> =
            Array1::from_shape_simple_fn(ell, || rng.sample(StandardNormal));
        let h = build_feature(&tokens, &targets, d, ell).unwrap();
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for t in 0..ell {
                    s += targets[t] * tokens[[t, j]];
                }
                let expect = tokens[[ell, i]] * (d as f64 / ell as f64) * s;
                assert_abs_diff_eq!(h[[i, j]], expect, epsilon = 1e-13);
            }
            let y2 = targets.iter().map(|y| y * y).sum::<f64>() / ell as f64;
            assert_abs_diff_eq!(h[[i, d]], tokens[[ell, i]] * y2, epsilon = 1e-13);
        }
    }

    fn one_row_batch() -> SimBatch {
        SimBatch {
            tasks: array![[0.0]],
            assignments: vec![0],
            feat_u: array![[1.0]],
            feat_v: array![[1.0, 0.0]],
            targets: array![1.0],
            b_k: array![0.0],
            r_k: array![[0.0]],
        }
    }

    #[test]
    fn fit_gamma_hand_example() {
        let gamma = fit_gamma(&one_row_batch(), 1, 1, 1.0).unwrap();
        assert_abs_diff_eq!(gamma.matrix[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(gamma.matrix[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_gamma_huge_ridge_shrinks_to_zero() {
        let gamma = fit_gamma(&one_row_batch(), 1, 1, 1e12).unwrap();
        assert!(gamma.matrix.iter().all(|v| v.abs() < 1e-10));
        assert!(fit_gamma(&one_row_batch(), 1, 1, 0.0).is_err());
    }

    #[test]
    fn primal_and_dual_fits_agree() {
        let config = tiny_config(3, 2.0, 1.0); // n = 18, p = 12: both feasible
        let batch = sample_batch(&config, RngStream::new(3)).unwrap();
        let ridge = (18.0 / 3.0) * 1e-3;
        let primal = fit_primal(&batch, 3, 18, ridge, 1e-3).unwrap();
        let dual = fit_dual(&batch, ridge, 1e-3).unwrap();
        for (a, b) in primal.iter().zip(dual.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
        }
    }

    #[test]
    fn sample_batch_is_deterministic_and_shaped() {
        let config = tiny_config(4, 0.5, 0.75);
        let sizes = config.derived().unwrap();
        assert_eq!((sizes.ell_train, sizes.n, sizes.k, sizes.p), (4, 8, 3, 20));
        let a = sample_batch(&config, RngStream::new(9)).unwrap();
        let b = sample_batch(&config, RngStream::new(9)).unwrap();
        assert_eq!(a.feat_u, b.feat_u);
        assert_eq!(a.feat_v, b.feat_v);
        assert_eq!(a.targets, b.targets);
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.feat_u.dim(), (8, 4));
        assert_eq!(a.feat_v.dim(), (8, 5));
    }

    #[test]
    fn single_task_batch_has_rank_one_second_moment() {
        let mut config = tiny_config(3, 0.5, 0.05);
        config.params.rho = 0.0;
        let sizes = config.derived().unwrap();
        assert_eq!(sizes.k, 1);
        let batch = sample_batch(&config, RngStream::new(2)).unwrap();
        let w = batch.tasks.row(0);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(batch.r_k[[i, j]], w[i] * w[j], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn zero_covariance_zero_noise_batch_is_silent() {
        let mut config = tiny_config(3, 0.5, 1.0);
        config.params.rho = 0.0;
        config.train = CovarianceSpec::from_diag_entries(&[0.0; 3]).unwrap();
        let batch = sample_batch(&config, RngStream::new(4)).unwrap();
        assert!(batch.targets.iter().all(|y| *y == 0.0));
        assert!(batch.feat_v.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn population_error_of_zero_estimator_is_trace_plus_noise() {
        let test = CovarianceSpec::identity(5).unwrap();
        let moments = PopulationMoments::icl(&test, 10, 0.01).unwrap();
        let gamma = GammaEstimator { matrix: Array2::zeros((5, 6)), lambda_used: 1.0 };
        let risk =
            population_test_error(&gamma, &moments, TestMode::Icl, 1.0, 0.01).unwrap();
        assert_abs_diff_eq!(risk, 1.01, epsilon = 1e-15);
    }

    #[test]
    fn idg_moments_match_hand_values_in_one_dimension() {
        // d=1, ℓ=1, single task w: E[v₁²] = 3w²+ρ, E[v₁v₂] = 3r_w·w,
        // E[v₂²] = 3r_w² with r_w = w² + ρ.
        let w = 1.3;
        let rho = 0.49;
        let tasks = array![[w]];
        let test = CovarianceSpec::identity(1).unwrap();
        let m = PopulationMoments::icl(&test, 1, rho).unwrap().with_idg(&tasks, 1, rho).unwrap();
        let r_w = w * w + rho;
        let b = m.b_idg.unwrap();
        assert_abs_diff_eq!(b[[0, 0]], 3.0 * w * w + rho, epsilon = 1e-12);
        assert_abs_diff_eq!(b[[0, 1]], 3.0 * r_w * w, epsilon = 1e-12);
        assert_abs_diff_eq!(b[[1, 1]], 3.0 * r_w * r_w, epsilon = 1e-12);
        let a = m.a_idg.unwrap();
        assert_abs_diff_eq!(a[[0, 0]], w * w, epsilon = 1e-15);
        assert_abs_diff_eq!(a[[0, 1]], r_w * w, epsilon = 1e-15);
    }

    #[test]
    fn empirical_error_of_zero_estimator_matches_population_value() {
        let mut config = tiny_config(4, 0.5, 1.0);
        config.n_test_contexts = 20_000;
        let gamma = GammaEstimator { matrix: Array2::zeros((4, 5)), lambda_used: 1.0 };
        let est = empirical_test_error(&gamma, &config, TestMode::Icl, None, RngStream::new(7))
            .unwrap();
        let expect = config.params.rho + 1.0;
        assert!(
            (est.mean - expect).abs() <= 4.0 * est.stderr,
            "mean {} expect {} stderr {}",
            est.mean,
            expect,
            est.stderr
        );
    }

    #[test]
    fn population_matches_empirical_for_random_estimator_icl() {
        let mut config = tiny_config(3, 1.0, 1.0);
        config.params.rho = 0.2;
        config.n_test_contexts = 100_000;
        let mut rng = RngStream::new(21).rng();
        let matrix: Array2<f64> = Array2::from_shape_simple_fn((3, 4), || {
            let z: f64 = rng.sample(StandardNormal);
            0.3 * z
        });
        let gamma = GammaEstimator { matrix, lambda_used: 1.0 };
        let sizes = config.derived().unwrap();
        let moments =
            PopulationMoments::icl(&config.test, sizes.ell_test, config.params.rho).unwrap();
        let pop = population_test_error(&gamma, &moments, TestMode::Icl, 1.0, 0.2).unwrap();
        let est = empirical_test_error(&gamma, &config, TestMode::Icl, None, RngStream::new(31))
            .unwrap();
        assert!(
            (est.mean - pop).abs() <= 3.0 * est.stderr,
            "empirical {} vs population {} (stderr {})",
            est.mean,
            pop,
            est.stderr
        );
    }

    #[test]
    fn population_matches_empirical_for_single_task_idg() {
        let mut config = tiny_config(3, 1.0, 1.0);
        config.params.rho = 0.05;
        config.n_test_contexts = 100_000;
        let tasks = array![[0.9, -0.4, 0.2]];
        let mut rng = RngStream::new(22).rng();
        let matrix: Array2<f64> = Array2::from_shape_simple_fn((3, 4), || {
            let z: f64 = rng.sample(StandardNormal);
            0.3 * z
        });
        let gamma = GammaEstimator { matrix, lambda_used: 1.0 };
        let sizes = config.derived().unwrap();
        let moments = PopulationMoments::icl(&config.test, sizes.ell_test, 0.05)
            .unwrap()
            .with_idg(&tasks, sizes.ell_train, 0.05)
            .unwrap();
        let c_trace = tasks.row(0).dot(&tasks.row(0)) / 3.0;
        let pop = population_test_error(&gamma, &moments, TestMode::Idg, c_trace, 0.05).unwrap();
        let est = empirical_test_error(
            &gamma,
            &config,
            TestMode::Idg,
            Some(&tasks),
            RngStream::new(33),
        )
        .unwrap();
        assert!(
            (est.mean - pop).abs() <= 3.0 * est.stderr,
            "empirical {} vs population {} (stderr {})",
            est.mean,
            pop,
            est.stderr
        );
    }

    #[test]
    fn idg_mode_requires_tasks() {
        let config = tiny_config(3, 1.0, 1.0);
        let gamma = GammaEstimator { matrix: Array2::zeros((3, 4)), lambda_used: 1.0 };
        assert!(matches!(
            empirical_test_error(&gamma, &config, TestMode::Idg, None, RngStream::new(1)),
            Err(Error::InvalidArgument(_))
        ));
        let moments = PopulationMoments::icl(&config.test, 3, 0.1).unwrap();
        assert!(matches!(
            population_test_error(&gamma, &moments, TestMode::Idg, 1.0, 0.1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn run_simulation_is_bit_deterministic() {
        let config = tiny_config(6, 0.5, 0.5);
        let a = run_simulation(&config, TestMode::Icl).unwrap();
        let b = run_simulation(&config, TestMode::Icl).unwrap();
        assert_eq!(a.per_replicate, b.per_replicate);
        assert_eq!(a.mse_mean.to_bits(), b.mse_mean.to_bits());
        assert_eq!(a.population_mse.to_bits(), b.population_mse.to_bits());
        assert_eq!(a.per_replicate.len(), config.replicates);
    }

    #[test]
    fn response_matrices_are_symmetric_psd() {
        use ndarray_linalg::{EighInto, UPLO};
        let test = CovarianceSpec::make_powerlaw(6, 0.8, 1.0).unwrap();
        let mut config = tiny_config(6, 0.5, 0.5);
        config.test = test.clone();
        let batch = sample_batch(&config, RngStream::new(17)).unwrap();
        let moments =
            PopulationMoments::icl(&test, 6, 0.1).unwrap().with_idg(&batch.tasks, 6, 0.1).unwrap();
        for b in [&moments.b_icl, moments.b_idg.as_ref().unwrap()] {
            for i in 0..b.nrows() {
                for j in 0..i {
                    assert_abs_diff_eq!(b[[i, j]], b[[j, i]], epsilon = 1e-10);
                }
            }
            let (vals, _) = b.clone().eigh_into(UPLO::Upper).unwrap();
            assert!(vals.iter().all(|v| *v >= -1e-10), "eigenvalues {vals:?}");
        }
    }
}
