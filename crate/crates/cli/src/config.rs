//! JSON experiment configuration: schema, covariance builders, defaults, and
//! the pre-flight validator behind the `validate` subcommand.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use icl_align_core::covariance::CovarianceSpec;
use icl_align_core::rng::RngStream;
use icl_align_core::theory::ModelParams;

/// Seed used when neither the config nor the command line provides one.
pub const DEFAULT_SEED: u64 = 7;

/// One experiment configuration file. Every field is optional; experiments
/// fill in their documented defaults (command-line flags override both).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Experiment tag; the subcommand wins when both are given.
    pub experiment: Option<String>,
    /// Model ratio parameters.
    pub params: Option<ModelParams>,
    /// Token dimension.
    pub d: Option<usize>,
    /// Pretraining task covariance.
    pub train: Option<CovarianceConfig>,
    /// Test task covariance.
    pub test: Option<CovarianceConfig>,
    /// Multiple test covariances (align/figure2 sweeps).
    pub tests: Option<Vec<CovarianceConfig>>,
    /// Fresh test contexts per error estimate.
    pub n_test_contexts: Option<usize>,
    /// Independent pretraining batches.
    pub replicates: Option<usize>,
    /// Root random seed.
    pub seed: Option<u64>,
    /// Test mode for `simulate`: "icl" or "idg".
    pub mode: Option<String>,
    /// Parameter sweep for the `sweep` experiment.
    pub sweep_axis: Option<SweepAxis>,
    /// Output table path; stdout when absent.
    pub output_path: Option<PathBuf>,
    /// Output format.
    pub format: Option<OutputFormat>,
    /// Task-diversity grid (figure1, heatmap5, phase6).
    pub kappas: Option<Vec<f64>>,
    /// Train powerlaw exponent grid (heatmap5).
    pub p_train_grid: Option<Vec<f64>>,
    /// Test powerlaw exponent (heatmap5).
    pub p_test: Option<f64>,
    /// Test context-length grid (contextlen7).
    pub alpha_test_grid: Option<Vec<f64>>,
    /// α = τ value used by the finite solver in phase6.
    pub phase_alpha: Option<f64>,
    /// α/τ ratio used by the limit formula in phase6.
    pub gamma_ratio: Option<f64>,
    /// Report double-centered CKA instead of the plain variant.
    pub centered_cka: Option<bool>,
}

/// Table output formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// One swept parameter: a model-parameter name and its values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<f64>,
}

/// Model-parameter names accepted by `sweep_axis.name`.
pub const SWEEPABLE: [&str; 6] =
    ["alpha_train", "alpha_test", "tau", "kappa", "rho", "lambda"];

impl SweepAxis {
    /// The base parameters with this axis set to `value`.
    pub fn apply(&self, base: &ModelParams, value: f64) -> ModelParams {
        let mut p = *base;
        match self.name.as_str() {
            "alpha_train" => p.alpha_train = value,
            "alpha_test" => p.alpha_test = value,
            "tau" => p.tau = value,
            "kappa" => p.kappa = value,
            "rho" => p.rho = value,
            "lambda" => p.lambda = value,
            _ => unreachable!("validated before running"),
        }
        p
    }
}

/// Declarative covariance description, built at a given dimension.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    #[serde(flatten)]
    pub shape: CovarianceShape,
    /// Reverse the eigenbasis (weakest train direction first).
    #[serde(default)]
    pub reversed: bool,
    /// Rotate by a Haar-random basis drawn from this seed.
    #[serde(default)]
    pub rotate_seed: Option<u64>,
    /// Row label override; defaults to the built kind string.
    #[serde(default)]
    pub label: Option<String>,
}

/// Supported spectra.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceShape {
    Powerlaw {
        p: f64,
        #[serde(default = "default_trace")]
        trace: f64,
    },
    UniformLinear,
    Spike { index: usize },
    Lowrank { rank: usize },
    Identity,
    Diag { entries: Vec<f64> },
}

fn default_trace() -> f64 {
    1.0
}

impl CovarianceConfig {
    pub fn powerlaw(p: f64) -> Self {
        Self {
            shape: CovarianceShape::Powerlaw { p, trace: 1.0 },
            reversed: false,
            rotate_seed: None,
            label: None,
        }
    }

    pub fn of(shape: CovarianceShape) -> Self {
        Self { shape, reversed: false, rotate_seed: None, label: None }
    }

    /// Build the concrete covariance at dimension `d`.
    pub fn build(&self, d: usize) -> icl_align_core::Result<CovarianceSpec> {
        let mut cov = match &self.shape {
            CovarianceShape::Powerlaw { p, trace } => {
                CovarianceSpec::make_powerlaw(d, *p, *trace)?
            }
            CovarianceShape::UniformLinear => CovarianceSpec::make_uniform_linear(d)?,
            CovarianceShape::Spike { index } => CovarianceSpec::make_spike(d, *index)?,
            CovarianceShape::Lowrank { rank } => CovarianceSpec::make_lowrank(d, *rank)?,
            CovarianceShape::Identity => CovarianceSpec::identity(d)?,
            CovarianceShape::Diag { entries } => {
                CovarianceSpec::from_diag_entries(entries)?
            }
        };
        if self.reversed {
            cov = cov.reversed();
        }
        if let Some(seed) = self.rotate_seed {
            cov = cov.rotated(&mut RngStream::new(seed).rng())?;
        }
        Ok(cov)
    }

    /// Row label: the override if given, else the built kind string.
    pub fn label(&self, d: usize) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match self.build(d) {
            Ok(cov) => cov.kind().to_string(),
            Err(_) => "<invalid>".to_string(),
        }
    }
}

/// The known experiment tags.
pub const EXPERIMENTS: [&str; 9] = [
    "theory",
    "simulate",
    "sweep",
    "align",
    "figure1",
    "figure2",
    "heatmap5",
    "phase6",
    "contextlen7",
];

/// Check one parsed config against `experiment`, returning all findings
/// without computing anything.
pub fn validate(config: &FileConfig, experiment: &str) -> Vec<String> {
    let mut findings = Vec::new();
    if !EXPERIMENTS.contains(&experiment) {
        findings.push(format!("unknown experiment '{experiment}'"));
        return findings;
    }

    if let Some(p) = &config.params {
        if let Err(e) = p.validate() {
            if p.lambda == 0.0 && p.tau == 1.0 {
                findings.push("ridgeless threshold unsupported: tau = 1 with lambda = 0".into());
            } else {
                findings.push(format!("params: {e}"));
            }
        }
    }

    let d = config.d.unwrap_or(default_d(experiment));
    if d == 0 {
        findings.push("d must be >= 1".into());
    }
    for (name, cov) in [("train", &config.train), ("test", &config.test)] {
        if let Some(c) = cov {
            if let Err(e) = c.build(d.max(1)) {
                findings.push(format!("{name} covariance: {e}"));
            }
        }
    }
    if let Some(tests) = &config.tests {
        for (i, c) in tests.iter().enumerate() {
            if let Err(e) = c.build(d.max(1)) {
                findings.push(format!("tests[{i}] covariance: {e}"));
            }
        }
    }

    if let Some(axis) = &config.sweep_axis {
        if !SWEEPABLE.contains(&axis.name.as_str()) {
            findings.push(format!(
                "sweep_axis.name '{}' is not a model parameter (expected one of {})",
                axis.name,
                SWEEPABLE.join(", ")
            ));
        }
        if axis.values.is_empty() {
            findings.push("sweep_axis.values must be non-empty".into());
        }
        if axis.values.iter().any(|v| !v.is_finite()) {
            findings.push("sweep_axis.values must all be finite".into());
        }
    } else if experiment == "sweep" {
        findings.push("sweep requires sweep_axis".into());
    }

    if experiment == "simulate" {
        if let Some(m) = &config.mode {
            if m != "icl" && m != "idg" {
                findings.push(format!("mode '{m}' must be 'icl' or 'idg'"));
            }
        }
        if let Some(p) = &config.params {
            if p.kappa.is_infinite() {
                findings.push("simulate requires finite kappa".into());
            }
            if p.lambda <= 0.0 {
                findings.push(
                    "simulate requires lambda > 0 (use a tiny ridge for the ridgeless protocol)"
                        .into(),
                );
            }
        }
    }

    for (name, grid) in [
        ("kappas", &config.kappas),
        ("p_train_grid", &config.p_train_grid),
        ("alpha_test_grid", &config.alpha_test_grid),
    ] {
        if let Some(values) = grid {
            if values.is_empty() {
                findings.push(format!("{name} must be non-empty"));
            }
            if values.iter().any(|v| !v.is_finite()) {
                findings.push(format!("{name} must contain only finite values"));
            }
        }
    }
    if let Some(g) = config.alpha_test_grid.as_ref() {
        if g.windows(2).any(|w| w[0] > w[1]) {
            findings.push("alpha_test_grid must be sorted ascending".into());
        }
    }

    findings
}

/// Desk-scale default dimension per experiment.
pub fn default_d(experiment: &str) -> usize {
    match experiment {
        "phase6" => 80,
        "contextlen7" => 150,
        _ => 60,
    }
}
