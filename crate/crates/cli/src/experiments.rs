//! Experiment runners: each resolves its defaults, computes one table, and
//! reports a manifest of every resolved parameter.

use anyhow::{anyhow, Result};
use serde_json::json;

use icl_align_core::alignment::{alignment_report, cka_centered};
use icl_align_core::covariance::CovarianceSpec;
use icl_align_core::rng::RngStream;
use icl_align_core::simulator::{
    empirical_test_error, fit_gamma, run_simulation, sample_batch, SimConfig, TestMode,
};
use icl_align_core::theory::{
    context_length_curve, icl_error_limit, solve_self_consistent, theory_errors,
    theory_errors_from, ModelParams,
};
use icl_align_core::Error as CoreError;

use crate::config::{
    default_d, CovarianceConfig, CovarianceShape, FileConfig, DEFAULT_SEED,
};
use crate::table::{Cell, Table};

/// A finished run: the table, its manifest, and how many rows failed.
pub struct RunOutcome {
    pub table: Table,
    pub manifest: serde_json::Value,
    pub failed_rows: usize,
}

fn default_params(experiment: &str) -> ModelParams {
    match experiment {
        "heatmap5" => ModelParams {
            alpha_train: 1.0,
            alpha_test: 1.0,
            tau: 4.0,
            kappa: 1.0,
            rho: 0.01,
            lambda: 0.0,
        },
        "simulate" | "figure1" => ModelParams {
            alpha_train: 2.0,
            alpha_test: 2.0,
            tau: 4.0,
            kappa: 1.0,
            rho: 0.01,
            lambda: 1e-5,
        },
        _ => ModelParams {
            alpha_train: 2.0,
            alpha_test: 2.0,
            tau: 4.0,
            kappa: 1.0,
            rho: 0.01,
            lambda: 0.0,
        },
    }
}

fn default_train(experiment: &str) -> CovarianceConfig {
    match experiment {
        "figure1" => CovarianceConfig::of(CovarianceShape::UniformLinear),
        "phase6" => CovarianceConfig::of(CovarianceShape::Identity),
        _ => CovarianceConfig::powerlaw(0.9),
    }
}

/// Shared resolved scaffolding for every experiment.
struct Resolved {
    experiment: String,
    d: usize,
    params: ModelParams,
    seed: u64,
    train_cfg: CovarianceConfig,
    train: CovarianceSpec,
    train_label: String,
}

fn resolve(experiment: &str, cfg: &FileConfig) -> Result<Resolved> {
    let d = cfg.d.unwrap_or_else(|| default_d(experiment));
    let params = cfg.params.unwrap_or_else(|| default_params(experiment));
    let train_cfg = cfg.train.clone().unwrap_or_else(|| default_train(experiment));
    let train = train_cfg.build(d)?;
    Ok(Resolved {
        experiment: experiment.to_string(),
        d,
        params,
        seed: cfg.seed.unwrap_or(DEFAULT_SEED),
        train_label: train_cfg.label(d),
        train_cfg,
        train,
    })
}

fn test_list(cfg: &FileConfig, fallback: &CovarianceConfig) -> Vec<CovarianceConfig> {
    if let Some(tests) = &cfg.tests {
        tests.clone()
    } else if let Some(test) = &cfg.test {
        vec![test.clone()]
    } else {
        vec![fallback.clone()]
    }
}

fn base_manifest(r: &Resolved, cfg: &FileConfig) -> serde_json::Value {
    json!({
        "experiment": r.experiment,
        "d": r.d,
        "params": r.params,
        "seed": r.seed,
        "train": r.train_cfg,
        "train_label": r.train_label,
        "centered_cka": cfg.centered_cka.unwrap_or(false),
    })
}

fn merge(mut manifest: serde_json::Value, extra: serde_json::Value) -> serde_json::Value {
    if let (Some(m), serde_json::Value::Object(e)) = (manifest.as_object_mut(), extra) {
        for (k, v) in e {
            m.insert(k, v);
        }
    }
    manifest
}

/// Dispatch an experiment by tag. `validate` is handled by the caller.
pub fn run_experiment(experiment: &str, cfg: &FileConfig) -> Result<RunOutcome> {
    match experiment {
        "theory" => run_theory(cfg),
        "sweep" => run_sweep(cfg),
        "simulate" => run_simulate(cfg),
        "align" | "figure2" => run_align(experiment, cfg),
        "figure1" => run_figure1(cfg),
        "heatmap5" => run_heatmap5(cfg),
        "phase6" => run_phase6(cfg),
        "contextlen7" => run_contextlen7(cfg),
        other => Err(anyhow!("unknown experiment '{other}'")),
    }
}

const THEORY_COLUMNS: [&str; 19] = [
    "d",
    "alpha_train",
    "alpha_test",
    "tau",
    "kappa",
    "rho",
    "lambda",
    "train_label",
    "test_label",
    "e_icl",
    "e_idg",
    "e_scalar",
    "e_misalign",
    "sigma",
    "lambda_tilde",
    "m",
    "m_prime",
    "q",
    "status",
];

fn theory_row(
    r: &Resolved,
    params: &ModelParams,
    test: &CovarianceConfig,
    table: &mut Table,
) -> usize {
    let mut row = vec![
        Cell::Int(r.d as u64),
        Cell::Num(params.alpha_train),
        Cell::Num(params.alpha_test),
        Cell::Num(params.tau),
        Cell::Num(params.kappa),
        Cell::Num(params.rho),
        Cell::Num(params.lambda),
        Cell::Str(r.train_label.clone()),
        Cell::Str(test.label(r.d)),
    ];
    let outcome = test.build(r.d).and_then(|t| {
        let sol = solve_self_consistent(params, &r.train)?;
        let errs = theory_errors_from(&sol, params, &r.train, &t)?;
        Ok((sol, errs))
    });
    match outcome {
        Ok((sol, errs)) => {
            row.extend([
                Cell::Num(errs.e_icl),
                Cell::Num(errs.e_idg),
                Cell::Num(errs.e_scalar),
                Cell::Num(errs.e_misalign),
                Cell::Num(sol.sigma),
                Cell::Num(sol.lambda_tilde),
                Cell::Num(sol.m),
                Cell::Num(sol.m_prime),
                Cell::Num(sol.q),
                Cell::Str("ok".into()),
            ]);
            table.push(row);
            0
        }
        Err(e) => {
            row.extend(std::iter::repeat_with(|| Cell::Blank).take(9));
            row.push(Cell::Str(format!("error: {e}")));
            table.push(row);
            1
        }
    }
}

fn run_theory(cfg: &FileConfig) -> Result<RunOutcome> {
    let r = resolve("theory", cfg)?;
    let tests = test_list(cfg, &r.train_cfg);
    let mut table = Table::new(THEORY_COLUMNS.to_vec());
    let mut failed = 0;
    for test in &tests {
        failed += theory_row(&r, &r.params, test, &mut table);
    }
    let manifest = merge(
        base_manifest(&r, cfg),
        json!({ "tests": tests.iter().map(|t| t.label(r.d)).collect::<Vec<_>>() }),
    );
    Ok(RunOutcome { table, manifest, failed_rows: failed })
}

fn run_sweep(cfg: &FileConfig) -> Result<RunOutcome> {
    let r = resolve("sweep", cfg)?;
    let axis = cfg
        .sweep_axis
        .as_ref()
        .ok_or_else(|| anyhow!("sweep requires sweep_axis"))?;
    let tests = test_list(cfg, &r.train_cfg);
    let mut table = Table::new(THEORY_COLUMNS.to_vec());
    let mut failed = 0;
    for &value in &axis.values {
        let params = axis.apply(&r.params, value);
        for test in &tests {
            failed += theory_row(&r, &params, test, &mut table);
        }
    }
    let manifest = merge(
        base_manifest(&r, cfg),
        json!({
            "sweep_axis": { "name": axis.name, "values": axis.values },
            "tests": tests.iter().map(|t| t.label(r.d)).collect::<Vec<_>>(),
        }),
    );
    Ok(RunOutcome { table, manifest, failed_rows: failed })
}

fn run_simulate(cfg: &FileConfig) -> Result<RunOutcome> {
    let r = resolve("simulate", cfg)?;
    let test_cfg = cfg.test.clone().unwrap_or_else(|| r.train_cfg.clone());
    let test = test_cfg.build(r.d)?;
    let mode = match cfg.mode.as_deref().unwrap_or("icl") {
        "idg" => TestMode::Idg,
        _ => TestMode::Icl,
    };
    let sim = SimConfig {
        d: r.d,
        params: r.params,
        train: r.train.clone(),
        test,
        n_test_contexts: cfg.n_test_contexts.unwrap_or(2000),
        replicates: cfg.replicates.unwrap_or(20),
        seed: r.seed,
    };
    let result = run_simulation(&sim, mode)?;
    let mut table = Table::new(vec![
        "d",
        "alpha",
        "alpha_test",
        "tau",
        "kappa",
        "rho",
        "lambda",
        "train_label",
        "test_label",
        "mode",
        "mse_mean",
        "mse_stderr",
        "population_mse",
        "replicates",
        "seed",
        "n_test_contexts",
    ]);
    table.push(vec![
        Cell::Int(r.d as u64),
        Cell::Num(r.params.alpha_train),
        Cell::Num(r.params.alpha_test),
        Cell::Num(r.params.tau),
        Cell::Num(r.params.kappa),
        Cell::Num(r.params.rho),
        Cell::Num(r.params.lambda),
        Cell::Str(r.train_label.clone()),
        Cell::Str(test_cfg.label(r.d)),
        Cell::Str(mode.to_string()),
        Cell::Num(result.mse_mean),
        Cell::Num(result.mse_stderr),
        Cell::Num(result.population_mse),
        Cell::Int(sim.replicates as u64),
        Cell::Int(sim.seed),
        Cell::Int(sim.n_test_contexts as u64),
    ]);
    let manifest = merge(
        base_manifest(&r, cfg),
        json!({
            "test": test_cfg,
            "mode": mode.to_string(),
            "replicates": sim.replicates,
            "n_test_contexts": sim.n_test_contexts,
            "per_replicate_mse": result.per_replicate,
        }),
    );
    Ok(RunOutcome { table, manifest, failed_rows: 0 })
}

fn run_align(experiment: &str, cfg: &FileConfig) -> Result<RunOutcome> {
    let r = resolve(experiment, cfg)?;
    let tests = if experiment == "figure2" {
        cfg.tests.clone().unwrap_or_else(|| default_figure2_tests(r.d, r.seed))
    } else {
        test_list(cfg, &r.train_cfg)
    };
    let centered = cfg.centered_cka.unwrap_or(false);
    let mut table = Table::new(vec![
        "kappa",
        "tau",
        "alpha",
        "rho",
        "test_label",
        "e_icl",
        "e_misalign",
        "trace_test_F",
        "trace_test_inv_train",
        "inv_cka",
        "ruhe_lower",
        "ruhe_upper",
        "d",
        "alpha_test",
        "lambda",
        "train_label",
        "inv_train_defined",
        "cka",
        "status",
    ]);
    let mut failed = 0;
    for test_cfg in &tests {
        let mut row = vec![
            Cell::Num(r.params.kappa),
            Cell::Num(r.params.tau),
            Cell::Num(r.params.alpha_train),
            Cell::Num(r.params.rho),
            Cell::Str(test_cfg.label(r.d)),
        ];
        let outcome = test_cfg.build(r.d).and_then(|test| {
            let mut report = alignment_report(&r.params, &r.train, &test)?;
            if centered {
                report.cka = cka_centered(&test.dense(), &r.train.dense())?;
            }
            Ok(report)
        });
        match outcome {
            Ok(report) => {
                row.extend([
                    Cell::Num(report.e_icl),
                    Cell::Num(report.e_misalign),
                    Cell::Num(report.trace_test_f),
                    Cell::Num(report.trace_test_inv_train),
                    Cell::Num(1.0 / report.cka),
                    Cell::Num(report.ruhe_lower),
                    Cell::Num(report.ruhe_upper),
                    Cell::Int(r.d as u64),
                    Cell::Num(r.params.alpha_test),
                    Cell::Num(r.params.lambda),
                    Cell::Str(r.train_label.clone()),
                    Cell::Str(report.inv_train_defined.to_string()),
                    Cell::Num(report.cka),
                    Cell::Str("ok".into()),
                ]);
            }
            Err(e) => {
                row.extend(std::iter::repeat_with(|| Cell::Blank).take(7));
                row.extend([
                    Cell::Int(r.d as u64),
                    Cell::Num(r.params.alpha_test),
                    Cell::Num(r.params.lambda),
                    Cell::Str(r.train_label.clone()),
                    Cell::Blank,
                    Cell::Blank,
                    Cell::Str(format!("error: {e}")),
                ]);
                failed += 1;
            }
        }
        table.push(row);
    }
    let manifest = merge(
        base_manifest(&r, cfg),
        json!({ "tests": tests.iter().map(|t| t.label(r.d)).collect::<Vec<_>>() }),
    );
    Ok(RunOutcome { table, manifest, failed_rows: failed })
}

/// Figure-2 style default test sweep: powerlaw powers, low ranks, and
/// orientation variants of the train spectrum.
fn default_figure2_tests(d: usize, seed: u64) -> Vec<CovarianceConfig> {
    let mut tests = vec![
        CovarianceConfig::of(CovarianceShape::Identity),
        CovarianceConfig::powerlaw(0.3),
        CovarianceConfig::powerlaw(0.6),
        CovarianceConfig::powerlaw(0.9),
        CovarianceConfig::powerlaw(1.2),
        CovarianceConfig::powerlaw(1.5),
        CovarianceConfig::of(CovarianceShape::Lowrank { rank: (d / 4).max(1) }),
        CovarianceConfig::of(CovarianceShape::Lowrank { rank: (d / 2).max(1) }),
        CovarianceConfig::of(CovarianceShape::Spike { index: 1 }),
        CovarianceConfig::of(CovarianceShape::Spike { index: d }),
    ];
    let mut reversed = CovarianceConfig::powerlaw(0.9);
    reversed.reversed = true;
    tests.push(reversed);
    let mut rotated = CovarianceConfig::powerlaw(0.9);
    rotated.rotate_seed = Some(seed ^ 0x5eed);
    tests.push(rotated);
    tests
}

fn run_figure1(cfg: &FileConfig) -> Result<RunOutcome> {
    let r = resolve("figure1", cfg)?;
    let params = r.params;
    let kappas = cfg.kappas.clone().unwrap_or_else(|| vec![0.25, 0.5, 1.0, 2.0, 4.0]);
    let tests = cfg.tests.clone().unwrap_or_else(|| {
        vec![
            r.train_cfg.clone(),
            CovarianceConfig::of(CovarianceShape::Spike { index: 1 }),
            CovarianceConfig::of(CovarianceShape::Spike { index: r.d }),
        ]
    });
    let replicates = cfg.replicates.unwrap_or(20);
    let n_test_contexts = cfg.n_test_contexts.unwrap_or(2000);

    let mut table = Table::new(vec![
        "kappa",
        "test_label",
        "e_icl_theory",
        "e_misalign_theory",
        "mse_sim",
        "mse_stderr",
        "e_misalign_sim",
        "d",
        "alpha_train",
        "alpha_test",
        "tau",
        "rho",
        "lambda",
        "train_label",
        "replicates",
        "n_test_contexts",
        "seed",
        "status",
    ]);
    let mut failed = 0;
    let root = RngStream::new(r.seed);
    for (ki, &kappa) in kappas.iter().enumerate() {
        let params = ModelParams { kappa, ..params };
        let sim = SimConfig {
            d: r.d,
            params,
            train: r.train.clone(),
            test: r.train.clone(),
            n_test_contexts,
            replicates: 1,
            seed: r.seed,
        };
        // One fit per replicate, shared by every test covariance.
        let cell_result = (|| -> icl_align_core::Result<Vec<Vec<f64>>> {
            let sizes = sim.derived()?;
            let mut mses = vec![Vec::with_capacity(replicates); tests.len()];
            for rep in 0..replicates {
                let rs = root.child(ki as u64).child(rep as u64);
                let batch = sample_batch(&sim, rs.child(0))?;
                let gamma = fit_gamma(&batch, r.d, sizes.n, params.lambda)?;
                for (t, test_cfg) in tests.iter().enumerate() {
                    let mut sim_t = sim.clone();
                    sim_t.test = test_cfg.build(r.d)?;
                    let est = empirical_test_error(
                        &gamma,
                        &sim_t,
                        TestMode::Icl,
                        None,
                        rs.child(1).child(t as u64),
                    )?;
                    mses[t].push(est.mean);
                }
            }
            Ok(mses)
        })();
        for (t, test_cfg) in tests.iter().enumerate() {
            let mut row = vec![Cell::Num(kappa), Cell::Str(test_cfg.label(r.d))];
            let outcome = cell_result.as_ref().ok().and_then(|mses| {
                let test = test_cfg.build(r.d).ok()?;
                let th = theory_errors(&params, &r.train, &test).ok()?;
                Some((mses[t].clone(), th))
            });
            match outcome {
                Some((mses, th)) => {
                    let mean = mses.iter().sum::<f64>() / mses.len() as f64;
                    let stderr = if mses.len() > 1 {
                        let var = mses.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
                            / (mses.len() - 1) as f64;
                        (var / mses.len() as f64).sqrt()
                    } else {
                        0.0
                    };
                    row.extend([
                        Cell::Num(th.e_icl),
                        Cell::Num(th.e_misalign),
                        Cell::Num(mean),
                        Cell::Num(stderr),
                        Cell::Num(mean - th.e_scalar),
                    ]);
                }
                None => {
                    row.extend(std::iter::repeat_with(|| Cell::Blank).take(5));
                    failed += 1;
                }
            }
            row.extend([
                Cell::Int(r.d as u64),
                Cell::Num(params.alpha_train),
                Cell::Num(params.alpha_test),
                Cell::Num(params.tau),
                Cell::Num(params.rho),
                Cell::Num(params.lambda),
                Cell::Str(r.train_label.clone()),
                Cell::Int(replicates as u64),
                Cell::Int(n_test_contexts as u64),
                Cell::Int(r.seed),
                match &cell_result {
                    Ok(_) => Cell::Str("ok".into()),
                    Err(e) => Cell::Str(format!("error: {e}")),
                },
            ]);
            table.push(row);
        }
    }
    let manifest = merge(
        base_manifest(&r, cfg),
        json!({
            "kappas": kappas,
            "tests": tests.iter().map(|t| t.label(r.d)).collect::<Vec<_>>(),
            "replicates": replicates,
            "n_test_contexts": n_test_contexts,
        }),
    );
    Ok(RunOutcome { table, manifest, failed_rows: failed })
}

fn run_heatmap5(cfg: &FileConfig) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    let p_test = cfg.p_test.unwrap_or(0.9);
    if cfg.test.is_none() {
        cfg.test = Some(CovarianceConfig::powerlaw(p_test));
    }
    let r = resolve("heatmap5", &cfg)?;
    let test_cfg = cfg.test.clone().expect("set above");
    let test = test_cfg.build(r.d)?;
    let kappas = cfg.kappas.clone().unwrap_or_else(|| vec![0.25, 0.5, 1.0, 2.0, 4.0]);
    let p_train_grid = cfg
        .p_train_grid
        .clone()
        .unwrap_or_else(|| vec![0.0, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8]);
    let mut table = Table::new(vec![
        "kappa",
        "p_train_minus_p_test",
        "percent_improvement",
        "p_train",
        "p_test",
        "e_icl",
        "e_icl_baseline",
        "d",
        "alpha_train",
        "alpha_test",
        "tau",
        "rho",
        "lambda",
        "test_label",
        "status",
    ]);
    let mut failed = 0;
    for &p_train in &p_train_grid {
        for &kappa in &kappas {
            let params = ModelParams { kappa, ..r.params };
            let mut row = vec![Cell::Num(kappa), Cell::Num(p_train - p_test)];
            let outcome = (|| -> icl_align_core::Result<(f64, f64)> {
                let train = CovarianceSpec::make_powerlaw(r.d, p_train, 1.0)?;
                let e = theory_errors(&params, &train, &test)?.e_icl;
                let e_base = theory_errors(&params, &test, &test)?.e_icl;
                Ok((e, e_base))
            })();
            let status = match &outcome {
                Ok((e, e_base)) => {
                    row.extend([
                        Cell::Num(100.0 * (e_base - e) / e_base),
                        Cell::Num(p_train),
                        Cell::Num(p_test),
                        Cell::Num(*e),
                        Cell::Num(*e_base),
                    ]);
                    "ok".to_string()
                }
                Err(e) => {
                    row.extend(std::iter::repeat_with(|| Cell::Blank).take(5));
                    failed += 1;
                    format!("error: {e}")
                }
            };
            row.extend([
                Cell::Int(r.d as u64),
                Cell::Num(params.alpha_train),
                Cell::Num(params.alpha_test),
                Cell::Num(params.tau),
                Cell::Num(params.rho),
                Cell::Num(params.lambda),
                Cell::Str(test_cfg.label(r.d)),
                Cell::Str(status),
            ]);
            table.push(row);
        }
    }
    let manifest = merge(
        base_manifest(&r, &cfg),
        json!({
            "kappas": kappas,
            "p_train_grid": p_train_grid,
            "p_test": p_test,
            "test": test_cfg,
        }),
    );
    Ok(RunOutcome { table, manifest, failed_rows: failed })
}

fn run_phase6(cfg: &FileConfig) -> Result<RunOutcome> {
    let r = resolve("phase6", cfg)?;
    let phase_alpha = cfg.phase_alpha.unwrap_or(80.0);
    let gamma_ratio = cfg.gamma_ratio.unwrap_or(1.0);
    let kappas = cfg.kappas.clone().unwrap_or_else(|| {
        (1..=40).map(|i| 0.05 * i as f64).collect()
    });
    let tests = test_list(cfg, &r.train_cfg);
    let mut table = Table::new(vec![
        "kappa",
        "test_label",
        "e_icl_full",
        "e_icl_limit",
        "d",
        "alpha",
        "tau",
        "gamma_ratio",
        "rho",
        "train_label",
        "status",
    ]);
    let mut failed = 0;
    for &kappa in &kappas {
        for test_cfg in &tests {
            let params = ModelParams {
                alpha_train: phase_alpha,
                alpha_test: phase_alpha,
                tau: phase_alpha / gamma_ratio,
                kappa,
                rho: r.params.rho,
                lambda: 0.0,
            };
            let mut row = vec![Cell::Num(kappa), Cell::Str(test_cfg.label(r.d))];
            let mut status = "ok".to_string();
            let outcome = (|| -> icl_align_core::Result<(f64, f64)> {
                let test = test_cfg.build(r.d)?;
                let full = theory_errors(&params, &r.train, &test)?.e_icl;
                let limit =
                    match icl_error_limit(gamma_ratio, kappa, &r.train, &test, params.rho) {
                        Ok(v) => v,
                        Err(CoreError::RankBoundary { below, .. }) => {
                            status = "rank-boundary".into();
                            below
                        }
                        Err(e) => return Err(e),
                    };
                Ok((full, limit))
            })();
            match outcome {
                Ok((full, limit)) => {
                    row.extend([Cell::Num(full), Cell::Num(limit)]);
                }
                Err(e) => {
                    row.extend([Cell::Blank, Cell::Blank]);
                    status = format!("error: {e}");
                    failed += 1;
                }
            }
            row.extend([
                Cell::Int(r.d as u64),
                Cell::Num(phase_alpha),
                Cell::Num(phase_alpha / gamma_ratio),
                Cell::Num(gamma_ratio),
                Cell::Num(r.params.rho),
                Cell::Str(r.train_label.clone()),
                Cell::Str(status),
            ]);
            table.push(row);
        }
    }
    let manifest = merge(
        base_manifest(&r, cfg),
        json!({
            "kappas": kappas,
            "phase_alpha": phase_alpha,
            "gamma_ratio": gamma_ratio,
            "tests": tests.iter().map(|t| t.label(r.d)).collect::<Vec<_>>(),
        }),
    );
    Ok(RunOutcome { table, manifest, failed_rows: failed })
}

fn run_contextlen7(cfg: &FileConfig) -> Result<RunOutcome> {
    let r = resolve("contextlen7", cfg)?;
    let params = r.params;
    let grid = cfg.alpha_test_grid.clone().unwrap_or_else(|| {
        (0..13).map(|i| 0.25 * 2f64.powf(i as f64 / 2.0)).collect()
    });
    let test_cfg = cfg.test.clone().unwrap_or_else(|| r.train_cfg.clone());
    let test = test_cfg.build(r.d)?;
    let curve = context_length_curve(&params, &r.train, &test, &grid)?;
    let mut table = Table::new(vec![
        "alpha_test",
        "e_icl",
        "d",
        "alpha_train",
        "tau",
        "kappa",
        "rho",
        "lambda",
        "train_label",
        "test_label",
    ]);
    for (alpha_test, e_icl) in &curve {
        table.push(vec![
            Cell::Num(*alpha_test),
            Cell::Num(*e_icl),
            Cell::Int(r.d as u64),
            Cell::Num(params.alpha_train),
            Cell::Num(params.tau),
            Cell::Num(params.kappa),
            Cell::Num(params.rho),
            Cell::Num(params.lambda),
            Cell::Str(r.train_label.clone()),
            Cell::Str(test_cfg.label(r.d)),
        ]);
    }
    let manifest = merge(
        base_manifest(&r, cfg),
        json!({
            "params": params,
            "alpha_test_grid": grid,
            "test": test_cfg,
        }),
    );
    Ok(RunOutcome { table, manifest, failed_rows: 0 })
}
