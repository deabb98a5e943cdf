//! Command-line front end: one subcommand per experiment, plus `validate`.
//!
//! Resolution order for every setting is flag > config file > built-in
//! default. Tables go to stdout or `--out`; a run manifest recording every
//! resolved parameter lands next to each written table.

mod config;
mod experiments;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{validate, FileConfig, OutputFormat};
use crate::experiments::run_experiment;
use crate::table::write_outputs;

#[derive(Parser)]
#[command(
    name = "icl-align",
    about = "Exact asymptotics and finite-size simulation of in-context \
             linear regression by linear attention",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form errors for one parameter point and test covariances.
    Theory(RunArgs),
    /// Finite-size pretraining + test-error Monte Carlo.
    Simulate(RunArgs),
    /// Closed-form errors along one swept model parameter.
    Sweep(RunArgs),
    /// Alignment metrics (trace statistics, CKA, eigenvalue bounds).
    Align(RunArgs),
    /// Theory-vs-simulation error curves over a task-diversity grid.
    Figure1(RunArgs),
    /// Alignment metrics across a default battery of test covariances.
    Figure2(RunArgs),
    /// Percent improvement of powerlaw train spectra over the matched
    /// baseline, on a (exponent, task-diversity) grid.
    Heatmap5(RunArgs),
    /// Finite-size solver against the joint-limit error across the
    /// rank phase transition.
    Phase6(RunArgs),
    /// Error as a function of test context length.
    Contextlen7(RunArgs),
    /// Check a config file and report findings without running anything.
    Validate {
        /// Config file to check.
        #[arg(long)]
        config: PathBuf,
        /// Experiment to validate against (defaults to the file's tag).
        #[arg(long)]
        experiment: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output table path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Token dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Worker threads (default: all cores, or ICL_ALIGN_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

fn load_config(path: Option<&PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("{}: invalid config", p.display()))
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("ICL_ALIGN_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        // Ignore the error if a pool already exists; tests build one pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(experiment: &str, args: &RunArgs) -> Result<ExitCode> {
    init_threads(args.threads);
    let mut cfg = match load_config(args.config.as_ref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e:#}");
            return Ok(ExitCode::from(1));
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(d) = args.d {
        cfg.d = Some(d);
    }
    if let Some(format) = args.format {
        cfg.format = Some(format);
    }
    if let Some(out) = &args.out {
        cfg.output_path = Some(out.clone());
    }

    let findings = validate(&cfg, experiment);
    if !findings.is_empty() {
        let source = args
            .config
            .as_ref()
            .map_or_else(|| "<flags>".to_string(), |p| p.display().to_string());
        for finding in &findings {
            eprintln!("{source}: {finding}");
        }
        return Ok(ExitCode::from(1));
    }

    let outcome = run_experiment(experiment, &cfg)?;
    let format = cfg.format.unwrap_or(OutputFormat::Csv);
    write_outputs(&outcome.table, format, cfg.output_path.as_deref(), outcome.manifest)?;
    if let Some(path) = &cfg.output_path {
        eprintln!(
            "wrote {} ({} rows, {} failed)",
            path.display(),
            outcome.table.rows.len(),
            outcome.failed_rows
        );
    }
    Ok(if outcome.failed_rows > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn run_validate(config: &PathBuf, experiment: Option<&str>) -> Result<ExitCode> {
    let cfg = match load_config(Some(config)) {
        Ok(cfg) => cfg,
        Err(e) => {
            println!("{e:#}");
            return Ok(ExitCode::from(1));
        }
    };
    let experiment = experiment
        .map(str::to_string)
        .or_else(|| cfg.experiment.clone())
        .unwrap_or_else(|| "theory".to_string());
    let findings = validate(&cfg, &experiment);
    if findings.is_empty() {
        println!("{}: ok ({experiment})", config.display());
        Ok(ExitCode::SUCCESS)
    } else {
        for finding in &findings {
            println!("{}: {finding}", config.display());
        }
        Ok(ExitCode::from(1))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Theory(args) => run("theory", args),
        Command::Simulate(args) => run("simulate", args),
        Command::Sweep(args) => run("sweep", args),
        Command::Align(args) => run("align", args),
        Command::Figure1(args) => run("figure1", args),
        Command::Figure2(args) => run("figure2", args),
        Command::Heatmap5(args) => run("heatmap5", args),
        Command::Phase6(args) => run("phase6", args),
        Command::Contextlen7(args) => run("contextlen7", args),
        Command::Validate { config, experiment } => {
            run_validate(config, experiment.as_deref())
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
