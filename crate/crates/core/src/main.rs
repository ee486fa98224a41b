use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use riskctl::config::load_config;
use riskctl::portfolio::{
    hjb_scan, run_experiment, verify_relations, write_coeffs, write_hjb_scan_csv, write_relations, ExperimentConfig,
    FaultInjection,
};
use riskctl::{Error, Result};

/// Risk-sensitive control: coefficient solves, relation checks and
/// Monte-Carlo experiments for the factor portfolio model.
#[derive(Debug, Parser)]
#[command(name = "riskctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file; baseline parameters if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the number of Monte-Carlo paths.
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Overrides the number of SDE time steps.
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Test hook: none, swap-gamma-rho, shift-k.
    #[arg(long, global = true, default_value = "none")]
    fault: FaultInjection,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the coefficient ODEs and write coeffs.csv.
    Coeffs,
    /// Check every relation and write relations.txt.
    Verify,
    /// Run all studies and write every artifact.
    Experiment,
    /// HJB residual over a 20 × 20 (t, x) lattice, written to hjb_scan.csv.
    HjbScan,
}

const EXIT_FAIL: u8 = 1;
const EXIT_INPUT: u8 = 2;
const SCAN_SIZE: usize = 20;

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(paths) = cli.paths {
        cfg.n_paths = paths;
    }
    if let Some(steps) = cli.steps {
        cfg.n_steps = steps;
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn verdict(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = build_config(cli)?;
    let out: &Path = &cli.out;
    fs::create_dir_all(out)?;
    match cli.command {
        Command::Coeffs => {
            let coeffs = cfg.solve_coefficients()?;
            write_coeffs(&coeffs, out)?;
            println!("wrote {}", out.join("coeffs.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let report = verify_relations(&cfg, cli.fault)?;
            write_relations(&report, out)?;
            report.write_text(std::io::stdout().lock())?;
            Ok(verdict(report.all_pass()))
        }
        Command::Experiment => {
            let report = run_experiment(&cfg, out, cli.fault)?;
            for (stage, elapsed) in &report.timings {
                eprintln!("{stage}: {:.3} s", elapsed.as_secs_f64());
            }
            println!("relations: {}", if report.relations.all_pass() { "PASS" } else { "FAIL" });
            println!("optimality: {}", if report.optimality.pass() { "PASS" } else { "FAIL" });
            for (label, t) in &report.transforms {
                println!("transform {label}: {}", if t.pass { "PASS" } else { "FAIL" });
            }
            println!("wrote artifacts to {}", out.display());
            Ok(verdict(report.all_pass()))
        }
        Command::HjbScan => {
            let coeffs = cfg.solve_coefficients()?;
            let rows = hjb_scan(&cfg, &coeffs, SCAN_SIZE, SCAN_SIZE)?;
            let mut f = BufWriter::new(fs::File::create(out.join("hjb_scan.csv"))?);
            write_hjb_scan_csv(&mut f, &rows)?;
            f.flush()?;
            let worst = rows.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
            println!("max |residual| = {worst:e} (tolerance {:e})", cfg.tolerances.hjb);
            Ok(verdict(worst <= cfg.tolerances.hjb))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
