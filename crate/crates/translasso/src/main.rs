use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use translasso::io::{write_table, OutputFormat};
use translasso::runs::{self, SweepOutput};
use translasso::{Config, Error, Result, RunContext};

#[derive(Parser)]
#[command(
    name = "translasso",
    version,
    about = "Two-stage transfer Lasso: replica predictions, simulations and data fits"
)]
struct Cli {
    /// TOML configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the configured root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[arg(long, global = true, default_value = "csv")]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the replica equations at one hyperparameter point.
    ReplicaSolve,
    /// Replica curves over the (kappa, dlambda) grid, or the strategy ratio map.
    Sweep,
    /// Finite-size simulation, joined with the replica prediction.
    Simulate,
    /// Compare tuning strategies across noise levels.
    Strategies,
    /// Cross-validated fit on delimited class tables.
    Realdata,
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let ctx = RunContext::new(config, cli.workers)?;
    let (out, fmt) = (cli.out.as_path(), cli.format);
    let mut written = Vec::new();
    match cli.command {
        Command::ReplicaSolve => written.push(write_table(
            out,
            "replica",
            &runs::replica_solve(&ctx)?,
            fmt,
        )?),
        Command::Sweep => match runs::sweep(&ctx)? {
            SweepOutput::Curves(r) => written.push(write_table(out, "sweep", &r, fmt)?),
            SweepOutput::RatioMap(r) => written.push(write_table(out, "ratio_map", &r, fmt)?),
        },
        Command::Simulate => {
            written.push(write_table(out, "simulate", &runs::simulate(&ctx)?, fmt)?)
        }
        Command::Strategies => {
            let (rows, ratios) = runs::strategies(&ctx)?;
            written.push(write_table(out, "strategies", &rows, fmt)?);
            written.push(write_table(out, "strategy_ratios", &ratios, fmt)?);
        }
        Command::Realdata => {
            let r = runs::realdata(&ctx)?;
            written.push(write_table(out, "coefficients", &r.coefficients, fmt)?);
            written.push(write_report(out, &r.report)?);
        }
    }
    Ok(written)
}

fn write_report(dir: &Path, report: &runs::RealDataReport) -> Result<PathBuf> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
