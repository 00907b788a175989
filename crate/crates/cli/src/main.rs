use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use ppgrid::sim::Strategy;
use ppgrid_cli::{ForecastSpec, RunSpec, Sweep};

#[derive(Parser)]
#[command(name = "ppgrid", version, about = "Energy sharing simulator for harvesting base stations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios and write per-run metrics plus seed-averaged summaries.
    Run(RunArgs),
    /// Run all strategies (or read existing summaries) and write a wide comparison table.
    Compare(CompareArgs),
    /// Rolling GP forecast of a single trace.
    Forecast(ForecastArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Sweep the light-cluster probability over these values.
    #[arg(long, value_delimiter = ',', conflicts_with = "sweep_eta")]
    sweep_p: Option<Vec<f64>>,
    /// Sweep the daily purchase cap over these values (`inf` allowed).
    #[arg(long, value_delimiter = ',')]
    sweep_eta: Option<Vec<f64>>,
    /// Strategies, e.g. CONV,GPS_MPC_CONV.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    /// Seeds, e.g. 1,2,3.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Simulated days after the warm-up history.
    #[arg(long)]
    days: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario TOML; all strategies are run unless --strategies is given.
    #[arg(long, required_unless_present = "from", conflicts_with = "from")]
    config: Option<PathBuf>,
    /// Directory with summary files from earlier runs.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', conflicts_with = "sweep_eta")]
    sweep_p: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sweep_eta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    days: Option<usize>,
}

#[derive(Args)]
struct ForecastArgs {
    /// Trace CSV.
    #[arg(long)]
    trace: PathBuf,
    /// Forecast settings TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn sweep(p: Option<Vec<f64>>, eta: Option<Vec<f64>>) -> Result<Sweep> {
    Ok(match (p, eta) {
        (Some(_), Some(_)) => bail!("choose one sweep axis"),
        (Some(v), None) => Sweep::P(v),
        (None, Some(v)) => Sweep::Eta(v),
        (None, None) => Sweep::None,
    })
}

fn spec(
    config: PathBuf,
    out: PathBuf,
    sweep_p: Option<Vec<f64>>,
    sweep_eta: Option<Vec<f64>>,
    strategies: Option<Vec<Strategy>>,
    seeds: Option<Vec<u64>>,
    days: Option<usize>,
) -> Result<RunSpec> {
    Ok(RunSpec {
        config,
        out,
        sweep: sweep(sweep_p, sweep_eta)?,
        strategies: strategies.unwrap_or_default(),
        seeds: seeds.unwrap_or_default(),
        days,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => {
            let spec = spec(a.config, a.out, a.sweep_p, a.sweep_eta, a.strategies, a.seeds, a.days)?;
            let report = ppgrid_cli::cmd_run(&spec)?;
            for n in &report.notices {
                eprintln!("notice: {n}");
            }
            for s in &report.summaries {
                println!("{s}");
            }
            println!(
                "wrote {} metrics and {} summary files to {}",
                report.metrics_files.len(),
                report.summary_files.len(),
                spec.out.display()
            );
        }
        Command::Compare(a) => {
            let path = match (a.from, a.config) {
                (Some(from), _) => ppgrid_cli::cmd_compare_dir(&from, &a.out)?,
                (None, Some(config)) => {
                    let spec = spec(config, a.out, a.sweep_p, a.sweep_eta, a.strategies, a.seeds, a.days)?;
                    let (report, path) = ppgrid_cli::cmd_compare_run(&spec)?;
                    for s in &report.summaries {
                        println!("{s}");
                    }
                    path
                }
                (None, None) => bail!("compare needs --config or --from"),
            };
            println!("wrote {}", path.display());
        }
        Command::Forecast(a) => {
            let report = ppgrid_cli::cmd_forecast(&ForecastSpec {
                trace: a.trace,
                config: a.config,
                out: a.out,
            })?;
            let s = &report.summary;
            println!(
                "{} forecasts of `{}` (N={}, N*={}): mean RMSE {:.5}, one-step RMSE {:.5}",
                s.slots, s.column, s.window, s.horizon, s.mean_rmse, s.one_step_rmse
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
