use clap::{Args, Parser, Subcommand};
use mrhom_cli::commands::{self, TagFormat};
use mrhom_cli::config::{GridSpec, Overrides, ParamMode};
use mrhom_cli::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Momentum-resolved two-photon interference: simulate, ingest, fit and bound.
#[derive(Parser)]
#[command(name = "mrhom", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; reference defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for the Monte Carlo streams.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Events per repeat.
    #[arg(long, global = true, value_name = "N")]
    events: Option<u64>,
    /// Repeats per scan point.
    #[arg(long, global = true, value_name = "N")]
    repeats: Option<usize>,
    /// Scan grid in mm, stop inclusive.
    #[arg(long, global = true, value_name = "START:STOP:STEP")]
    grid: Option<GridSpec>,
    /// Integrate the continuous density over each pixel instead of the sinc law.
    #[arg(long, global = true)]
    exact_integral: bool,
    #[arg(long, global = true, value_enum)]
    delta_mode: Option<ParamMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a displacement scan.
    Simulate {
        /// Also write time-tag files for the first repeat of each point.
        #[arg(long)]
        timetags: bool,
    },
    /// Build coincidence matrices from a time-tag file.
    Ingest {
        input: PathBuf,
        /// Defaults to csv for a .csv extension, binary otherwise.
        #[arg(long, value_enum)]
        format: Option<TagFormat>,
    },
    /// Fit beat curves to every channel of a dataset.
    Fit {
        /// Defaults to <out>/dataset.csv.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Per-event Cramér-Rao and quantum bounds on the scan grid.
    Crb,
    /// Beat tables, fits, estimates and bounds for a dataset.
    Report {
        /// Defaults to <out>/dataset.csv.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> mrhom_cli::Result<()> {
    let g = cli.global;
    let overrides = Overrides {
        seed: g.seed,
        out: g.out,
        events: g.events,
        repeats: g.repeats,
        grid: g.grid,
        exact_integral: g.exact_integral,
        delta_mode: g.delta_mode,
    };
    let (cfg, digest) = commands::prepare(g.config.as_deref(), &overrides)?;
    log::info!("config digest {digest}");
    match cli.command {
        Command::Simulate { timetags } => {
            let ds = commands::simulate(&cfg, &digest, timetags)?;
            log::info!(
                "{} points × {} channels",
                ds.points.len(),
                ds.channels.len()
            );
        }
        Command::Ingest { input, format } => {
            let s = commands::ingest(&cfg, &digest, &input, format)?;
            log::info!(
                "{} pairs: {} bunching, {} antibunching, {} masked, {} ignored",
                s.total_pairs,
                s.bunching,
                s.antibunching,
                s.masked_dropped,
                s.ignored
            );
        }
        Command::Fit { dataset } => {
            commands::fit(&cfg, &digest, dataset.as_deref())?;
        }
        Command::Crb => {
            commands::crb_tables(&cfg, &digest)?;
        }
        Command::Report { dataset } => {
            commands::report(&cfg, &digest, dataset.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code: CliError = e;
            ExitCode::from(code.exit_code() as u8)
        }
    }
}
