//! `stems`: cost queries, schedule runs, hybrid grid exploration,
//! time-batching sweeps and oracle validation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commands::Status;
use config::{BatchFrom, CutArgs, RunArgs};

#[derive(Parser, Debug)]
#[command(name = "stems", version, about = "Spatio-temporal mapping exploration for spiking neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Best intra-tile mapping per layer (cost.csv, cost.txt).
    Cost {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        cuts: CutArgs,
    },
    /// Schedule one cut configuration (breakdown.csv, trace.jsonl, summary.txt).
    Schedule {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        cuts: CutArgs,
    },
    /// Explore the (N+1)^2 fusion x batching grid (heatmap_*.csv, best point outputs).
    Explore {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "auto")]
        batch_from: BatchFrom,
        /// Output rows per band in fused blocks (default: one).
        #[arg(long, value_name = "ROWS")]
        band_rows: Option<u64>,
    },
    /// Uniform time-batching sweep (sweep.csv).
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        factors: Vec<u64>,
    },
    /// Cross-check the analytical model against the oracles on micro benchmarks.
    Validate {
        /// Random tile orders per configuration.
        #[arg(long, default_value_t = 100)]
        orders: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
        #[arg(long, value_name = "DIR", default_value = "stems-out")]
        out: PathBuf,
    },
}

fn init(jobs: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Cost { run, cuts } => {
            init(run.jobs)?;
            let ctx = config::load(&run)?;
            let spec = config::cuts(&cuts, &ctx.workload)?;
            commands::cost(&ctx, &spec, &run.out, run.stats)
        }
        Command::Schedule { run, cuts } => {
            init(run.jobs)?;
            let ctx = config::load(&run)?;
            let spec = config::cuts(&cuts, &ctx.workload)?;
            commands::schedule_cmd(&ctx, &spec, run.seed, &run.out, run.stats)
        }
        Command::Explore { run, batch_from, band_rows } => {
            init(run.jobs)?;
            let ctx = config::load(&run)?;
            commands::explore(&ctx, batch_from, band_rows, &run.out, run.stats)
        }
        Command::Sweep { run, factors } => {
            init(run.jobs)?;
            let ctx = config::load(&run)?;
            commands::sweep(&ctx, &factors, &run.out, run.stats)
        }
        Command::Validate { orders, seed, jobs, out } => {
            init(jobs)?;
            commands::validate(orders, seed, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STEMS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed(msg)) => {
            eprintln!("stems: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("stems: {e:#}");
            let infeasible = e
                .downcast_ref::<stems_core::Error>()
                .is_some_and(|c| matches!(c, stems_core::Error::Unschedulable { .. } | stems_core::Error::Internal(_)));
            ExitCode::from(if infeasible { 2 } else { 1 })
        }
    }
}
